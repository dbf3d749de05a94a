//! Network blocks: the U-Net image encoder, the aggregation MLP, a
//! multi-head graph attention layer, and the residual render stack.

mod gat;
mod mlp;
mod render;
mod unet;

#[cfg(test)]
mod tests;

pub use gat::{gat_layer, AttentionGraph, Gat, GatConfig};
pub use mlp::{Activation, Mlp, MlpConfig};
pub use render::{RenderConfig, RenderStack};
pub use unet::{UNet, UNetConfig};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::TensorError;
use crate::tensor::{ParamBinding, ParameterStore, Scalar, Tape, Tensor, Var};

/// He-normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub(crate) fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    let normal = Normal::new(0.0f32, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// A k×k convolution with bias, stored as `{name}.w` (k×k×Cin×Cout) and `{name}.b`.
#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    pub name: String,
    pub ksize: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub fn new(name: String, ksize: usize, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            name,
            ksize,
            cin,
            cout,
            stride,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng, zero: bool) -> Result<(), TensorError> {
        let shape = [self.ksize, self.ksize, self.cin, self.cout];
        let w = if zero {
            Tensor::zeros(&shape)
        } else {
            he_normal(rng, &shape, self.ksize * self.ksize * self.cin)
        };
        store.insert(format!("{}.w", self.name), w)?;
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamBinding, x: Var) -> Result<Var, TensorError> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        let y = tape.conv2d(x, w, self.stride)?;
        tape.add_bias(y, b)
    }
}
