use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::he_normal;
use crate::error::TensorError;
use crate::tensor::{ParamBinding, ParameterStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, T::from_f64(0.2)),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
}

/// Alternating affine maps and activations; the last layer is affine only.
/// Rows of the input are processed independently.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub name: String,
    pub config: MlpConfig,
}

impl Mlp {
    pub fn new(name: impl Into<String>, config: MlpConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }

    pub fn in_width(&self) -> usize {
        self.config.widths[0]
    }

    pub fn out_width(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
        if self.config.widths.len() < 2 {
            return Err(TensorError::Invalid {
                op: "mlp",
                msg: "needs at least input and output widths".into(),
            });
        }
        for (i, w) in self.config.widths.windows(2).enumerate() {
            store.insert(format!("{}.l{i}.w", self.name), he_normal(rng, &[w[0], w[1]], w[0]))?;
            store.insert(format!("{}.l{i}.b", self.name), Tensor::zeros(&[w[1]]))?;
        }
        Ok(())
    }

    /// Applies the MLP to every row of an N×in input.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamBinding, x: Var) -> Result<Var, TensorError> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_width() {
            return Err(TensorError::ShapeMismatch {
                op: "mlp",
                lhs: shape.to_vec(),
                rhs: vec![0, self.in_width()],
            });
        }
        let layers = self.config.widths.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let w = p.get(&format!("{}.l{i}.w", self.name))?;
            let b = p.get(&format!("{}.l{i}.b", self.name))?;
            let y = tape.matmul(h, w)?;
            h = tape.add_bias(y, b)?;
            if i + 1 < layers {
                h = self.config.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}
