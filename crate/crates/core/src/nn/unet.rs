use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ConvLayer;
use crate::error::{Error, TensorError};
use crate::tensor::{ParamBinding, ParameterStore, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub stages: usize,
    pub out_channels: usize,
}

impl UNetConfig {
    /// Width of resolution level `level` (0 = full resolution).
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial extents must be divisible by this.
    pub fn multiple(&self) -> usize {
        1 << self.stages
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.stages == 0 || self.in_channels == 0 || self.base_width == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("invalid U-Net configuration {self:?}")));
        }
        Ok(())
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<(), Error> {
        let m = self.multiple();
        if height % m != 0 || width % m != 0 {
            return Err(Error::Divisibility {
                height,
                width,
                multiple: m,
                padded_height: height.div_ceil(m) * m,
                padded_width: width.div_ceil(m) * m,
            });
        }
        Ok(())
    }
}

/// U-Net with one 3×3 convolution per encoder level plus a stride-2
/// downsampling convolution, and decoder stages that upsample by nearest
/// neighbour, concatenate the same-resolution encoder activation, and
/// convolve. A final 1×1 convolution produces the output channels with no
/// activation.
#[derive(Clone, Debug)]
pub struct UNet {
    pub name: String,
    pub config: UNetConfig,
}

impl UNet {
    pub fn new(name: impl Into<String>, config: UNetConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }

    fn layer(&self, part: &str, ksize: usize, cin: usize, cout: usize, stride: usize) -> ConvLayer {
        ConvLayer::new(format!("{}.{part}", self.name), ksize, cin, cout, stride)
    }

    fn layers(&self) -> (ConvLayer, Vec<(ConvLayer, ConvLayer)>, Vec<ConvLayer>, ConvLayer) {
        let c = &self.config;
        let input = self.layer("in", 3, c.in_channels, c.width(0), 1);
        let down = (1..=c.stages)
            .map(|s| {
                (
                    self.layer(&format!("down{s}"), 3, c.width(s - 1), c.width(s), 2),
                    self.layer(&format!("down{s}b"), 3, c.width(s), c.width(s), 1),
                )
            })
            .collect();
        let up = (1..=c.stages)
            .map(|s| self.layer(&format!("up{s}"), 3, c.width(s) + c.width(s - 1), c.width(s - 1), 1))
            .collect();
        let out = self.layer("out", 1, c.width(0), c.out_channels, 1);
        (input, down, up, out)
    }

    /// Registers He-initialized parameters. With `zero_output` the final
    /// convolution starts at zero so the network initially outputs zeros.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng, zero_output: bool) -> Result<(), TensorError> {
        let (input, down, up, out) = self.layers();
        input.init(store, rng, false)?;
        for (a, b) in &down {
            a.init(store, rng, false)?;
            b.init(store, rng, false)?;
        }
        for l in &up {
            l.init(store, rng, false)?;
        }
        out.init(store, rng, zero_output)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamBinding, x: Var) -> Result<Var, Error> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "unet",
                lhs: shape,
                rhs: vec![0, 0, self.config.in_channels],
            }
            .into());
        }
        self.config.check_input(shape[0], shape[1])?;
        let (input, down, up, out) = self.layers();
        let h = input.forward(tape, p, x)?;
        let mut skips = vec![tape.relu(h)];
        for (a, b) in &down {
            let h = a.forward(tape, p, *skips.last().unwrap())?;
            let h = tape.relu(h);
            let h = b.forward(tape, p, h)?;
            skips.push(tape.relu(h));
        }
        let mut cur = skips.pop().unwrap();
        for l in up.iter().rev() {
            let skip = skips.pop().unwrap();
            let upsampled = tape.upsample2x(cur)?;
            let cat = tape.concat(&[upsampled, skip], 2)?;
            let h = l.forward(tape, p, cat)?;
            cur = tape.relu(h);
        }
        Ok(out.forward(tape, p, cur)?)
    }
}
