use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{UNet, UNetConfig};
use crate::error::{Error, TensorError};
use crate::tensor::{ParamBinding, ParameterStore, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub feature_width: usize,
    /// Number of U-Nets `L`.
    pub stages: usize,
    pub base_width: usize,
    pub levels: usize,
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.stages == 0 {
            return Err(Error::Config("render.stages must be at least 1".into()));
        }
        self.unet_config(true).validate()
    }

    pub fn unet_config(&self, last: bool) -> UNetConfig {
        UNetConfig {
            in_channels: self.feature_width,
            base_width: self.base_width,
            stages: self.levels,
            out_channels: if last { 3 } else { self.feature_width },
        }
    }

    pub fn multiple(&self) -> usize {
        1 << self.levels
    }
}

/// Sequence of U-Nets mapping a feature grid to RGB. Every stage but the
/// last learns a residual that is added to the input grid `G`; the last
/// maps to three channels followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct RenderStack {
    pub name: String,
    pub config: RenderConfig,
}

impl RenderStack {
    pub fn new(name: impl Into<String>, config: RenderConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }

    fn stage(&self, l: usize) -> UNet {
        let last = l + 1 == self.config.stages;
        UNet::new(format!("{}.s{l}", self.name), self.config.unet_config(last))
    }

    /// Residual stages get a zero-initialized output convolution, so the
    /// initial stack equals its last stage applied to `G`.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
        for l in 0..self.config.stages {
            let last = l + 1 == self.config.stages;
            self.stage(l).init(store, rng, !last)?;
        }
        Ok(())
    }

    /// Maps an H×W×C feature grid to an H×W×3 image in (0, 1).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamBinding, g: Var) -> Result<Var, Error> {
        let mut h = g;
        for l in 0..self.config.stages - 1 {
            let r = self.stage(l).forward(tape, p, h)?;
            h = tape.add(g, r)?;
        }
        let out = self.stage(self.config.stages - 1).forward(tape, p, h)?;
        Ok(tape.sigmoid(out))
    }
}
