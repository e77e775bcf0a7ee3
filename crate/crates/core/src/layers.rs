//! Parameterized building blocks shared by the encoders and heads.
//!
//! Each layer only holds [`ParamId`]s; the values live in the owning model's
//! [`ParamStore`] under dotted names such as `image_encoder.stem.conv.weight`.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{BnStats, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Default,
    Zero,
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let (w, b) = match init {
            Init::Default => {
                let bound = 1.0 / (in_dim as f64).sqrt();
                (
                    Tensor::uniform(&[in_dim, out_dim], -bound, bound, rng),
                    Tensor::uniform(&[out_dim], -bound, bound, rng),
                )
            }
            Init::Zero => (Tensor::zeros(&[in_dim, out_dim]), Tensor::zeros(&[out_dim])),
        };
        Self {
            weight: store.trainable(&format!("{name}.weight"), w),
            bias: store.trainable(&format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Bias-free 2-D convolution (always followed by batchnorm here).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // He initialization for ReLU networks.
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w = Tensor::randn(&[c_out, c_in, k, k], std, rng);
        Self {
            weight: store.trainable(&format!("{name}.weight"), w),
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.trainable(&format!("{name}.weight"), Tensor::full(&[channels], T::one())),
            beta: store.trainable(&format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
        }
    }

    /// In train mode the updated running statistics are staged on the tape
    /// and land in the store on [`Tape::commit_buffers`].
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let mut rm = store.get(self.running_mean).data().to_vec();
                let mut rv = store.get(self.running_var).data().to_vec();
                let y = tape.batchnorm(
                    x,
                    g,
                    b,
                    BnStats::Batch {
                        running_mean: &mut rm,
                        running_var: &mut rv,
                    },
                    keep,
                )?;
                tape.stage_buffer(self.running_mean, rm);
                tape.stage_buffer(self.running_var, rv);
                Ok(y)
            }
            Mode::Eval => tape.batchnorm(
                x,
                g,
                b,
                BnStats::Running {
                    running_mean: store.get(self.running_mean).data(),
                    running_var: store.get(self.running_var).data(),
                },
                keep,
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.trainable(&format!("{name}.weight"), Tensor::full(&[dim], T::one())),
            beta: store.trainable(&format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, g, b)
    }
}

/// Conv -> batchnorm -> optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, k, stride, k / 2, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        relu: bool,
    ) -> Result<Var> {
        let y = self.conv.forward(store, tape, x)?;
        let y = self.bn.forward(store, tape, y, mode, None)?;
        Ok(if relu { tape.relu(y) } else { y })
    }
}
