//! Layer building blocks shared by the backbone and the decoders.

use rand::Rng;

use crate::autograd::{BufferUpdate, NormMode, Tape, Var};
use crate::error::Result;
use crate::params::{Builder, ParamId, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weight stored as `in × out`, truncated-normal(0.02) initialized.
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        b.scope(name, |b| Linear {
            weight: b.trunc_normal("weight", &[d_in, d_out], 0.02),
            bias: bias.then(|| b.constant("bias", &[d_out], 0.0)),
        })
    }

    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize) -> Self {
        b.scope(name, |b| LayerNorm { gain: b.constant("gain", &[dim], 1.0), shift: b.constant("shift", &[dim], 0.0) })
    }

    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, x: Var) -> Result<Var> {
        tape.layer_norm(x, tape.param(self.gain), tape.param(self.shift), Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal initialized `out × in × k × k` convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        b.scope(name, |b| Conv2d {
            weight: b.trunc_normal("weight", &[c_out, c_in, kernel, kernel], std),
            bias: bias.then(|| b.constant("bias", &[c_out], 0.0)),
            stride,
            padding,
        })
    }

    /// 1×1 class projection with small weights so initial logits are near uniform.
    pub fn classifier<R: Rng>(b: &mut Builder<'_, R>, name: &str, c_in: usize, c_out: usize) -> Self {
        b.scope(name, |b| Conv2d {
            weight: b.trunc_normal("weight", &[c_out, c_in, 1, 1], 0.1),
            bias: Some(b.constant("bias", &[c_out], 0.0)),
            stride: 1,
            padding: 0,
        })
    }

    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gain: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| BatchNorm2d {
            gain: b.constant("gain", &[channels], 1.0),
            shift: b.constant("shift", &[channels], 0.0),
            running_mean: b.buffer("running_mean", &[channels], 0.0),
            running_var: b.buffer("running_var", &[channels], 1.0),
        })
    }

    /// In training mode the batch statistics are queued on the tape; apply
    /// them with [`apply_buffer_updates`] after the step.
    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, x: Var, mode: Mode) -> Result<Var> {
        let (gain, shift) = (tape.param(self.gain), tape.param(self.shift));
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm2d(x, gain, shift, NormMode::Train, Self::EPS)?;
                if let Some(stats) = stats {
                    tape.push_update(BufferUpdate { mean: self.running_mean, var: self.running_var, stats });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = tape.store();
                let mean = store.get(self.running_mean).data();
                let var = store.get(self.running_var).data();
                Ok(tape.batch_norm2d(x, gain, shift, NormMode::Eval(mean, var), Self::EPS)?.0)
            }
        }
    }
}

/// `running ← (1 − momentum)·running + momentum·batch` for every queued
/// batch-norm update.
pub fn apply_buffer_updates<E: Element>(store: &mut ParamStore<E>, updates: &[BufferUpdate<E>], momentum: f64) {
    let m = E::lit(momentum);
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (E::one() - m) * *r + m * b;
            }
        }
    }
}

/// Conv3×3 → BN → ReLU, twice.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl DoubleConv {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, c_in: usize, c_out: usize) -> Self {
        b.scope(name, |b| DoubleConv {
            conv1: Conv2d::build(b, "conv1", c_in, c_out, 3, 1, 1, false),
            bn1: BatchNorm2d::build(b, "bn1", c_out),
            conv2: Conv2d::build(b, "conv2", c_out, c_out, 3, 1, 1, false),
            bn2: BatchNorm2d::build(b, "bn2", c_out),
        })
    }

    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(self.bn1.forward(tape, h, mode)?);
        let h = self.conv2.forward(tape, h)?;
        Ok(tape.relu(self.bn2.forward(tape, h, mode)?))
    }
}
