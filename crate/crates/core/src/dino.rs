//! Teacher-student self-distillation.
//!
//! The student is trained by gradient descent to match the teacher's
//! centered and sharpened output distribution across augmented views; the
//! teacher is an exponential moving average of the student and is only
//! ever evaluated on inference tapes.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::Linear;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{Builder, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::vit::{ViT, ViTConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub out_dim: usize,
}

impl HeadConfig {
    pub const DESK: HeadConfig = HeadConfig { hidden_dim: 256, bottleneck_dim: 64, out_dim: 256 };
    pub const FULL: HeadConfig = HeadConfig { hidden_dim: 2048, bottleneck_dim: 256, out_dim: 4096 };
}

/// Three-layer MLP, L2 normalization, then a bias-free projection onto the
/// prototypes.
#[derive(Clone, Debug)]
pub struct DinoHead {
    pub config: HeadConfig,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub last: Linear,
}

impl DinoHead {
    pub const PREFIX: &'static str = "head";

    pub fn build<R: Rng>(b: &mut Builder<'_, R>, in_dim: usize, config: HeadConfig) -> Self {
        b.scope(Self::PREFIX, |b| DinoHead {
            config,
            fc1: Linear::build(b, "fc1", in_dim, config.hidden_dim, true),
            fc2: Linear::build(b, "fc2", config.hidden_dim, config.hidden_dim, true),
            fc3: Linear::build(b, "fc3", config.hidden_dim, config.bottleneck_dim, true),
            last: Linear::build(b, "last", config.bottleneck_dim, config.out_dim, false),
        })
    }

    /// Returns `(bottleneck, logits)`; the bottleneck rows have unit norm.
    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, x: Var) -> Result<(Var, Var)> {
        let h = tape.gelu(self.fc1.forward(tape, x)?);
        let h = tape.gelu(self.fc2.forward(tape, h)?);
        let z = tape.l2_normalize(self.fc3.forward(tape, h)?);
        Ok((z, self.last.forward(tape, z)?))
    }
}

/// Backbone plus projection head. Teacher and student share this layout
/// and differ only in the parameter store they are evaluated against.
#[derive(Clone, Debug)]
pub struct DinoNet {
    pub vit: ViT,
    pub head: DinoHead,
}

impl DinoNet {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, vit: &ViTConfig, head: HeadConfig) -> Result<Self> {
        let vit = ViT::build(b, vit)?;
        let head = DinoHead::build(b, vit.config.embed_dim, head);
        Ok(Self { vit, head })
    }

    /// Prototype logits `[N, K]` of a batch of views.
    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, images: Var) -> Result<Var> {
        let enc = self.vit.forward(tape, images)?;
        Ok(self.head.forward(tape, enc.class_token)?.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropPlan {
    pub n_global: usize,
    pub n_local: usize,
    /// Area fraction range of global crops.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub flip_prob: f64,
    pub global_size: usize,
    pub local_size: usize,
}

impl CropPlan {
    pub fn for_image(image_size: usize) -> Self {
        Self {
            n_global: 2,
            n_local: 4,
            global_scale: (0.5, 1.0),
            local_scale: (0.2, 0.5),
            flip_prob: 0.5,
            global_size: image_size,
            local_size: image_size / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_global == 0 {
            return Err(Error::config("at least one global crop is required"));
        }
        for (name, (lo, hi)) in [("global", self.global_scale), ("local", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::config(format!("{name} crop scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// Crop window in tile pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flipped: bool,
}

pub fn sample_window<R: Rng>(rng: &mut R, h: usize, w: usize, scale: (f64, f64), flip_prob: f64) -> CropWindow {
    let s = if scale.0 == scale.1 { scale.0 } else { rng.random_range(scale.0..=scale.1) };
    let side = h.min(w);
    let size = ((s.sqrt() * side as f64).round() as usize).clamp(1, side);
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let flipped = flip_prob > 0.0 && rng.random_bool(flip_prob);
    CropWindow { top, left, size, flipped }
}

/// Cuts a window from a `[C, H, W]` raster, mirrors it horizontally if
/// requested and resizes it bilinearly to `out × out`.
pub fn apply_window(image: &Tensor, win: CropWindow, out: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim(format!("expected C×H×W raster, got {:?}", image.shape())));
    };
    if win.top + win.size > h || win.left + win.size > w {
        return Err(Error::config(format!("crop window {win:?} exceeds {h}×{w} raster")));
    }
    let s = win.size;
    let mut crop = Vec::with_capacity(c * s * s);
    for ch in 0..c {
        for y in 0..s {
            let row = &image.data()[(ch * h + win.top + y) * w + win.left..][..s];
            if win.flipped {
                crop.extend(row.iter().rev());
            } else {
                crop.extend_from_slice(row);
            }
        }
    }
    let data = if s == out { crop } else { kernels::resize_bilinear(&crop, c, (s, s), (out, out)) };
    Tensor::new([c, out, out], data)
}

/// Horizontal mirror of every channel plane.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let w = *image.shape().last().expect("non-empty shape");
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Global views first, then local views.
pub fn multi_crop<R: Rng>(image: &Tensor, plan: &CropPlan, rng: &mut R) -> Result<Vec<Tensor>> {
    plan.validate()?;
    let &[_, h, w] = image.shape() else {
        return Err(Error::dim(format!("expected C×H×W raster, got {:?}", image.shape())));
    };
    let mut views = Vec::with_capacity(plan.n_global + plan.n_local);
    for (n, scale, size) in
        [(plan.n_global, plan.global_scale, plan.global_size), (plan.n_local, plan.local_scale, plan.local_size)]
    {
        for _ in 0..n {
            let win = sample_window(rng, h, w, scale, plan.flip_prob);
            views.push(apply_window(image, win, size)?);
        }
    }
    Ok(views)
}

/// `softmax((logits − center) / τ)` per row.
pub fn teacher_probs(logits: &Tensor, center: &[f32], tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let k = center.len();
    if logits.shape().last() != Some(&k) {
        return Err(Error::dim(format!("teacher logits {:?} do not match center of {k}", logits.shape())));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        for (v, &c) in row.iter_mut().zip(center) {
            *v = ((*v as f64 - c as f64) / tau) as f32;
        }
        crate::autograd::softmax_row(row);
    }
    Ok(out)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {tau}")))
    }
}

/// Cross-view distillation loss.
///
/// `student` holds one `[B, K]` logit batch per view, global views first;
/// `teacher` holds the detached teacher distributions of the global views.
/// The loss is the mean over pairs `(g, v)` with `v ≠ g` of the batch-mean
/// cross-entropy `−Σ P_t log P_s`.
pub fn dino_loss<E: Element>(tape: &Tape<'_, E>, student: &[Var], teacher: &[Tensor<E>], tau_s: f64) -> Result<Var> {
    check_tau(tau_s)?;
    if teacher.is_empty() || student.len() < teacher.len() {
        return Err(Error::config(format!(
            "need at least as many student views ({}) as teacher views ({}), and one teacher view",
            student.len(),
            teacher.len()
        )));
    }
    let log_ps: Vec<Var> = student.iter().map(|&s| tape.log_softmax(tape.scale(s, E::lit(1.0 / tau_s)))).collect();
    let mut terms = Vec::new();
    for (g, pt) in teacher.iter().enumerate() {
        let rows = pt.numel() / pt.shape().last().expect("non-empty");
        let pt = tape.constant(pt.clone());
        for (v, &lp) in log_ps.iter().enumerate() {
            if v == g {
                continue;
            }
            let ce = tape.sum(tape.mul(pt, lp)?);
            terms.push(tape.scale(ce, E::lit(-1.0 / rows as f64)));
        }
    }
    if terms.is_empty() {
        return Err(Error::config("a single view gives no distillation pairs"));
    }
    let n = terms.len();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, E::lit(1.0 / n as f64)))
}

/// `center ← m·center + (1 − m)·mean(rows)`.
pub fn update_center(center: &mut [f32], teacher_logits: &Tensor, momentum: f64) -> Result<()> {
    let k = center.len();
    if teacher_logits.shape().last() != Some(&k) {
        return Err(Error::dim(format!("teacher logits {:?} do not match center of {k}", teacher_logits.shape())));
    }
    if !teacher_logits.is_finite() {
        return Err(Error::Numeric("non-finite teacher logits in center update".into()));
    }
    let rows = teacher_logits.numel() / k;
    let mut mean = vec![0.0f64; k];
    for row in teacher_logits.data().chunks(k) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for (c, m) in center.iter_mut().zip(mean) {
        *c = (momentum * *c as f64 + (1.0 - momentum) * (m / rows as f64)) as f32;
    }
    Ok(())
}

/// Every teacher parameter `← λ·teacher + (1 − λ)·student`.
pub fn ema_update_teacher(teacher: &mut ParamStore, student: &ParamStore, lambda: f64) -> Result<()> {
    teacher.same_layout(student).map_err(|e| Error::State(format!("teacher/student mismatch: {e}")))?;
    let ids: Vec<_> = teacher.ids().collect();
    for id in ids {
        let s = student.get(id).data();
        for (t, &sv) in teacher.get_mut(id).data_mut().iter_mut().zip(s) {
            *t = (lambda * *t as f64 + (1.0 - lambda) * sv as f64) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub warmup: f64,
    pub final_value: f64,
    pub warmup_epochs: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { warmup: 0.01, final_value: 0.001, warmup_epochs: 5.0 }
    }
}

/// Linear from the warm-up value at epoch 0 to the final value at the end
/// of warm-up; constant afterwards. Fractional epochs interpolate.
pub fn teacher_temperature(epoch: f64, s: &TemperatureSchedule) -> f64 {
    if s.warmup_epochs <= 0.0 || epoch >= s.warmup_epochs {
        return s.final_value;
    }
    let t = epoch.max(0.0) / s.warmup_epochs;
    s.warmup + (s.final_value - s.warmup) * t
}

/// Entropy `H(mean_rows(P))` of the batch-mean distribution.
pub fn collapse_entropy(probs: &Tensor) -> Result<f64> {
    let k = *probs.shape().last().expect("non-empty");
    let rows = probs.numel() / k;
    let mut mean = vec![0.0f64; k];
    for (i, row) in probs.data().chunks(k).enumerate() {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::data(format!("row {i} is not a probability vector (sum {s})")));
        }
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64 / rows as f64;
        }
    }
    Ok(-mean.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DinoConfig {
    pub head: HeadConfig,
    pub center_momentum: f64,
    pub teacher_momentum: f64,
    pub student_temp: f64,
    pub teacher_temp: TemperatureSchedule,
    pub centering: bool,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub crops: CropPlan,
}

impl DinoConfig {
    pub fn for_backbone(vit: &ViTConfig) -> Self {
        Self {
            head: HeadConfig::DESK,
            center_momentum: 0.99,
            teacher_momentum: 0.996,
            student_temp: 0.03,
            teacher_temp: TemperatureSchedule::default(),
            centering: true,
            optimizer: OptimizerConfig::default(),
            epochs: 20,
            batch_size: 16,
            crops: CropPlan::for_image(vit.image_size),
        }
    }
}

/// Everything the pre-training loop owns.
#[derive(Clone, Debug)]
pub struct DinoState {
    pub config: DinoConfig,
    pub net: DinoNet,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub center: Vec<f32>,
    pub optimizer: Optimizer,
    pub step: u64,
    /// Fractional epoch position, drives the teacher temperature.
    pub epoch: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub teacher_entropy: f64,
    pub teacher_temp: f64,
}

impl DinoState {
    /// Fresh student with seeded initialization; the teacher starts as an
    /// exact copy.
    pub fn new(vit: &ViTConfig, config: DinoConfig, seed: u64) -> Result<Self> {
        config.crops.validate()?;
        check_tau(config.student_temp)?;
        let mut student = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DinoNet::build(&mut Builder::new(&mut student, &mut rng), vit, config.head)?;
        Ok(Self::from_parts(net, student, config))
    }

    pub fn from_parts(net: DinoNet, student: ParamStore, config: DinoConfig) -> Self {
        let teacher = student.clone();
        Self {
            center: vec![0.0; config.head.out_dim],
            optimizer: Optimizer::new(config.optimizer),
            config,
            net,
            student,
            teacher,
            step: 0,
            epoch: 0.0,
        }
    }

    /// One optimization step on a batch of `[C, H, W]` rasters.
    pub fn step<R: Rng>(&mut self, batch: &[&Tensor], rng: &mut R) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::data("empty pre-training batch"));
        }
        let plan = self.config.crops;
        let b = batch.len();
        let mut views: Vec<Vec<Tensor>> = vec![Vec::with_capacity(b); plan.n_global + plan.n_local];
        for img in batch {
            for (v, t) in multi_crop(img, &plan, rng)?.into_iter().enumerate() {
                views[v].push(t);
            }
        }
        let stacked: Vec<Tensor> = views.iter().map(|v| stack(v)).collect::<Result<_>>()?;
        let tau_t = teacher_temperature(self.epoch, &self.config.teacher_temp);

        // teacher on global views, no tape
        let (teacher_logits, probs) = {
            let tape = Tape::inference(&self.teacher);
            let mut logits = Vec::with_capacity(plan.n_global);
            let mut probs = Vec::with_capacity(plan.n_global);
            for g in &stacked[..plan.n_global] {
                let x = tape.constant(g.clone());
                let l = tape.value(self.net.forward(&tape, x)?).as_ref().clone();
                probs.push(teacher_probs(&l, &self.center, tau_t)?);
                logits.push(l);
            }
            (logits, probs)
        };

        let (loss, grads) = {
            let tape = Tape::new(&self.student);
            let student: Vec<Var> = stacked
                .iter()
                .map(|v| {
                    let x = tape.constant(v.clone());
                    self.net.forward(&tape, x)
                })
                .collect::<Result<_>>()?;
            let loss = dino_loss(&tape, &student, &probs, self.config.student_temp)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite distillation loss at step {} (epoch {:.3}, teacher temperature {tau_t})",
                    self.step + 1,
                    self.epoch
                )));
            }
            (value, tape.backward(loss)?)
        };
        let params = self.student.trainable_ids();
        self.optimizer.step(&mut self.student, &grads, &params)?;
        ema_update_teacher(&mut self.teacher, &self.student, self.config.teacher_momentum)?;

        let all_logits = stack_rows(&teacher_logits)?;
        let all_probs = stack_rows(&probs)?;
        if self.config.centering {
            update_center(&mut self.center, &all_logits, self.config.center_momentum)?;
        }
        self.step += 1;
        Ok(StepReport { loss, teacher_entropy: collapse_entropy(&all_probs)?, teacher_temp: tau_t })
    }
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::data("nothing to stack"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::dim(format!("cannot stack {:?} with {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Stacks a list of `[C, H, W]` rasters into one `[N, C, H, W]` batch.
pub fn stack_images(items: &[&Tensor]) -> Result<Tensor> {
    let owned: Vec<Tensor> = items.iter().map(|&t| t.clone()).collect();
    stack(&owned)
}

fn stack_rows(items: &[Tensor]) -> Result<Tensor> {
    let k = *items[0].shape().last().expect("non-empty");
    let data: Vec<f32> = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new([data.len() / k, k], data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub teacher_entropy: f64,
    pub teacher_temp: f64,
    pub teacher_momentum: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,loss,teacher_entropy,tau_t,lambda";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{}",
            self.epoch, self.loss, self.teacher_entropy, self.teacher_temp, self.teacher_momentum
        )
    }
}

pub fn epochs_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(EPOCH_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Seeded batch order and augmentation stream for step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

/// Runs `epochs` passes over `images`, shuffling per epoch. `on_epoch` may
/// abort training by returning an error.
pub fn pretrain(
    state: &mut DinoState,
    images: &[Tensor],
    epochs: usize,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if images.is_empty() {
        return Err(Error::data("no tiles to pre-train on"));
    }
    let bs = state.config.batch_size.max(1);
    let per_epoch = images.len().div_ceil(bs);
    let mut out = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        let (mut loss, mut ent, mut tau) = (0.0, 0.0, 0.0);
        for (i, chunk) in order.chunks(bs).enumerate() {
            state.epoch = epoch as f64 + i as f64 / per_epoch as f64;
            let batch: Vec<&Tensor> = chunk.iter().map(|&j| &images[j]).collect();
            let mut rng = step_rng(seed, state.step);
            let r = state.step(&batch, &mut rng)?;
            loss += r.loss;
            ent += r.teacher_entropy;
            tau += r.teacher_temp;
        }
        let n = per_epoch as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: loss / n,
            teacher_entropy: ent / n,
            teacher_temp: tau / n,
            teacher_momentum: state.config.teacher_momentum,
        };
        log::info!("epoch {}: loss {:.5} teacher entropy {:.4}", m.epoch, m.loss, m.teacher_entropy);
        on_epoch(&m)?;
        out.push(m);
    }
    state.epoch = epochs as f64;
    Ok(out)
}
