//! Finite-difference verification of every differentiable operator plus
//! one end-to-end model.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NormMode, Tape, Var};
use crate::decoders::{assemble_model, DecoderMode, FineTuneConfig};
use crate::error::Result;
use crate::gradcheck::{compare_input_gradient, compare_param_gradients, Comparison, DEFAULT_EPS};
use crate::geodata::NUM_CLASSES;
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::vit::{Preset, ViTConfig};

pub const OP_TOLERANCE: f64 = 1e-3;
pub const COMPOSITE_TOLERANCE: f64 = 1e-2;
pub const COMPOSITE_PROBES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<width$}  max_rel_err {:.3e}  tol {:.0e}  {}",
                r.name,
                r.max_relative_error,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
        let failed = self.failures().len();
        let _ = writeln!(s, "{} checks, {} failed", self.results.len(), failed);
        s
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values at least 0.1 from zero, so finite differences never straddle a kink.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, rng).map(|v| v.signum() * (0.1 + 0.9 * v.abs()))
}

/// Distinct values on a coarse lattice, so pooling windows have no ties.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("shape matches")
}

/// Weighted sum with fixed random weights.
fn project(t: &Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random(&t.shape(y), &mut rng));
    Ok(t.sum(t.mul(y, w)?))
}

type OpFn = Box<dyn Fn(&Tape<'_, f64>, Var) -> Result<Var>>;

struct Case {
    name: &'static str,
    input: Tensor<f64>,
    f: OpFn,
}

fn case(name: &'static str, input: Tensor<f64>, f: impl Fn(&Tape<'_, f64>, Var) -> Result<Var> + 'static) -> Case {
    Case { name, input, f: Box::new(f) }
}

fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let r = &mut rng;
    let b34 = random(&[3, 4], r);
    let b4 = random(&[4], r);
    let mm_rhs = random(&[4, 5], r);
    let mm_lhs = random(&[3, 4], r);
    let bmm_rhs = random(&[2, 4, 3], r);
    let lin_w = random(&[4, 6], r);
    let lin_b = random(&[6], r);
    let lin_x = random(&[5, 4], r);
    let ln_g = random(&[6], r);
    let ln_b = random(&[6], r);
    let ln_x = random(&[3, 6], r);
    let cat_other = random(&[2, 2, 3], r);
    let bn_g = random(&[3], r);
    let bn_b = random(&[3], r);
    let conv_x = random(&[2, 3, 6, 6], r);
    let conv_w = random(&[4, 3, 3, 3], r);
    let conv_b = random(&[4], r);
    let targets: Vec<usize> = (0..2 * 9).map(|_| r.random_range(0..5)).collect();
    let targets2 = targets.clone();

    vec![
        case("add", random(&[3, 4], r), move |t, x| {
            let b = t.constant(b34.clone());
            project(t, t.add(x, b)?, 1)
        }),
        case("sub", random(&[3, 4], r), |t, x| {
            let y = t.scale(x, 0.5);
            project(t, t.sub(y, t.mul(x, x)?)?, 2)
        }),
        case("mul", random(&[2, 3, 2], r), |t, x| project(t, t.mul(x, t.add_scalar(x, 0.3))?, 3)),
        case("add_broadcast", random(&[4], r), {
            let base = random(&[3, 4], r);
            move |t, x| {
                let a = t.constant(base.clone());
                let y = t.add_broadcast(a, x)?;
                project(t, t.mul(y, y)?, 4)
            }
        }),
        case("add_broadcast.lhs", random(&[2, 4], r), move |t, x| {
            let b = t.constant(b4.clone());
            let y = t.add_broadcast(x, b)?;
            project(t, t.mul(y, y)?, 5)
        }),
        case("scale", random(&[5], r), |t, x| project(t, t.scale(x, -1.7), 6)),
        case("add_scalar", random(&[5], r), |t, x| {
            let y = t.add_scalar(x, 0.25);
            project(t, t.mul(y, y)?, 7)
        }),
        case("sum", random(&[2, 3], r), |t, x| Ok(t.sum(t.mul(x, x)?))),
        case("mean", random(&[2, 3], r), |t, x| Ok(t.mean(t.mul(x, x)?))),
        case("relu", off_zero(&[3, 4], r), |t, x| project(t, t.relu(x), 8)),
        case("gelu", random(&[3, 4], r).map(|v| 3.0 * v), |t, x| project(t, t.gelu(x), 9)),
        case("reshape", random(&[2, 6], r), |t, x| {
            let y = t.reshape(x, &[3, 4])?;
            project(t, t.mul(y, y)?, 10)
        }),
        case("permute", random(&[2, 3, 4], r), |t, x| {
            let y = t.permute(x, &[2, 0, 1])?;
            project(t, t.mul(y, y)?, 11)
        }),
        case("concat", random(&[2, 1, 3], r), move |t, x| {
            let o = t.constant(cat_other.clone());
            let y = t.concat(&[o, x, x], 1)?;
            project(t, t.mul(y, y)?, 12)
        }),
        case("narrow", random(&[3, 5], r), |t, x| {
            let y = t.narrow(x, 1, 1, 3)?;
            project(t, t.mul(y, y)?, 13)
        }),
        case("expand0", random(&[1, 2, 3], r), |t, x| {
            let y = t.expand0(x, 3)?;
            project(t, t.mul(y, y)?, 14)
        }),
        case("matmul.lhs", random(&[3, 4], r), move |t, x| {
            let b = t.constant(mm_rhs.clone());
            project(t, t.matmul(x, b)?, 15)
        }),
        case("matmul.rhs", random(&[4, 2], r), move |t, x| {
            let a = t.constant(mm_lhs.clone());
            project(t, t.matmul(a, x)?, 16)
        }),
        case("matmul.batched", random(&[2, 3, 4], r), move |t, x| {
            let b = t.constant(bmm_rhs.clone());
            let y = t.matmul(x, b)?;
            project(t, t.mul(y, y)?, 17)
        }),
        case("linear.input", random(&[5, 4], r), {
            let (w, b) = (lin_w.clone(), lin_b.clone());
            move |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                project(t, t.linear(x, w, Some(b))?, 18)
            }
        }),
        case("linear.weight", random(&[4, 6], r), {
            let (xin, b) = (lin_x.clone(), lin_b);
            move |t, w| {
                let (x, b) = (t.constant(xin.clone()), t.constant(b.clone()));
                project(t, t.linear(x, w, Some(b))?, 19)
            }
        }),
        case("linear.bias", random(&[6], r), move |t, b| {
            let (x, w) = (t.constant(lin_x.clone()), t.constant(lin_w.clone()));
            let y = t.linear(x, w, Some(b))?;
            project(t, t.mul(y, y)?, 20)
        }),
        case("softmax", random(&[3, 5], r).map(|v| 2.0 * v), |t, x| project(t, t.softmax(x), 21)),
        case("log_softmax", random(&[3, 5], r).map(|v| 2.0 * v), |t, x| project(t, t.log_softmax(x), 22)),
        case("layer_norm.input", random(&[3, 6], r), {
            let (g, b) = (ln_g.clone(), ln_b.clone());
            move |t, x| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                project(t, t.layer_norm(x, g, b, 1e-6)?, 23)
            }
        }),
        case("layer_norm.gain", random(&[6], r), {
            let (xin, b) = (ln_x.clone(), ln_b);
            move |t, g| {
                let (x, b) = (t.constant(xin.clone()), t.constant(b.clone()));
                project(t, t.layer_norm(x, g, b, 1e-6)?, 24)
            }
        }),
        case("layer_norm.shift", random(&[6], r), move |t, b| {
            let (x, g) = (t.constant(ln_x.clone()), t.constant(ln_g.clone()));
            let y = t.layer_norm(x, g, b, 1e-6)?;
            project(t, t.mul(y, y)?, 25)
        }),
        case("batch_norm2d", random(&[2, 3, 2, 2], r), move |t, x| {
            let (g, b) = (t.constant(bn_g.clone()), t.constant(bn_b.clone()));
            let (y, _) = t.batch_norm2d(x, g, b, NormMode::Train, 1e-5)?;
            project(t, y, 26)
        }),
        case("l2_normalize", random(&[3, 4], r), |t, x| project(t, t.l2_normalize(x), 27)),
        case("minmax_normalize", distinct(&[2, 2, 3, 3], r), |t, x| project(t, t.minmax_normalize(x)?, 28)),
        case("conv2d", conv_x.clone(), {
            let (w, b) = (conv_w.clone(), conv_b.clone());
            move |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                project(t, t.conv2d(x, w, Some(b), 1, 1)?, 29)
            }
        }),
        case("conv2d.weight", conv_w.clone(), {
            let (xin, b) = (conv_x.clone(), conv_b);
            move |t, w| {
                let (x, b) = (t.constant(xin.clone()), t.constant(b.clone()));
                project(t, t.conv2d(x, w, Some(b), 2, 1)?, 30)
            }
        }),
        case("conv2d.bias", random(&[4], r), move |t, b| {
            let (x, w) = (t.constant(conv_x.clone()), t.constant(conv_w.clone()));
            let y = t.conv2d(x, w, Some(b), 1, 0)?;
            project(t, t.mul(y, y)?, 31)
        }),
        case("max_pool2d", distinct(&[2, 2, 4, 6], r), |t, x| project(t, t.max_pool2d(x)?, 32)),
        case("resize_bilinear", random(&[1, 2, 3, 4], r), |t, x| project(t, t.resize_bilinear(x, 7, 5)?, 33)),
        case("upsample2x", random(&[2, 1, 3, 3], r), |t, x| project(t, t.upsample2x(x)?, 34)),
        case("cross_entropy", random(&[2, 5, 3, 3], r).map(|v| 2.0 * v), move |t, x| t.cross_entropy(x, &targets)),
        case("bce_onehot", random(&[2, 5, 3, 3], r).map(|v| 2.0 * v), move |t, x| t.bce_onehot(x, &targets2)),
    ]
}

/// Spoils one analytic gradient so the harness can be seen to fail.
fn tamper_with(cmp: &mut Comparison) {
    if let Some(a) = cmp.analytic.first_mut() {
        *a = *a * 1.5 + 0.1;
    }
}

fn max_error(cmp: &Comparison) -> f64 {
    let e = cmp.max_relative_error();
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

/// Desk ViT, token decoder and categorical cross-entropy, probed at
/// randomly chosen parameter elements.
pub fn composite_check(seed: u64, probes: usize) -> Result<Comparison> {
    let vit = ViTConfig::preset(Preset::Desk);
    let ft = FineTuneConfig { mode: DecoderMode::TokenDecoder, ..FineTuneConfig::default() };
    let (net, store) = assemble_model(&ft, &vit, None, seed)?;
    let mut store = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let images = Tensor::from_fn([2, vit.in_channels, vit.image_size, vit.image_size], |_| rng.random_range(-1.0..1.0));
    let targets: Vec<usize> = (0..2 * vit.image_size * vit.image_size).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
    let ids = store.trainable_ids();
    let picks: Vec<_> = (0..probes)
        .map(|_| {
            let id = *ids.choose(&mut rng).expect("model has parameters");
            (id, rng.random_range(0..store.get(id).numel()))
        })
        .collect();
    compare_param_gradients(
        |t| {
            let x = t.constant(images.clone());
            let logits = net.forward(t, x, Mode::Train)?;
            t.cross_entropy(logits, &targets)
        },
        &mut store,
        &picks,
        1e-5,
    )
}

/// Runs every operator check and the composite. `tamper` names a check
/// whose analytic gradient is deliberately corrupted.
pub fn run_suite(tamper: Option<&str>) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for c in op_cases() {
        let mut cmp = compare_input_gradient(&c.f, &c.input, DEFAULT_EPS)?;
        if tamper.is_some_and(|n| n == c.name) {
            tamper_with(&mut cmp);
        }
        report.results.push(CheckResult { name: c.name.into(), max_relative_error: max_error(&cmp), tolerance: OP_TOLERANCE });
    }
    let mut cmp = composite_check(7, COMPOSITE_PROBES)?;
    if tamper.is_some_and(|n| n == "composite") {
        tamper_with(&mut cmp);
    }
    report.results.push(CheckResult {
        name: "composite(desk vit -> token decoder -> cross_entropy)".into(),
        max_relative_error: max_error(&cmp),
        tolerance: COMPOSITE_TOLERANCE,
    });
    Ok(report)
}
