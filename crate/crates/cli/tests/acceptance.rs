//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sardino::autograd::Tape;
use sardino::checkpoint::Checkpoint;
use sardino::config::ExperimentConfig;
use sardino::decoders::{assemble_model, finetune, DecoderMode, FineTuneConfig};
use sardino::dino::{
    collapse_entropy, dino_loss, ema_update_teacher, pretrain, stack_images, teacher_probs, update_center,
    DinoConfig, DinoState,
};
use sardino::experiment::{run_grid, PreparedData};
use sardino::geodata::{
    geographic_band_split, normalize_channels, read_tile, split_of, synthesize_dataset, write_tile, RasterTile,
    SynthConfig, NUM_CLASSES,
};
use sardino::metrics::{miou, ConfusionMatrix};
use sardino::params::{Builder, ParamKind, ParamStore};
use sardino::verify::{run_suite, COMPOSITE_TOLERANCE, OP_TOLERANCE};
use sardino::vit::{Preset, ViT, ViTConfig};
use sardino::Tensor;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    check(elapsed < limit, || format!("{what} took {elapsed:.1?}, limit {limit:?}"))
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let report = run_suite(None).map_err(|e| e.to_string())?;
    within(t0.elapsed(), Duration::from_secs(120), "gradient suite")?;
    let failures: Vec<String> = report.failures().iter().map(|c| c.name.clone()).collect();
    check(failures.is_empty(), || format!("failing checks: {}", failures.join(", ")))?;
    let (ops, composite): (Vec<_>, Vec<_>) = report.results.iter().partition(|r| !r.name.starts_with("composite"));
    let worst = ops.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    check(ops.iter().all(|r| r.tolerance == OP_TOLERANCE), || "op tolerance drifted".into())?;
    check(composite.len() == 1 && composite[0].tolerance == COMPOSITE_TOLERANCE, || "composite check missing".into())?;
    Ok(format!(
        "{} op checks, worst rel err {worst:.2e} < {OP_TOLERANCE:e}; composite {:.2e} < {COMPOSITE_TOLERANCE:e}",
        ops.len(),
        composite[0].max_relative_error
    ))
}

fn c2_shapes() -> Outcome {
    let cfg = ViTConfig::preset(Preset::Tiny);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vit = ViT::build(&mut Builder::new(&mut store, &mut rng), &cfg).map_err(|e| e.to_string())?;
    let x = Tensor::from_fn([1, 12, 448, 448], |_| rng.random_range(-2.0..2.0));
    let tape = Tape::inference(&store);
    let enc = vit.forward(&tape, tape.constant(x)).map_err(|e| e.to_string())?;
    let tokens = tape.shape(enc.tokens);
    check(tokens == [1, 785, 192], || format!("token tensor {tokens:?}"))?;
    let maps = tape.shape(vit.attention_maps(&tape, &enc).map_err(|e| e.to_string())?);
    check(maps == [1, 3, 28, 28], || format!("attention maps {maps:?}"))?;
    let mut worst = 0.0f32;
    for a in &enc.attentions {
        let a = tape.value(*a);
        let t = a.shape()[3];
        for row in a.data().chunks(t) {
            worst = worst.max((row.iter().sum::<f32>() - 1.0).abs());
        }
    }
    check(worst <= 1e-5, || format!("attention row sum off by {worst:e}"))?;
    let logits = tape.constant(Tensor::zeros([5, NUM_CLASSES]));
    let ce = tape.value(tape.cross_entropy(logits, &[0, 3, 7, 10, 2]).map_err(|e| e.to_string())?).data()[0] as f64;
    let ln11 = (NUM_CLASSES as f64).ln();
    check((ce - ln11).abs() <= 1e-5, || format!("uniform cross-entropy {ce} vs ln 11 {ln11}"))?;
    Ok(format!("784 patch tokens, 3×28×28 maps, max |row sum - 1| {worst:.1e}, CE(uniform) {ce:.6}"))
}

fn c3_parameters() -> Outcome {
    let count = |p: Preset| {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ViT::build(&mut Builder::new(&mut store, &mut rng), &ViTConfig::preset(p)).map(|_| ViT::count_parameters(&store))
    };
    let tiny = count(Preset::Tiny).map_err(|e| e.to_string())?;
    let base = count(Preset::Base).map_err(|e| e.to_string())?;
    let rel = |n: usize, want: f64| (n as f64 - want).abs() / want;
    check(rel(tiny, 6.1e6) <= 0.10, || format!("tiny {tiny} vs 6.1M"))?;
    check(rel(base, 88.8e6) <= 0.10, || format!("base {base} vs 88.8M"))?;
    Ok(format!(
        "tiny {tiny} ({:+.1}% of 6.1M), base {base} ({:+.1}% of 88.8M)",
        100.0 * (tiny as f64 / 6.1e6 - 1.0),
        100.0 * (base as f64 / 88.8e6 - 1.0)
    ))
}

/// Pair-enumerating loss in f64.
fn brute_force_loss(student: &[Tensor], teacher: &[Tensor], tau_s: f64) -> f64 {
    let k = student[0].shape()[1];
    let (mut total, mut pairs) = (0.0, 0);
    for (g, pt) in teacher.iter().enumerate() {
        for (_, s) in student.iter().enumerate().filter(|(v, _)| *v != g) {
            let rows = s.shape()[0];
            let mut ce = 0.0;
            for r in 0..rows {
                let z: Vec<f64> = (0..k).map(|j| s.data()[r * k + j] as f64 / tau_s).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                ce -= (0..k).map(|j| pt.data()[r * k + j] as f64 * (z[j] - lse)).sum::<f64>();
            }
            total += ce / rows as f64;
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn c4_dino_dynamics() -> Outcome {
    let scalar = |v: f32| {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_fn([1], |_| v), ParamKind::Weight);
        s
    };
    let mut teacher = scalar(0.0);
    let student = scalar(1.0);
    for _ in 0..2 {
        ema_update_teacher(&mut teacher, &student, 0.996).map_err(|e| e.to_string())?;
    }
    let ema = teacher.get(teacher.find("p").unwrap()).data()[0];
    check((ema - 0.007984).abs() <= 0.007984 * 4.0 * f32::EPSILON, || format!("two-step EMA {ema}"))?;

    let batch = Tensor::new([2, 3], vec![1.0, -2.0, 0.5, 1.0, -2.0, 0.5]).unwrap();
    let mut center = vec![0.0f32; 3];
    let mut worst = 0.0f64;
    for n in 1..=100 {
        update_center(&mut center, &batch, 0.99).map_err(|e| e.to_string())?;
        for (c, m) in center.iter().zip([1.0f64, -2.0, 0.5]) {
            let want = m * (1.0 - 0.99f64.powi(n));
            worst = worst.max((*c as f64 - want).abs() / m.abs());
        }
    }
    check(worst <= 1e-5, || format!("center deviates from m(1 - 0.99^n) by {worst:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut loss_err = 0.0f64;
    let cases = 50;
    for _ in 0..cases {
        let b = rng.random_range(1..5);
        let rand_t = |rng: &mut ChaCha8Rng| Tensor::from_fn([b, 8], |_| rng.random_range(-0.3..0.3));
        let student: Vec<Tensor> = (0..rng.random_range(2..6)).map(|_| rand_t(&mut rng)).collect();
        let center: Vec<f32> = (0..8).map(|_| rng.random_range(-0.1..0.1)).collect();
        let teacher: Vec<Tensor> = (0..2)
            .map(|_| teacher_probs(&rand_t(&mut rng), &center, 0.04).unwrap())
            .collect();
        let store = ParamStore::new();
        let tape = Tape::inference(&store);
        let vars: Vec<_> = student.iter().map(|s| tape.constant(s.clone())).collect();
        let got = tape.value(dino_loss(&tape, &vars, &teacher, 0.1).map_err(|e| e.to_string())?).data()[0] as f64;
        let want = brute_force_loss(&student, &teacher, 0.1);
        loss_err = loss_err.max((got - want).abs() / want.abs().max(1.0));
    }
    check(loss_err <= 1e-5, || format!("dino_loss vs pair oracle rel err {loss_err:e}"))?;
    Ok(format!(
        "EMA {ema:.7}, center max rel dev {worst:.1e} over 100 steps, loss oracle err {loss_err:.1e} on {cases} K=8 cases"
    ))
}

/// Teacher entropy of the batch-mean distribution over every tile.
fn teacher_entropy(st: &DinoState, images: &[Tensor]) -> f64 {
    let refs: Vec<&Tensor> = images.iter().collect();
    let x = stack_images(&refs).unwrap();
    let tape = Tape::inference(&st.teacher);
    let logits = tape.value(st.net.forward(&tape, tape.constant(x)).unwrap()).as_ref().clone();
    let tau = sardino::dino::teacher_temperature(st.epoch, &st.config.teacher_temp);
    collapse_entropy(&teacher_probs(&logits, &st.center, tau).unwrap()).unwrap()
}

fn c5_collapse() -> Outcome {
    let t0 = Instant::now();
    let mut tiles = synthesize_dataset(&SynthConfig::default(), 200).map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..tiles.len()).collect();
    normalize_channels(&mut tiles, &all).map_err(|e| e.to_string())?;
    let images: Vec<Tensor> = tiles.into_iter().map(|t| t.channels).collect();
    let vit = ViTConfig::preset(Preset::Desk);
    let k = 256;
    let run = |centering: bool| -> Result<f64, String> {
        let mut cfg = DinoConfig::for_backbone(&vit);
        cfg.centering = centering;
        cfg.batch_size = 4;
        cfg.head.out_dim = k;
        let mut st = DinoState::new(&vit, cfg, 0).map_err(|e| e.to_string())?;
        pretrain(&mut st, &images, 4, 0, |_| Ok(())).map_err(|e| e.to_string())?;
        check(st.step == 200, || format!("{} steps", st.step))?;
        Ok(teacher_entropy(&st, &images))
    };
    let off = run(false)?;
    let on = run(true)?;
    within(t0.elapsed(), Duration::from_secs(600), "collapse runs")?;
    let ln_k = (k as f64).ln();
    check(off < 0.1 * ln_k, || format!("without centering H = {off:.4}, floor 0.1·ln K = {:.4}", 0.1 * ln_k))?;
    check(on > 0.5 * ln_k, || format!("with centering H = {on:.4}, needs > 0.5·ln K = {:.4}", 0.5 * ln_k))?;
    Ok(format!(
        "200 steps, K={k}: H without centering {off:.4} < {:.3}; with centering {on:.4} > {:.3}",
        0.1 * ln_k,
        0.5 * ln_k
    ))
}

fn c6_miou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cases = 200;
    for case in 0..cases {
        let classes = rng.random_range(1..=NUM_CLASSES as u8);
        let truth: Vec<u8> = (0..64).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..classes)).collect();
        let mut cm = ConfusionMatrix::new();
        cm.update(&pred, &truth).map_err(|e| e.to_string())?;
        let got = cm.report(1).map_err(|e| e.to_string())?.miou;
        let mut ious = Vec::new();
        for k in 0..NUM_CLASSES as u8 {
            let inter = (0..64).filter(|&i| pred[i] == k && truth[i] == k).count();
            let union = (0..64).filter(|&i| pred[i] == k || truth[i] == k).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        check(got == want, || format!("case {case}: matrix {got} vs pixel sets {want}"))?;
    }
    let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    counts[0][0] = 50;
    counts[0][1] = 50;
    counts[1][1] = 100;
    let hand = miou(&ConfusionMatrix::from_counts(counts)).map_err(|e| e.to_string())?.miou;
    check((hand - 0.5833).abs() <= 1e-4, || format!("hand case {hand}"))?;
    Ok(format!("{cases} random 8×8 cases exact; [[50,50],[0,100]] → {hand:.4}"))
}

fn c7_grid() -> Outcome {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.finetune.epochs = 20;
    let tiles = synthesize_dataset(&cfg.data.synth(cfg.seed, cfg.data.tile_size), 500).map_err(|e| e.to_string())?;
    let data = PreparedData::new(tiles, cfg.data.band_height).map_err(|e| e.to_string())?;
    let images: Vec<Tensor> = data.tiles.iter().map(|t| t.channels.clone()).collect();
    let mut st = DinoState::new(&cfg.vit, cfg.dino.clone(), cfg.seed).map_err(|e| e.to_string())?;
    pretrain(&mut st, &images, 5, cfg.seed, |_| Ok(())).map_err(|e| e.to_string())?;
    let cells = run_grid(&cfg, &data, Some((&cfg.vit, &st.student)), |_| {}).map_err(|e| e.to_string())?;
    within(t0.elapsed(), Duration::from_secs(3600), "grid")?;
    check(cells.len() == 18, || format!("{} cells", cells.len()))?;
    let mut notes = Vec::new();
    for mode in &cfg.grid.modes {
        let cell = |init: &str, frozen: bool, f: f64| {
            cells
                .iter()
                .find(|c| c.row.mode == mode.name() && c.row.init == init && c.row.frozen == frozen && c.row.fraction == f)
                .expect("cell present")
        };
        for f in &cfg.grid.fractions {
            let frozen = cell("pretrained", true, *f);
            check(frozen.backbone_drift == 0.0, || format!("{mode} frozen drift {} at {f}", frozen.backbone_drift))?;
        }
        let frozen = cell("pretrained", true, 0.1).row.report.miou;
        let unfrozen = cell("pretrained", false, 0.1).row.report.miou;
        check(unfrozen >= frozen, || format!("{mode} at 10%: unfrozen {unfrozen:.4} < frozen {frozen:.4}"))?;
        notes.push(format!("{mode} unfrozen {unfrozen:.3} ≥ frozen {frozen:.3}"));
    }
    Ok(format!("18 cells, frozen drift 0; 10% column: {}; {:.0?}", notes.join(", "), t0.elapsed()))
}

fn c8_overfit() -> Outcome {
    let mut tiles = synthesize_dataset(&SynthConfig::default(), 10).map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..10).collect();
    normalize_channels(&mut tiles, &all).map_err(|e| e.to_string())?;
    let refs: Vec<&RasterTile> = tiles.iter().collect();
    let vit = ViTConfig::preset(Preset::Desk);
    let mut notes = Vec::new();
    for mode in DecoderMode::ALL {
        let ft = FineTuneConfig { mode, epochs: 50, ..FineTuneConfig::default() };
        let (net, mut store) = assemble_model(&ft, &vit, None, 0).map_err(|e| e.to_string())?;
        let out = finetune(&net, &mut store, &ft, &refs, &[], 0, |_| {}).map_err(|e| e.to_string())?;
        let best = out.history.iter().map(|e| e.train_miou).fold(0.0, f64::max);
        check(best > 0.8, || format!("{mode} reached training MIOU {best:.3}"))?;
        notes.push(format!("{mode} {best:.3}"));
    }
    Ok(format!("max training MIOU in 50 epochs: {}", notes.join(", ")))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sardino")).args(args).output().map_err(|e| e.to_string())?;
    check(out.status.success(), || format!("sardino {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn c9_reproducibility() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    fs::write(p("quick.cfg"), "dino.epochs = 3\ndino.batch_size = 8\nfinetune.epochs = 3\nfinetune.batch_size = 4\n")
        .map_err(|e| e.to_string())?;
    cli(&["synth", "--out", &p("data"), "--n", "30", "--seed", "9"])?;
    let read = |name: &str| fs::read(tmp.path().join(name)).map_err(|e| e.to_string());
    for tag in ["a", "b"] {
        cli(&["--threads", "1", "--config", &p("quick.cfg"), "pretrain", "--data", &p("data"), "--out", &p(&format!("pre_{tag}.sdck"))])?;
        cli(&[
            "--threads", "1", "--config", &p("quick.cfg"), "finetune", "--data", &p("data"), "--mode", "attn_unet",
            "--init", &p(&format!("pre_{tag}.sdck")), "--out", &p(&format!("ft_{tag}.sdck")),
        ])?;
    }
    for name in ["pre_{}.metrics.csv", "ft_{}.metrics.csv", "pre_{}.sdck", "ft_{}.sdck"] {
        let (a, b) = (read(&name.replace("{}", "a"))?, read(&name.replace("{}", "b"))?);
        check(a == b, || format!("{} differs between runs", name.replace("_{}", "")))?;
    }

    let tile = synthesize_dataset(&SynthConfig { size: 16, ..SynthConfig::default() }, 1).map_err(|e| e.to_string())?.remove(0);
    let mut bytes = Vec::new();
    write_tile(&mut bytes, &tile).map_err(|e| e.to_string())?;
    let back = read_tile(&bytes[..]).map_err(|e| e.to_string())?;
    let mut again = Vec::new();
    write_tile(&mut again, &back).map_err(|e| e.to_string())?;
    let bit_exact = back.channels.data().iter().zip(tile.channels.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    check(back == tile && bytes == again && bit_exact, || "SRT1 round trip not bit-exact".into())?;

    let ck_bytes = read("ft_a.sdck")?;
    let ck = Checkpoint::decode(&ck_bytes).map_err(|e| e.to_string())?;
    check(ck.encode().map_err(|e| e.to_string())? == ck_bytes, || "SDCK re-encode differs".into())?;
    let seg = sardino::experiment::load_segmenter(&ck).map_err(|e| e.to_string())?;
    let reloaded = sardino::experiment::load_segmenter(&Checkpoint::load(Path::new(&p("ft_a.sdck"))).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let x = Tensor::from_fn([1, 12, 32, 32], |i| ((i * 37) % 101) as f32 / 50.0 - 1.0);
    let forward = |s: &sardino::experiment::Segmenter| {
        let tape = Tape::inference(&s.store);
        let y = s.net.forward(&tape, tape.constant(x.clone()), sardino::nn::Mode::Eval).unwrap();
        tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    check(forward(&seg) == forward(&reloaded), || "reloaded model forward differs".into())?;

    let mut corrupt = ck_bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x01;
    let err = Checkpoint::decode(&corrupt).err().ok_or("corrupted checkpoint accepted")?;
    check(err.to_string().contains("CRC"), || format!("corruption reported as {err}"))?;
    fs::write(p("bad.sdck"), &corrupt).map_err(|e| e.to_string())?;
    let status = Command::new(env!("CARGO_BIN_EXE_sardino"))
        .args(["evaluate", "--model", &p("bad.sdck"), "--data", &p("data"), "--out", &p("x.csv")])
        .output()
        .map_err(|e| e.to_string())?
        .status;
    check(status.code() == Some(3), || format!("corrupted checkpoint exit status {status}"))?;
    Ok("pretrain/finetune CSVs and checkpoints byte-identical with --threads 1; SRT1/SDCK bit-exact; CRC rejects corruption (exit 3)".into())
}

fn c10_splits() -> Outcome {
    let tiles = synthesize_dataset(&SynthConfig { size: 4, ..SynthConfig::default() }, 1000).map_err(|e| e.to_string())?;
    let lats: Vec<f64> = tiles.iter().map(|t| t.lat).collect();
    let s = geographic_band_split(&lats, 1.0).map_err(|e| e.to_string())?;
    let (tr, va, te) = s.fractions();
    for (name, got, want) in [("train", tr, 0.6), ("val", va, 0.2), ("test", te, 0.2)] {
        check((got - want).abs() <= 0.02, || format!("{name} fraction {got:.3}"))?;
    }
    let mut order: Vec<usize> = (0..lats.len()).collect();
    order.sort_by(|&a, &b| lats[a].total_cmp(&lats[b]));
    let mut adjacent = 0;
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        if lats[a].floor() == lats[b].floor() {
            adjacent += 1;
            check(s.splits[a] == s.splits[b], || format!("tiles at {} and {} split apart", lats[a], lats[b]))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10_000 {
        let band = rng.random_range(-80..80) as f64;
        let (a, b) = (band + rng.random_range(0.0..1.0), band + rng.random_range(0.0..1.0));
        check(split_of(a, 1.0) == split_of(b, 1.0), || format!("{a} and {b} share a band but not a split"))?;
    }
    Ok(format!(
        "train/val/test {:.1}/{:.1}/{:.1}%; {adjacent} same-band neighbours and 10000 random pairs share splits",
        100.0 * tr,
        100.0 * va,
        100.0 * te
    ))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let wanted: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", c1_gradients),
        ("shape and normalization", c2_shapes),
        ("parameter counts", c3_parameters),
        ("DINO dynamics", c4_dino_dynamics),
        ("collapse reproduction", c5_collapse),
        ("MIOU oracle equivalence", c6_miou_oracle),
        ("desk-scale experiment grid", c7_grid),
        ("overfit capacity", c8_overfit),
        ("reproducibility and formats", c9_reproducibility),
        ("split discipline", c10_splits),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
