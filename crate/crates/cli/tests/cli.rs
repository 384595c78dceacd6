use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sardino::checkpoint::Checkpoint;
use sardino::config::ExperimentConfig;
use sardino::decoders::evaluate_tiles;
use sardino::dino::DinoState;
use sardino::experiment::{load_segmenter, pretrain_checkpoint, PreparedData};
use sardino::geodata::{load_dataset, read_tile, ChannelStats, Split};
use tempfile::TempDir;

fn sardino(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sardino")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sardino(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64, size: usize) {
    ok(&["synth", "--out", s(dir), "--n", &n.to_string(), "--seed", &seed.to_string(), "--size", &size.to_string()]);
}

fn write_config(dir: &Path, name: &str, lines: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, lines).unwrap();
    p
}

const QUICK: &str = "dino.epochs = 2\ndino.batch_size = 8\ndino.local_crops = 2\nfinetune.epochs = 2\nfinetune.batch_size = 4\n";

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 10, 1, 32);
    synth(&b, 10, 1, 32);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_eq!(dir_bytes(&a).len(), 11);

    let big = tmp.path().join("big");
    synth(&big, 2, 0, 64);
    let (entries, tiles) = load_dataset(&big).unwrap();
    assert!(entries.iter().all(|e| e.split == "unassigned"));
    for t in tiles {
        assert_eq!(t.channels.shape(), &[12, 64, 64]);
        assert_eq!(t.labels.unwrap().len(), 64 * 64);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let out = sardino(&["synth", "--out", s(tmp.path()), "--n", "0"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&sardino(&["synth"])), 2);
    assert_eq!(code(&sardino(&["no-such-command"])), 2);
}

#[test]
fn dump_defaults_lists_reference_dino_values() {
    let out = ok(&["--dump-defaults"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for line in [
        "dino.center_momentum = 0.99",
        "dino.learning_rate = 1e-6",
        "dino.student_temp = 0.03",
        "dino.teacher_temp = 0.001",
        "dino.warmup_teacher_temp = 0.01",
        "dino.warmup_teacher_epochs = 5",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line}");
    }
    assert!(text.contains("192") && text.contains("768"));
    let parsed = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(parsed, ExperimentConfig::default());
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 0, 32);
    let cfg = write_config(tmp.path(), "bad.cfg", "dino.epochs = 1\ndino.tempreature = 0.1\n");
    let out = sardino(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("m.sdck"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dino.tempreature"), "{}", stderr(&out));
}

#[test]
fn pretrain_and_finetune_metrics_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 24, 3, 32);
    let cfg = write_config(tmp.path(), "quick.cfg", QUICK);
    let run = |tag: &str| {
        let ck = tmp.path().join(format!("pre_{tag}.sdck"));
        ok(&["--threads", "1", "--config", s(&cfg), "pretrain", "--data", s(&data), "--out", s(&ck)]);
        let ft = tmp.path().join(format!("ft_{tag}.sdck"));
        ok(&[
            "--threads", "1", "--config", s(&cfg), "finetune", "--data", s(&data), "--mode", "token_decoder", "--init",
            s(&ck), "--freeze", "false", "--fraction", "0.5", "--out", s(&ft),
        ]);
        let pre_csv = fs::read_to_string(ck.with_extension("metrics.csv")).unwrap();
        let ft_csv = fs::read_to_string(ft.with_extension("metrics.csv")).unwrap();
        (pre_csv, ft_csv, fs::read(&ck).unwrap(), fs::read(&ft).unwrap())
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    let lines: Vec<&str> = a.0.lines().collect();
    assert_eq!(lines[0], "epoch,loss,teacher_entropy,tau_t,lambda");
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        let entropy: f64 = l.split(',').nth(2).unwrap().parse().unwrap();
        assert!(entropy.is_finite());
    }
    assert!(a.1.starts_with("epoch,loss,train_miou,val_miou\n"));
}

#[test]
fn collapse_exits_with_four() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 8, 0, 32);
    let cfg = write_config(tmp.path(), "c.cfg", "dino.epochs = 4\ndino.batch_size = 8\ndino.local_crops = 0\ndino.collapse_floor = 1\n");
    let ck = tmp.path().join("c.sdck");
    let out = sardino(&["--config", s(&cfg), "pretrain", "--data", s(&data), "--out", s(&ck)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("collapse"), "{}", stderr(&out));
    assert!(!ck.exists());
    let csv = fs::read_to_string(ck.with_extension("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

/// An untrained pre-training checkpoint for `preset` at 32×32.
fn fresh_checkpoint(dir: &Path, preset: &str, patch: usize) -> PathBuf {
    let text = format!("vit.preset = {preset}\nvit.image_size = 32\nvit.patch_size = {patch}\ndata.tile_size = 32\n");
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let state = DinoState::new(&cfg.vit, cfg.dino.clone(), 0).unwrap();
    let c = cfg.vit.in_channels;
    let stats = ChannelStats { mean: vec![-14.0; c], std: vec![4.0; c] };
    let path = dir.join(format!("{preset}.sdck"));
    pretrain_checkpoint(&cfg, &state, &stats).save(&path).unwrap();
    path
}

#[test]
fn finetune_flag_contracts() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 40, 5, 32);
    let cfg = write_config(tmp.path(), "one.cfg", "finetune.epochs = 1\nfinetune.batch_size = 4\n");
    let tiny = fresh_checkpoint(tmp.path(), "tiny", 16);
    let out_ck = tmp.path().join("ft.sdck");
    let base = ["--config", s(&cfg), "finetune", "--data", s(&data), "--out", s(&out_ck)];

    let out = ok(&[&base[..], &["--mode", "unet_baseline", "--init", s(&tiny)]].concat());
    assert!(stderr(&out).contains("ignoring --init"), "{}", stderr(&out));

    let out = ok(&[&base[..], &["--mode", "unet_plus_attention", "--init", s(&tiny), "--fraction", "0.1"]].concat());
    let log = stderr(&out);
    assert!(log.contains("input channels: 15"), "{log}");
    let (_, tiles) = load_dataset(&data).unwrap();
    let prepared = PreparedData::new(tiles, 1.0).unwrap();
    let n_train = prepared.split(Split::Train).len();
    let want = ((0.1 * n_train as f64).round() as usize).max(1);
    assert!(log.contains(&format!("training on {want} of {n_train} train tiles")), "{log}");

    let out = sardino(&[&base[..], &["--mode", "token_decoder", "--freeze", "true"]].concat());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("frozen"));
}

#[test]
fn evaluate_matches_library_and_rejects_corruption() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 40, 2, 32);
    let cfg = write_config(tmp.path(), "one.cfg", "finetune.epochs = 2\nfinetune.batch_size = 4\n");
    let ck = tmp.path().join("m.sdck");
    ok(&["--config", s(&cfg), "finetune", "--data", s(&data), "--mode", "unet_baseline", "--out", s(&ck)]);

    let seg = load_segmenter(&Checkpoint::load(&ck).unwrap()).unwrap();
    let (_, tiles) = load_dataset(&data).unwrap();
    let prepared = PreparedData::with_stats(tiles, 1.0, seg.stats.clone()).unwrap();
    let mut mious = Vec::new();
    for split in ["val", "test"] {
        let csv = tmp.path().join(format!("{split}.csv"));
        ok(&["evaluate", "--model", s(&ck), "--data", s(&data), "--split", split, "--out", s(&csv)]);
        let text = fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("mode,init,frozen,fraction,seed,miou"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 18);
        assert_eq!(&row[..3], &["unet_baseline", "scratch", "false"]);
        let miou: f64 = row[5].parse().unwrap();
        let want = evaluate_tiles(&seg.net, &seg.store, &prepared.split(split.parse().unwrap())).unwrap().miou;
        assert_eq!(miou, format!("{want:.6}").parse::<f64>().unwrap());
        mious.push(miou);
    }
    assert_ne!(mious[0], mious[1]);

    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = tmp.path().join("bad.sdck");
    fs::write(&bad, bytes).unwrap();
    let out = sardino(&["evaluate", "--model", s(&bad), "--data", s(&data), "--out", s(&tmp.path().join("x.csv"))]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).to_lowercase().contains("crc"), "{}", stderr(&out));
}

#[test]
fn extract_attention_writes_normalized_heads() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 0, 32);
    let tiny = fresh_checkpoint(tmp.path(), "tiny", 8);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&["extract-attention", "--model", s(&tiny), "--data", s(&data), "--out", s(&out)]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let tile = read_tile(fs::File::open(a.join("tile_00000_attn.srt1")).unwrap()).unwrap();
    assert_eq!(tile.channels.shape(), &[3, 4, 4]);
    assert!(tile.channels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let png = fs::read(a.join("tile_00000_attn.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    let small = tmp.path().join("small");
    synth(&small, 1, 0, 16);
    let out = sardino(&["extract-attention", "--model", s(&tiny), "--data", s(&small), "--out", s(&tmp.path().join("c"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn gradcheck_reports_every_op_and_names_failures() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for op in ["matmul.lhs", "conv2d", "layer_norm.input", "softmax", "composite"] {
        assert!(text.lines().any(|l| l.starts_with(op) && l.contains("max_rel_err") && l.ends_with("PASS")), "{op}\n{text}");
    }
    let out = sardino(&["gradcheck", "--tamper", "conv2d"]);
    assert_eq!(code(&out), 4);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("conv2d ") && l.ends_with("FAIL")), "{text}");
    assert!(stderr(&out).contains("conv2d"));
}

#[test]
fn grid_needs_checkpoint_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 40, 4, 32);
    let cfg = write_config(
        tmp.path(),
        "g.cfg",
        "finetune.epochs = 1\nfinetune.batch_size = 4\ngrid.modes = token_decoder\ngrid.fractions = 0.5\n",
    );
    let csv = tmp.path().join("grid.csv");
    let out = sardino(&["--config", s(&cfg), "grid", "--data", s(&data), "--out", s(&csv)]);
    assert_eq!(code(&out), 2);

    let desk = fresh_checkpoint(tmp.path(), "desk", 8);
    let run = |name: &str| {
        let csv = tmp.path().join(name);
        ok(&["--threads", "1", "--config", s(&cfg), "grid", "--data", s(&data), "--pretrained", s(&desk), "--out", s(&csv)]);
        fs::read_to_string(csv).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let rows: Vec<Vec<&str>> = a.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let drift: f64 = r.last().unwrap().parse().unwrap();
        if r[2] == "true" {
            assert_eq!(drift, 0.0);
        } else {
            assert!(drift > 0.0);
        }
    }
}
