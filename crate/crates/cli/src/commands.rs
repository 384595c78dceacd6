use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use sardino::checkpoint::Checkpoint;
use sardino::config::ExperimentConfig;
use sardino::decoders::{assemble_model, evaluate_tiles, finetune, BackboneInit, FINETUNE_CSV_HEADER};
use sardino::dino::{epochs_csv, pretrain, DinoState};
use sardino::experiment::{
    grid_csv, load_backbone, load_segmenter, pretrain_checkpoint, run_grid, segmenter_checkpoint, CollapseMonitor,
    PreparedData,
};
use sardino::export::{attention_tile, contact_sheet, write_png_gray};
use sardino::geodata::{load_dataset, synthesize_dataset, write_dataset, write_tile, Split};
use sardino::metrics::{results_csv_header, ResultRow};
use sardino::verify::run_suite;
use sardino::{Error, Result, Tensor};

use crate::{AttentionArgs, Command, EvaluateArgs, FinetuneArgs, GradcheckArgs, GridArgs, PretrainArgs, SynthArgs};

pub fn run(command: Command, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    match command {
        Command::Synth(a) => synth(cfg, a),
        Command::Pretrain(a) => pretrain_cmd(cfg, a),
        Command::Finetune(a) => finetune_cmd(cfg, a),
        Command::Evaluate(a) => evaluate(a),
        Command::ExtractAttention(a) => extract_attention(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Grid(a) => grid(cfg, a),
    }
}

fn metrics_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.with_extension("metrics.csv"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn synth(cfg: ExperimentConfig, a: SynthArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(cfg.seed);
    let size = a.size.map_or(cfg.data.tile_size, |s| s as usize);
    let tiles = synthesize_dataset(&cfg.data.synth(seed, size), a.n as usize)?;
    write_dataset(&a.out, &tiles)?;
    info!("wrote {} tiles of {size}×{size} to {}", tiles.len(), a.out.display());
    Ok(())
}

fn pretrain_cmd(cfg: ExperimentConfig, a: PretrainArgs) -> Result<()> {
    let (_, tiles) = load_dataset(&a.data)?;
    let data = PreparedData::new(tiles, cfg.data.band_height)?;
    let images: Vec<Tensor> = data.tiles.iter().map(|t| t.channels.clone()).collect();
    info!(
        "pre-training {} backbone on {} tiles for {} epochs",
        cfg.preset.name(),
        images.len(),
        cfg.dino.epochs
    );
    let mut state = DinoState::new(&cfg.vit, cfg.dino.clone(), cfg.seed)?;
    let mut monitor = CollapseMonitor::new(cfg.collapse_floor, cfg.dino.head.out_dim);
    let mut rows = Vec::new();
    let result = pretrain(&mut state, &images, cfg.dino.epochs, cfg.seed, |m| {
        rows.push(*m);
        monitor.observe(m.epoch, m.teacher_entropy)
    });
    let metrics = metrics_path(&a.out, a.metrics);
    write_text(&metrics, &epochs_csv(&rows))?;
    result?;
    pretrain_checkpoint(&cfg, &state, &data.stats).save(&a.out)?;
    info!("checkpoint {} metrics {}", a.out.display(), metrics.display());
    Ok(())
}

fn finetune_cmd(mut cfg: ExperimentConfig, a: FinetuneArgs) -> Result<()> {
    cfg.finetune.mode = a.mode;
    cfg.finetune.freeze_backbone = a.freeze;
    if let Some(f) = a.fraction {
        cfg.finetune.train_fraction = f;
    }
    let mut backbone = None;
    if a.init == "scratch" {
        cfg.finetune.init = BackboneInit::Scratch;
    } else if !a.mode.has_backbone() {
        warn!("{} has no backbone; ignoring --init {}", a.mode, a.init);
        cfg.finetune.init = BackboneInit::Scratch;
    } else {
        let b = load_backbone(&Checkpoint::load(Path::new(&a.init))?)?;
        cfg.vit = b.config.vit.clone();
        cfg.preset = b.config.preset;
        cfg.finetune.init = BackboneInit::Pretrained;
        backbone = Some(b);
    }
    cfg.finetune.validate()?;
    let (_, tiles) = load_dataset(&a.data)?;
    let data = match &backbone {
        Some(b) => PreparedData::with_stats(tiles, cfg.data.band_height, b.stats.clone())?,
        None => PreparedData::new(tiles, cfg.data.band_height)?,
    };
    let train = data.train_subset(cfg.finetune.train_fraction, cfg.seed)?;
    let val = data.split(Split::Val);
    info!(
        "fraction {}: training on {} of {} train tiles, validating on {}",
        cfg.finetune.train_fraction,
        train.len(),
        data.split(Split::Train).len(),
        val.len()
    );
    let pretrained = backbone.as_ref().map(|b| (&b.config.vit, &b.store));
    let (net, mut store) = assemble_model(&cfg.finetune, &cfg.vit, pretrained, cfg.seed)?;
    let mut csv = format!("{FINETUNE_CSV_HEADER}\n");
    let outcome = finetune(&net, &mut store, &cfg.finetune, &train, &val, cfg.seed, |e| {
        info!("epoch {}: loss {:.5} train miou {:.4} val miou {:?}", e.epoch, e.loss, e.train_miou, e.val_miou);
        csv.push_str(&e.csv_row());
        csv.push('\n');
    });
    let metrics = metrics_path(&a.out, a.metrics);
    write_text(&metrics, &csv)?;
    let outcome = outcome?;
    segmenter_checkpoint(&cfg, &outcome.best, &data.stats).save(&a.out)?;
    info!("best epoch {} saved to {}", outcome.best_epoch, a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let seg = load_segmenter(&Checkpoint::load(&a.model)?)?;
    let (_, tiles) = load_dataset(&a.data)?;
    let data = PreparedData::with_stats(tiles, seg.config.data.band_height, seg.stats.clone())?;
    let tiles = data.split(a.split);
    if tiles.is_empty() {
        return Err(Error::Data(format!("split {} is empty", a.split.name())));
    }
    let report = evaluate_tiles(&seg.net, &seg.store, &tiles)?;
    let ft = &seg.config.finetune;
    let row = ResultRow {
        mode: ft.mode.name().into(),
        init: ft.init.name().into(),
        frozen: ft.freeze_backbone,
        fraction: ft.train_fraction,
        seed: seg.config.seed,
        report,
    };
    write_text(&a.out, &format!("{}\n{}\n", results_csv_header(), row.to_csv()))?;
    println!("miou {:.6} ({} tiles, split {})", row.report.miou, tiles.len(), a.split.name());
    Ok(())
}

fn extract_attention(a: AttentionArgs) -> Result<()> {
    let b = load_backbone(&Checkpoint::load(&a.model)?)?;
    let (entries, mut tiles) = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let size = b.config.vit.image_size;
    if let Some(t) = tiles.iter().find(|t| t.height() != size || t.width() != size) {
        return Err(Error::Config(format!(
            "tiles are {}×{} but the checkpoint expects {size}×{size}",
            t.height(),
            t.width()
        )));
    }
    for (entry, tile) in entries.iter().zip(&mut tiles) {
        let raw = tile.clone();
        b.stats.apply(tile)?;
        let c = tile.num_channels();
        let image = tile.channels.clone().reshape([1, c, tile.height(), tile.width()])?;
        let maps = b.vit.infer(&b.store, &image)?.attention_maps;
        let shape = maps.shape()[1..].to_vec();
        let maps = maps.reshape(shape)?;
        let attn = attention_tile(&raw, maps.clone())?;
        let mut f = fs::File::create(a.out.join(format!("{}_attn.srt1", entry.id)))?;
        write_tile(&mut f, &attn)?;
        let (w, h, px) = contact_sheet(&raw, &maps)?;
        write_png_gray(&a.out.join(format!("{}_attn.png", entry.id)), w, h, &px)?;
    }
    info!("{} heads for {} tiles written to {}", b.config.vit.num_heads, tiles.len(), a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let report = run_suite(a.tamper.as_deref())?;
    print!("{}", report.to_text());
    let failed: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn grid(mut cfg: ExperimentConfig, a: GridArgs) -> Result<()> {
    let path = a
        .pretrained
        .ok_or_else(|| Error::Config("the grid needs --pretrained for its pre-training rows".into()))?;
    let b = load_backbone(&Checkpoint::load(&path)?)?;
    cfg.vit = b.config.vit.clone();
    cfg.preset = b.config.preset;
    let (_, tiles) = load_dataset(&a.data)?;
    let data = PreparedData::with_stats(tiles, cfg.data.band_height, b.stats.clone())?;
    let cells = run_grid(&cfg, &data, Some((&b.config.vit, &b.store)), |_| {})?;
    write_text(&a.out, &grid_csv(&cells))?;
    info!("{} cells written to {}", cells.len(), a.out.display());
    Ok(())
}
