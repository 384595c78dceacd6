//! Dataset preparation, model bundles and the fine-tuning grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::decoders::{assemble_model, evaluate_tiles, finetune, BackboneInit, DecoderMode, SegNet};
use crate::dino::DinoState;
use crate::error::{Error, Result};
use crate::geodata::{geographic_band_split, normalize_channels, subsample_fraction, ChannelStats, RasterTile, Split, SplitAssignment};
use crate::metrics::{results_csv_header, ResultRow};
use crate::params::{Builder, ParamStore};
use crate::tensor::Tensor;
use crate::vit::{ViT, ViTConfig};

pub const NORM_MEAN: &str = "data.norm.mean";
pub const NORM_STD: &str = "data.norm.std";

/// Tiles split by latitude band and standardized with train statistics.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub tiles: Vec<RasterTile>,
    pub splits: SplitAssignment,
    pub stats: ChannelStats,
}

impl PreparedData {
    pub fn new(mut tiles: Vec<RasterTile>, band_height: f64) -> Result<Self> {
        let lats: Vec<f64> = tiles.iter().map(|t| t.lat).collect();
        let splits = geographic_band_split(&lats, band_height)?;
        let train = splits.indices(Split::Train);
        if train.len() < 2 {
            return Err(Error::data(format!("{} training tiles; normalization needs at least 2", train.len())));
        }
        let stats = normalize_channels(&mut tiles, &train)?;
        Ok(Self { tiles, splits, stats })
    }

    /// Applies previously fitted statistics instead of fitting new ones.
    pub fn with_stats(mut tiles: Vec<RasterTile>, band_height: f64, stats: ChannelStats) -> Result<Self> {
        let lats: Vec<f64> = tiles.iter().map(|t| t.lat).collect();
        let splits = geographic_band_split(&lats, band_height)?;
        for t in &mut tiles {
            stats.apply(t)?;
        }
        Ok(Self { tiles, splits, stats })
    }

    pub fn split(&self, s: Split) -> Vec<&RasterTile> {
        self.splits.indices(s).into_iter().map(|i| &self.tiles[i]).collect()
    }

    /// Seeded nested subset of the training split.
    pub fn train_subset(&self, fraction: f64, seed: u64) -> Result<Vec<&RasterTile>> {
        let train = self.split(Split::Train);
        if train.is_empty() {
            return Err(Error::data("training split is empty"));
        }
        Ok(subsample_fraction(train.len(), fraction, seed)?.into_iter().map(|i| train[i]).collect())
    }
}

fn stats_tensors(ck: &mut Checkpoint, stats: &ChannelStats) {
    ck.push(NORM_MEAN, Tensor::from_fn([stats.mean.len()], |i| stats.mean[i]));
    ck.push(NORM_STD, Tensor::from_fn([stats.std.len()], |i| stats.std[i]));
}

fn stats_from(ck: &Checkpoint) -> Result<ChannelStats> {
    match (ck.get(NORM_MEAN), ck.get(NORM_STD)) {
        (Some(m), Some(s)) if m.numel() == s.numel() => Ok(ChannelStats { mean: m.data().to_vec(), std: s.data().to_vec() }),
        _ => Err(Error::config(format!("checkpoint lacks {NORM_MEAN}/{NORM_STD}"))),
    }
}

/// Student network (backbone and head) after pre-training.
pub fn pretrain_checkpoint(cfg: &ExperimentConfig, state: &DinoState, stats: &ChannelStats) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.to_text()).with_store(&state.student);
    stats_tensors(&mut ck, stats);
    ck
}

/// Fine-tuned segmentation model; `cfg.finetune.mode` must describe `store`.
pub fn segmenter_checkpoint(cfg: &ExperimentConfig, store: &ParamStore, stats: &ChannelStats) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.to_text()).with_store(store);
    stats_tensors(&mut ck, stats);
    ck
}

pub struct Backbone {
    pub config: ExperimentConfig,
    pub vit: ViT,
    pub store: ParamStore,
    pub stats: ChannelStats,
}

/// The ViT held by a pre-training or fine-tuning checkpoint.
pub fn load_backbone(ck: &Checkpoint) -> Result<Backbone> {
    let config = ExperimentConfig::parse(&ck.config)?;
    if !ck.has_prefix(ViT::PREFIX) {
        return Err(Error::config("checkpoint has no ViT backbone"));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vit = ViT::build(&mut Builder::new(&mut store, &mut rng), &config.vit)?;
    ck.restore_into(&mut store)?;
    Ok(Backbone { stats: stats_from(ck)?, config, vit, store })
}

pub struct Segmenter {
    pub config: ExperimentConfig,
    pub net: SegNet,
    pub store: ParamStore,
    pub stats: ChannelStats,
}

pub fn load_segmenter(ck: &Checkpoint) -> Result<Segmenter> {
    let config = ExperimentConfig::parse(&ck.config)?;
    if !ck.has_prefix(crate::decoders::DECODER_PREFIX) {
        return Err(Error::config("checkpoint holds no fine-tuned decoder"));
    }
    let mut ft = config.finetune.clone();
    ft.init = BackboneInit::Scratch;
    ft.freeze_backbone = false;
    let (net, mut store) = assemble_model(&ft, &config.vit, None, config.seed)?;
    ck.restore_into(&mut store)?;
    Ok(Segmenter { stats: stats_from(ck)?, config, net, store })
}

/// Largest absolute change of any tensor under `prefix`.
pub fn weight_drift(before: &ParamStore, after: &ParamStore, prefix: &str) -> Result<f64> {
    let mut drift = 0.0f64;
    for (_, e) in before.entries().filter(|(_, e)| e.name.starts_with(prefix)) {
        let id = after.find(&e.name).ok_or_else(|| Error::State(format!("tensor {} missing after training", e.name)))?;
        for (a, b) in e.value.data().iter().zip(after.get(id).data()) {
            drift = drift.max((a - b).abs() as f64);
        }
    }
    Ok(drift)
}

/// Tracks consecutive low-entropy epochs during pre-training.
#[derive(Clone, Debug)]
pub struct CollapseMonitor {
    /// Absolute entropy floor in nats.
    pub floor: f64,
    pub patience: usize,
    run: usize,
}

impl CollapseMonitor {
    pub fn new(fraction_of_ln_k: f64, out_dim: usize) -> Self {
        Self { floor: fraction_of_ln_k * (out_dim as f64).ln(), patience: 3, run: 0 }
    }

    pub fn observe(&mut self, epoch: usize, entropy: f64) -> Result<()> {
        if !entropy.is_finite() {
            return Err(Error::Numeric(format!("teacher entropy is {entropy} at epoch {epoch}")));
        }
        self.run = if entropy < self.floor { self.run + 1 } else { 0 };
        if self.run >= self.patience {
            return Err(Error::Numeric(format!(
                "collapse detected: teacher entropy {entropy:.4} below floor {:.4} for {} consecutive epochs (epoch {epoch})",
                self.floor, self.run
            )));
        }
        Ok(())
    }
}

/// The three init/freeze rows of each grid table.
pub const GRID_ROWS: [(BackboneInit, bool); 3] =
    [(BackboneInit::Scratch, false), (BackboneInit::Pretrained, true), (BackboneInit::Pretrained, false)];

#[derive(Clone, Debug)]
pub struct GridCell {
    pub row: ResultRow,
    pub epochs: usize,
    pub train_tiles: usize,
    pub backbone_drift: f64,
}

pub fn grid_csv_header() -> String {
    format!("{},epochs,train_tiles,backbone_drift", results_csv_header())
}

impl GridCell {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{:e}", self.row.to_csv(), self.epochs, self.train_tiles, self.backbone_drift)
    }
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut s = grid_csv_header();
    s.push('\n');
    for c in cells {
        s.push_str(&c.to_csv());
        s.push('\n');
    }
    s
}

/// Runs every (mode, init/freeze row, fraction) cell of `cfg.grid`. Each
/// cell is evaluated on the test split with its best-validation weights.
pub fn run_grid(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    pretrained: Option<(&ViTConfig, &ParamStore)>,
    mut on_cell: impl FnMut(&GridCell),
) -> Result<Vec<GridCell>> {
    let pretrained = pretrained.ok_or_else(|| Error::config("the grid needs a pre-trained checkpoint for its pre-training rows"))?;
    if let Some(m) = cfg.grid.modes.iter().find(|m| !m.has_backbone()) {
        return Err(Error::config(format!("grid mode {m} has no backbone to pre-train")));
    }
    let val = data.split(Split::Val);
    let test = data.split(Split::Test);
    if test.is_empty() {
        return Err(Error::data("test split is empty"));
    }
    let mut cells = Vec::new();
    for &mode in &cfg.grid.modes {
        for (init, frozen) in GRID_ROWS {
            for &fraction in &cfg.grid.fractions {
                let cell = run_cell(cfg, data, pretrained, &val, &test, mode, init, frozen, fraction)?;
                log::info!(
                    "{mode} {} frozen={frozen} fraction={fraction}: miou {:.4}",
                    init.name(),
                    cell.row.report.miou
                );
                on_cell(&cell);
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    pretrained: (&ViTConfig, &ParamStore),
    val: &[&RasterTile],
    test: &[&RasterTile],
    mode: DecoderMode,
    init: BackboneInit,
    frozen: bool,
    fraction: f64,
) -> Result<GridCell> {
    let mut ft = cfg.finetune.clone();
    ft.mode = mode;
    ft.init = init;
    ft.freeze_backbone = frozen;
    ft.train_fraction = fraction;
    let train = data.train_subset(fraction, cfg.seed)?;
    let (net, mut store) = assemble_model(&ft, &cfg.vit, Some(pretrained), cfg.seed)?;
    let initial = store.clone();
    let outcome = finetune(&net, &mut store, &ft, &train, val, cfg.seed, |_| {})?;
    let report = evaluate_tiles(&net, &outcome.best, test)?;
    let backbone_drift = weight_drift(&initial, &outcome.best, &format!("{}.", ViT::PREFIX))?;
    Ok(GridCell {
        row: ResultRow {
            mode: mode.name().into(),
            init: init.name().into(),
            frozen,
            fraction,
            seed: cfg.seed,
            report,
        },
        epochs: ft.epochs,
        train_tiles: train.len(),
        backbone_drift,
    })
}
