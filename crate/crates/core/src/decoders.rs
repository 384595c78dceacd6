//! Segmentation decoders and the fine-tuning loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geodata::{RasterTile, NUM_CLASSES};
use crate::metrics::{ConfusionMatrix, IoUReport};
use crate::nn::{apply_buffer_updates, BatchNorm2d, Conv2d, DoubleConv, Mode};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{Builder, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::vit::{ViT, ViTConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Encoder widths, one per resolution level.
    pub widths: Vec<usize>,
    pub bottleneck: usize,
    pub num_classes: usize,
}

impl UNetConfig {
    pub fn full(in_channels: usize) -> Self {
        Self { in_channels, widths: vec![64, 128, 256], bottleneck: 512, num_classes: NUM_CLASSES }
    }

    pub fn desk(in_channels: usize) -> Self {
        Self { in_channels, widths: vec![16, 32, 64], bottleneck: 128, num_classes: NUM_CLASSES }
    }

    /// Required divisor of the input side.
    pub fn divisor(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv: DoubleConv,
}

/// Double-conv stem, max-pool + double-conv down blocks, bilinear
/// upsampling with skip concatenation, and a 1×1 class projection.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub inc: DoubleConv,
    pub down: Vec<DoubleConv>,
    pub up: Vec<UpBlock>,
    pub head: Conv2d,
}

impl UNet {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, config: &UNetConfig) -> Result<Self> {
        if config.widths.is_empty() || config.widths.iter().chain([&config.bottleneck]).any(|&w| w == 0) {
            return Err(Error::config("U-Net widths must be non-empty and positive"));
        }
        let w = &config.widths;
        Ok(b.scope(name, |b| {
            let inc = DoubleConv::build(b, "inc", config.in_channels, w[0]);
            let mut levels: Vec<usize> = w[1..].to_vec();
            levels.push(config.bottleneck);
            let mut c_in = w[0];
            let down = levels
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let block = DoubleConv::build(b, &format!("down{}", i + 1), c_in, c);
                    c_in = c;
                    block
                })
                .collect();
            let up = (0..w.len())
                .rev()
                .enumerate()
                .map(|(i, lvl)| {
                    let skip = w[lvl];
                    let block = UpBlock { conv: DoubleConv::build(b, &format!("up{}", i + 1), c_in + skip, skip) };
                    c_in = skip;
                    block
                })
                .collect();
            let head = Conv2d::classifier(b, "outc", w[0], config.num_classes);
            UNet { config: config.clone(), inc, down, up, head }
        }))
    }

    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x);
        let &[_, c, h, w] = &shape[..] else {
            return Err(Error::config(format!("U-Net expects N×C×H×W input, got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::config(format!("U-Net built for {} channels, got {c}", self.config.in_channels)));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::config(format!("U-Net input {h}×{w} is not divisible by {d}")));
        }
        let mut skips = vec![self.inc.forward(tape, x, mode)?];
        for block in &self.down {
            let pooled = tape.max_pool2d(*skips.last().expect("stem output"))?;
            skips.push(block.forward(tape, pooled, mode)?);
        }
        let mut y = skips.pop().expect("bottleneck");
        for block in &self.up {
            let skip = skips.pop().expect("one skip per up block");
            let up = tape.upsample2x(y)?;
            y = block.conv.forward(tape, tape.concat(&[skip, up], 1)?, mode)?;
        }
        self.head.forward(tape, y)
    }
}

/// Conv3×3 → BN → ReLU → bilinear 2× per block with widths `D, D/2, D/4, …`,
/// then a 1×1 class projection.
#[derive(Clone, Debug)]
pub struct TokenDecoder {
    pub blocks: Vec<(Conv2d, BatchNorm2d)>,
    pub head: Conv2d,
}

impl TokenDecoder {
    /// One doubling block per factor of two in `patch_size`.
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, embed_dim: usize, patch_size: usize) -> Result<Self> {
        if !patch_size.is_power_of_two() || patch_size < 2 {
            return Err(Error::config(format!("token decoder needs a power-of-two patch size, got {patch_size}")));
        }
        let n = patch_size.trailing_zeros() as usize;
        if embed_dim >> (n - 1) == 0 {
            return Err(Error::config(format!("embed_dim {embed_dim} too small for {n} blocks")));
        }
        Ok(b.scope(name, |b| {
            let mut c = embed_dim;
            let blocks = (0..n)
                .map(|i| {
                    let out = embed_dim >> i;
                    let conv = Conv2d::build(b, &format!("block{}.conv", i + 1), c, out, 3, 1, 1, false);
                    let bn = BatchNorm2d::build(b, &format!("block{}.bn", i + 1), out);
                    c = out;
                    (conv, bn)
                })
                .collect();
            let head = Conv2d::classifier(b, "outc", c, NUM_CLASSES);
            TokenDecoder { blocks, head }
        }))
    }

    /// `[N, D, G, G]` token grid to `[N, 11, G·2ⁿ, G·2ⁿ]` logits.
    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, grid: Var, mode: Mode) -> Result<Var> {
        let mut y = grid;
        for (conv, bn) in &self.blocks {
            let h = conv.forward(tape, y)?;
            let h = tape.relu(bn.forward(tape, h, mode)?);
            y = tape.upsample2x(h)?;
        }
        self.head.forward(tape, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderMode {
    AttnUnet,
    TokenDecoder,
    UnetBaseline,
    UnetPlusAttention,
}

impl DecoderMode {
    pub const ALL: [DecoderMode; 4] =
        [DecoderMode::AttnUnet, DecoderMode::TokenDecoder, DecoderMode::UnetBaseline, DecoderMode::UnetPlusAttention];

    pub fn name(self) -> &'static str {
        match self {
            DecoderMode::AttnUnet => "attn_unet",
            DecoderMode::TokenDecoder => "token_decoder",
            DecoderMode::UnetBaseline => "unet_baseline",
            DecoderMode::UnetPlusAttention => "unet_plus_attention",
        }
    }

    pub fn has_backbone(self) -> bool {
        self != DecoderMode::UnetBaseline
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode '{s}' (expected attn_unet, token_decoder, unet_baseline or unet_plus_attention)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneInit {
    Scratch,
    Pretrained,
}

impl BackboneInit {
    pub fn name(self) -> &'static str {
        match self {
            BackboneInit::Scratch => "scratch",
            BackboneInit::Pretrained => "pretrained",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegLoss {
    /// Softmax cross-entropy over the classes.
    Categorical,
    /// Independent per-class sigmoid against one-hot targets.
    SigmoidBce,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub mode: DecoderMode,
    pub init: BackboneInit,
    pub freeze_backbone: bool,
    pub train_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: SegLoss,
    /// U-Net widths and bottleneck; input channels are derived from the mode.
    pub unet_widths: Vec<usize>,
    pub unet_bottleneck: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        let u = UNetConfig::desk(0);
        Self {
            mode: DecoderMode::TokenDecoder,
            init: BackboneInit::Scratch,
            freeze_backbone: false,
            train_fraction: 1.0,
            epochs: 50,
            batch_size: 2,
            optimizer: OptimizerConfig { learning_rate: 3e-3, ..OptimizerConfig::default() },
            loss: SegLoss::Categorical,
            unet_widths: u.widths,
            unet_bottleneck: u.bottleneck,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.freeze_backbone && self.init == BackboneInit::Scratch && self.mode.has_backbone() {
            return Err(Error::config("a frozen backbone must be pre-trained (frozen + scratch is meaningless)"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config(format!("train fraction {} outside (0, 1]", self.train_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

/// Backbone (when the mode has one) plus decoder.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub mode: DecoderMode,
    pub vit: Option<ViT>,
    pub unet: Option<UNet>,
    pub tokens: Option<TokenDecoder>,
    pub image_size: usize,
    pub in_channels: usize,
}

pub const DECODER_PREFIX: &str = "decoder";

/// Builds the composite for `ft.mode`. With a pre-trained backbone, every
/// `backbone.*` tensor is copied from `pretrained`, whose layout must match
/// `vit`.
pub fn assemble_model(
    ft: &FineTuneConfig,
    vit: &ViTConfig,
    pretrained: Option<(&ViTConfig, &ParamStore)>,
    seed: u64,
) -> Result<(SegNet, ParamStore)> {
    ft.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut store, &mut rng);
    let backbone = if ft.mode.has_backbone() { Some(ViT::build(&mut b, vit)?) } else { None };
    let heads = vit.num_heads;
    let unet_in = match ft.mode {
        DecoderMode::AttnUnet => Some(heads),
        DecoderMode::UnetBaseline => Some(vit.in_channels),
        DecoderMode::UnetPlusAttention => Some(vit.in_channels + heads),
        DecoderMode::TokenDecoder => None,
    };
    let unet = unet_in
        .map(|c| {
            let cfg = UNetConfig {
                in_channels: c,
                widths: ft.unet_widths.clone(),
                bottleneck: ft.unet_bottleneck,
                num_classes: NUM_CLASSES,
            };
            UNet::build(&mut b, DECODER_PREFIX, &cfg)
        })
        .transpose()?;
    let tokens = (ft.mode == DecoderMode::TokenDecoder)
        .then(|| TokenDecoder::build(&mut b, DECODER_PREFIX, vit.embed_dim, vit.patch_size))
        .transpose()?;
    if let Some(u) = &unet {
        log::info!("input channels: {}", u.config.in_channels);
    }

    if ft.mode.has_backbone() {
        if ft.init == BackboneInit::Pretrained {
            let (pcfg, pstore) = pretrained.ok_or_else(|| Error::config("pre-trained init needs a backbone checkpoint"))?;
            let diff = vit.diff(pcfg);
            if !diff.is_empty() {
                return Err(Error::config(format!("checkpoint backbone differs: {}", diff.join(", "))));
            }
            copy_prefix(&mut store, pstore, ViT::PREFIX)?;
        }
        if ft.freeze_backbone {
            store.set_trainable_prefix(&format!("{}.", ViT::PREFIX), false);
        }
    }
    let net = SegNet {
        mode: ft.mode,
        vit: backbone,
        unet,
        tokens,
        image_size: vit.image_size,
        in_channels: vit.in_channels,
    };
    Ok((net, store))
}

/// Copies every tensor named `prefix.*` from `src` into `dst` by name.
pub fn copy_prefix(dst: &mut ParamStore, src: &ParamStore, prefix: &str) -> Result<()> {
    let dotted = format!("{prefix}.");
    let targets: Vec<_> = dst.entries().filter(|(_, e)| e.name.starts_with(&dotted)).map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in targets {
        let sid = src.find(&name).ok_or_else(|| Error::config(format!("checkpoint lacks tensor {name}")))?;
        dst.replace(id, src.get(sid).clone()).map_err(|e| Error::config(format!("checkpoint tensor {name}: {e}")))?;
    }
    Ok(())
}

impl SegNet {
    /// `[N, C, S, S]` images to `[N, 11, S, S]` logits.
    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, images: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(images);
        let &[_, c, h, w] = &shape[..] else {
            return Err(Error::config(format!("expected N×C×H×W images, got {shape:?}")));
        };
        if c != self.in_channels || h != self.image_size || w != self.image_size {
            return Err(Error::config(format!(
                "model expects {}×{s}×{s} inputs, got {c}×{h}×{w}",
                self.in_channels,
                s = self.image_size
            )));
        }
        let unet = || self.unet.as_ref().expect("U-Net modes carry a U-Net");
        let vit = || self.vit.as_ref().expect("backbone modes carry a backbone");
        match self.mode {
            DecoderMode::UnetBaseline => unet().forward(tape, images, mode),
            DecoderMode::AttnUnet | DecoderMode::UnetPlusAttention => {
                let enc = vit().forward(tape, images)?;
                let maps = vit().attention_maps(tape, &enc)?;
                let maps = tape.resize_bilinear(maps, h, w)?;
                let input = if self.mode == DecoderMode::AttnUnet { maps } else { tape.concat(&[images, maps], 1)? };
                unet().forward(tape, input, mode)
            }
            DecoderMode::TokenDecoder => {
                let enc = vit().forward(tape, images)?;
                let grid = vit().token_grid(tape, &enc)?;
                self.tokens.as_ref().expect("token mode carries a decoder").forward(tape, grid, mode)
            }
        }
    }

    pub fn backbone_prefix(&self) -> Option<String> {
        self.vit.as_ref().map(|_| format!("{}.", ViT::PREFIX))
    }
}

/// Per-pixel argmax of `[N, K, H, W]` logits, lowest class index on ties.
pub fn predict_landcover(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let &[n, k, h, w] = logits.shape() else {
        return Err(Error::dim(format!("expected N×K×H×W logits, got {:?}", logits.shape())));
    };
    if k > u8::MAX as usize + 1 {
        return Err(Error::dim(format!("{k} classes do not fit a byte label")));
    }
    let plane = h * w;
    Ok(logits
        .data()
        .chunks(k * plane)
        .take(n)
        .map(|img| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if img[c * plane + p] > img[best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

/// Stacks the channels of `tiles` into one `[N, C, H, W]` batch.
pub fn batch_images(tiles: &[&RasterTile]) -> Result<Tensor> {
    let first = tiles.first().ok_or_else(|| Error::data("empty batch"))?;
    let mut shape = vec![tiles.len()];
    shape.extend_from_slice(first.channels.shape());
    let mut data = Vec::with_capacity(tiles.len() * first.channels.numel());
    for t in tiles {
        if t.channels.shape() != first.channels.shape() {
            return Err(Error::data(format!("tile shapes differ: {:?} vs {:?}", t.channels.shape(), first.channels.shape())));
        }
        data.extend_from_slice(t.channels.data());
    }
    Tensor::new(shape, data)
}

/// Class maps for a set of tiles, evaluated in inference mode.
pub fn predict_tiles(net: &SegNet, store: &ParamStore, tiles: &[&RasterTile], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size.max(1)) {
        let tape = Tape::inference(store);
        let x = tape.constant(batch_images(chunk)?);
        let logits = net.forward(&tape, x, Mode::Eval)?;
        out.extend(predict_landcover(&tape.value(logits))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub train_miou: f64,
}

/// One pass over `tiles` in seeded random order. Returns the mean loss and
/// the MIOU of the training-mode predictions made along the way.
pub fn finetune_epoch(
    net: &SegNet,
    store: &mut ParamStore,
    optimizer: &mut Optimizer,
    tiles: &[&RasterTile],
    ft: &FineTuneConfig,
    rng: &mut impl Rng,
) -> Result<EpochStats> {
    if tiles.is_empty() {
        return Err(Error::data("no training tiles"));
    }
    for (i, t) in tiles.iter().enumerate() {
        if t.labels.is_none() {
            return Err(Error::data(format!("training tile {i} has no labels")));
        }
    }
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.shuffle(rng);
    let params = store.trainable_ids();
    let mut cm = ConfusionMatrix::new();
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(ft.batch_size) {
        let batch: Vec<&RasterTile> = chunk.iter().map(|&i| tiles[i]).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|t| t.labels.as_ref().expect("checked").iter().map(|&l| l as usize)).collect();
        let (grads, updates) = {
            let tape = Tape::new(store);
            let x = tape.constant(batch_images(&batch)?);
            let logits = net.forward(&tape, x, Mode::Train)?;
            let loss = match ft.loss {
                SegLoss::Categorical => tape.cross_entropy(logits, &targets)?,
                SegLoss::SigmoidBce => tape.bce_onehot(logits, &targets)?,
            };
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite fine-tuning loss in batch {}", batches + 1)));
            }
            loss_sum += value;
            for (pred, t) in predict_landcover(&tape.value(logits))?.iter().zip(&batch) {
                cm.update(pred, t.labels.as_ref().expect("checked"))?;
            }
            let grads = tape.backward(loss)?;
            (grads, tape.take_updates())
        };
        optimizer.step(store, &grads, &params)?;
        apply_buffer_updates(store, &updates, BatchNorm2d::MOMENTUM);
        batches += 1;
    }
    Ok(EpochStats { loss: loss_sum / batches as f64, train_miou: cm.report(tiles.len())?.miou })
}

pub fn evaluate_tiles(net: &SegNet, store: &ParamStore, tiles: &[&RasterTile]) -> Result<IoUReport> {
    if tiles.is_empty() {
        return Err(Error::data("no tiles to evaluate"));
    }
    let preds = predict_tiles(net, store, tiles, 16)?;
    let mut cm = ConfusionMatrix::new();
    for (p, t) in preds.iter().zip(tiles) {
        cm.update(p, t.labels_or_err()?)?;
    }
    cm.report(tiles.len())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_miou: f64,
    pub val_miou: Option<f64>,
}

pub const FINETUNE_CSV_HEADER: &str = "epoch,loss,train_miou,val_miou";

impl FineTuneEpoch {
    pub fn csv_row(&self) -> String {
        let val = self.val_miou.map(|v| format!("{v:.6}")).unwrap_or_else(|| "nan".into());
        format!("{},{:.9},{:.6},{val}", self.epoch, self.loss, self.train_miou)
    }
}

pub struct FineTuneOutcome {
    /// Parameters of the epoch with the best validation MIOU (the last
    /// epoch when there is no validation set).
    pub best: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<FineTuneEpoch>,
}

/// Full fine-tuning run with best-validation selection.
pub fn finetune(
    net: &SegNet,
    store: &mut ParamStore,
    ft: &FineTuneConfig,
    train: &[&RasterTile],
    val: &[&RasterTile],
    seed: u64,
    mut on_epoch: impl FnMut(&FineTuneEpoch),
) -> Result<FineTuneOutcome> {
    let mut optimizer = Optimizer::new(ft.optimizer);
    let mut history = Vec::with_capacity(ft.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=ft.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let stats = finetune_epoch(net, store, &mut optimizer, train, ft, &mut rng)?;
        let val_miou = if val.is_empty() { None } else { Some(evaluate_tiles(net, store, val)?.miou) };
        let row = FineTuneEpoch { epoch, loss: stats.loss, train_miou: stats.train_miou, val_miou };
        on_epoch(&row);
        history.push(row);
        let score = val_miou.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s || val_miou.is_none()) {
            best = Some((score, epoch, store.clone()));
        }
    }
    let (_, best_epoch, best) = best.ok_or_else(|| Error::config("fine-tuning needs at least one epoch"))?;
    Ok(FineTuneOutcome { best, best_epoch, history })
}
