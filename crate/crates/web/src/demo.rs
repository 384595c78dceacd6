use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sardino::dino::{
    collapse_entropy, step_rng, teacher_probs, teacher_temperature, DinoConfig, DinoState,
    TemperatureSchedule,
};
use sardino::geodata::{normalize_channels, synthesize_dataset, synthesize_tile, RasterTile, SynthConfig, NUM_CLASSES};
use sardino::vit::{Preset, ViTConfig};
use sardino::{Error, Result, Tensor};

/// ESA WorldCover legend colours.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 100, 0],
    [255, 187, 34],
    [255, 255, 76],
    [240, 150, 255],
    [250, 0, 0],
    [180, 180, 180],
    [240, 240, 240],
    [0, 100, 200],
    [0, 150, 160],
    [0, 207, 117],
    [250, 230, 160],
];

/// Min-max stretched grayscale as RGBA.
pub fn gray_rgba(plane: &[f32]) -> Vec<u8> {
    let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    plane
        .iter()
        .flat_map(|&v| {
            let g = ((v - lo) / span * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

pub fn labels_rgba(labels: &[u8]) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| {
            let [r, g, b] = PALETTE[l as usize % NUM_CLASSES];
            [r, g, b, 255]
        })
        .collect()
}

/// Nearest-neighbour enlargement of a square RGBA image.
pub fn enlarge(rgba: &[u8], size: usize, factor: usize) -> Vec<u8> {
    let out = size * factor;
    let mut px = Vec::with_capacity(out * out * 4);
    for y in 0..out {
        for x in 0..out {
            let i = ((y / factor) * size + x / factor) * 4;
            px.extend_from_slice(&rgba[i..i + 4]);
        }
    }
    px
}

pub struct TilePreview {
    pub size: usize,
    pub sar: Vec<u8>,
    pub labels: Vec<u8>,
    pub class_counts: Vec<u32>,
}

/// One synthetic tile: `channel` as grayscale and the label map in colour.
pub fn preview_tile(seed: u64, index: usize, size: usize, channel: usize) -> Result<TilePreview> {
    let cfg = SynthConfig { seed, size, ..SynthConfig::default() };
    let tile = synthesize_tile(&cfg, index, index + 1)?;
    if channel >= tile.num_channels() {
        return Err(Error::Config(format!("channel {channel} outside 0..{}", tile.num_channels())));
    }
    let plane = &tile.channels.data()[channel * size * size..(channel + 1) * size * size];
    let labels = tile.labels_or_err()?;
    let mut class_counts = vec![0u32; NUM_CLASSES];
    for &l in labels {
        class_counts[l as usize] += 1;
    }
    Ok(TilePreview { size, sar: gray_rgba(plane), labels: labels_rgba(labels), class_counts })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStats {
    pub epoch: f64,
    pub loss: f64,
    pub teacher_entropy: f64,
    pub teacher_temp: f64,
}

/// Desk-sized DINO pre-training on a small synthetic set, stepped from the page.
pub struct Trainer {
    state: DinoState,
    tiles: Vec<RasterTile>,
    images: Vec<Tensor>,
    seed: u64,
}

pub const DEMO_TILES: usize = 32;

impl Trainer {
    pub fn new(seed: u64, centering: bool, learning_rate: f64) -> Result<Self> {
        let vit = ViTConfig::preset(Preset::Desk);
        let mut cfg = DinoConfig::for_backbone(&vit);
        cfg.centering = centering;
        cfg.batch_size = 4;
        cfg.optimizer.learning_rate = learning_rate;
        let mut tiles = synthesize_dataset(&SynthConfig { seed, ..SynthConfig::default() }, DEMO_TILES)?;
        let all: Vec<usize> = (0..tiles.len()).collect();
        normalize_channels(&mut tiles, &all)?;
        let images = tiles.iter().map(|t| t.channels.clone()).collect();
        Ok(Self { state: DinoState::new(&vit, cfg, seed)?, tiles, images, seed })
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    /// `n` optimizer steps over sequential batches of four tiles.
    pub fn train(&mut self, n: usize) -> Result<TrainStats> {
        let bs = self.state.config.batch_size;
        let per_epoch = self.images.len().div_ceil(bs);
        let mut last = None;
        for _ in 0..n {
            let i = self.state.step as usize % per_epoch;
            self.state.epoch = self.state.step as f64 / per_epoch as f64;
            let batch: Vec<&Tensor> = (0..bs).map(|j| &self.images[(i * bs + j) % self.images.len()]).collect();
            let mut rng = step_rng(self.seed, self.state.step);
            let r = self.state.step(&batch, &mut rng)?;
            last = Some(TrainStats {
                epoch: self.state.epoch,
                loss: r.loss,
                teacher_entropy: r.teacher_entropy,
                teacher_temp: r.teacher_temp,
            });
        }
        last.ok_or_else(|| Error::Config("train at least one step".into()))
    }

    pub fn num_heads(&self) -> usize {
        self.state.net.vit.config.num_heads
    }

    /// Input band then each teacher attention head of tile `index`, as one
    /// RGBA strip of square panels `scale` times the tile size.
    pub fn attention_strip(&self, index: usize, scale: usize) -> Result<(usize, usize, Vec<u8>)> {
        let tile = self
            .tiles
            .get(index)
            .ok_or_else(|| Error::Config(format!("tile {index} outside 0..{}", self.tiles.len())))?;
        let s = tile.height();
        let image = tile.channels.clone().reshape([1, tile.num_channels(), s, s])?;
        let out = self.state.net.vit.infer(&self.state.teacher, &image)?;
        let g = out.attention_maps.shape()[2];
        let mut panels = vec![gray_rgba(&tile.channels.data()[..s * s])];
        for head in out.attention_maps.data().chunks(g * g) {
            let up: Vec<f32> = (0..s * s).map(|p| head[(p / s * g / s) * g + (p % s) * g / s]).collect();
            panels.push(gray_rgba(&up));
        }
        panels.push(labels_rgba(tile.labels_or_err()?));
        let panel = s * scale;
        let width = panel * panels.len();
        let mut strip = vec![0u8; width * panel * 4];
        for (k, p) in panels.iter().enumerate() {
            let big = enlarge(p, s, scale);
            for y in 0..panel {
                let dst = (y * width + k * panel) * 4;
                strip[dst..dst + panel * 4].copy_from_slice(&big[y * panel * 4..(y + 1) * panel * 4]);
            }
        }
        Ok((width, panel, strip))
    }

    /// Entropy of the teacher's mean distribution over every demo tile.
    pub fn teacher_entropy(&self) -> Result<f64> {
        let refs: Vec<&Tensor> = self.images.iter().collect();
        let x = sardino::dino::stack_images(&refs)?;
        let tape = sardino::autograd::Tape::inference(&self.state.teacher);
        let logits = tape.value(self.state.net.forward(&tape, tape.constant(x))?).as_ref().clone();
        let tau = teacher_temperature(self.state.epoch, &self.state.config.teacher_temp);
        collapse_entropy(&teacher_probs(&logits, &self.state.center, tau)?)
    }

    pub fn out_dim(&self) -> usize {
        self.state.config.head.out_dim
    }
}

pub struct Exploration {
    pub probs: Vec<f32>,
    pub entropy: f64,
}

/// Teacher distribution of one logit vector after centering and sharpening.
pub fn explore(logits: &[f32], center: &[f32], tau: f64) -> Result<Exploration> {
    if logits.is_empty() || logits.len() != center.len() {
        return Err(Error::Config(format!("{} logits against {} center entries", logits.len(), center.len())));
    }
    let p = teacher_probs(&Tensor::new([1, logits.len()], logits.to_vec())?, center, tau)?;
    let entropy = collapse_entropy(&p)?;
    Ok(Exploration { probs: p.data().to_vec(), entropy })
}

/// Default teacher temperature at a fractional epoch.
pub fn schedule(epoch: f64) -> f64 {
    teacher_temperature(epoch, &TemperatureSchedule::default())
}

/// Seeded logits for the explorer.
pub fn random_logits(k: usize, seed: u64) -> Vec<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}
