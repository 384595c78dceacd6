//! Procedural SAR-like tiles with land-cover labels.
//!
//! Labels come from the argmax over smoothed random fields, one per class,
//! which produces blob-shaped regions. Each pixel's seasonal VV/VH value is
//! its class signature plus a seasonal offset plus multiplicative gamma
//! speckle expressed in dB.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{stack_seasonal_channels, RasterTile, NUM_CLASSES, SEASONS};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "tree cover",
    "shrubland",
    "grassland",
    "cropland",
    "built-up",
    "bare",
    "snow and ice",
    "water",
    "herbaceous wetland",
    "mangroves",
    "moss and lichen",
];

/// Base (VV, VH) back-scatter in dB and seasonal swing per class.
const SIGNATURES: [(f32, f32, f32); NUM_CLASSES] = [
    (-7.5, -13.0, 0.5),
    (-9.5, -16.0, 0.8),
    (-11.0, -18.5, 1.5),
    (-10.0, -16.5, 3.0),
    (-3.0, -10.0, 0.3),
    (-15.0, -24.0, 0.5),
    (-13.0, -21.0, 2.5),
    (-21.0, -28.0, 1.0),
    (-12.5, -20.0, 2.0),
    (-6.5, -12.0, 0.6),
    (-14.0, -22.5, 1.2),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    /// Number of classes in use, `1..=11`.
    pub classes: usize,
    /// Blob scale in pixels.
    pub smoothness: f64,
    /// `[class][season] -> (vv, vh)` in dB.
    pub class_means: Vec<[(f32, f32); SEASONS]>,
    pub season_offsets: [f32; SEASONS],
    /// Speckle looks; `None` disables speckle.
    pub looks: Option<f64>,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        let class_means = SIGNATURES
            .iter()
            .enumerate()
            .map(|(c, &(vv, vh, swing))| {
                let phase = c as f32 * 0.9;
                std::array::from_fn(|s| {
                    let d = swing * (std::f32::consts::FRAC_PI_2 * s as f32 + phase).cos();
                    (vv + d, vh + 1.2 * d)
                })
            })
            .collect();
        Self {
            seed: 0,
            size: 32,
            classes: NUM_CLASSES,
            smoothness: 16.0,
            class_means,
            season_offsets: [0.0, 0.6, 1.0, 0.3],
            looks: Some(5.0),
            lat_range: (35.0, 70.0),
            lon_range: (-10.0, 30.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::config("tile size must be positive"));
        }
        if self.classes == 0 || self.classes > NUM_CLASSES {
            return Err(Error::config(format!("class count {} outside 1..={NUM_CLASSES}", self.classes)));
        }
        if self.class_means.len() != NUM_CLASSES {
            return Err(Error::config(format!("need {NUM_CLASSES} class signatures")));
        }
        if !(self.smoothness >= 1.0) {
            return Err(Error::config(format!("smoothness {} must be at least 1 pixel", self.smoothness)));
        }
        if let Some(l) = self.looks {
            if !(l >= 1.0) {
                return Err(Error::config(format!("speckle looks {l} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Label plane from the argmax over smooth random class fields.
fn label_plane<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> Vec<u8> {
    let n = cfg.size;
    if cfg.classes == 1 {
        return vec![0; n * n];
    }
    let coarse = ((n as f64 / cfg.smoothness).ceil() as usize + 1).max(2);
    let fields: Vec<f32> = (0..cfg.classes * coarse * coarse).map(|_| rng.random::<f32>()).collect();
    let smooth = kernels::resize_bilinear(&fields, cfg.classes, (coarse, coarse), (n, n));
    (0..n * n)
        .map(|p| {
            let mut best = 0;
            for c in 1..cfg.classes {
                if smooth[c * n * n + p] > smooth[best * n * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Tile `index` of a dataset of `n`. Latitudes are stratified across the
/// configured range so that every band is populated evenly.
pub fn synthesize_tile(cfg: &SynthConfig, index: usize, n: usize) -> Result<RasterTile> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (lat0, lat1) = cfg.lat_range;
    let lat = lat0 + (lat1 - lat0) * (index as f64 + rng.random::<f64>()) / n.max(1) as f64;
    let lon = rng.random_range(cfg.lon_range.0..=cfg.lon_range.1);
    let labels = label_plane(&mut rng, cfg);
    let speckle = cfg.looks.map(|l| Gamma::new(l, 1.0 / l).expect("looks validated"));
    let size = cfg.size;
    let mut plane = |s: usize, pol: usize| -> Result<Tensor> {
        let data = labels
            .iter()
            .map(|&c| {
                let (vv, vh) = cfg.class_means[c as usize][s];
                let base = if pol == 0 { vv } else { vh } + cfg.season_offsets[s];
                match &speckle {
                    Some(g) => base + 10.0 * (g.sample(&mut rng) as f32).log10(),
                    None => base,
                }
            })
            .collect();
        Tensor::new([size, size], data)
    };
    let mut vv = Vec::with_capacity(SEASONS);
    let mut vh = Vec::with_capacity(SEASONS);
    for s in 0..SEASONS {
        vv.push(plane(s, 0)?);
        vh.push(plane(s, 1)?);
    }
    let (channels, names) = stack_seasonal_channels(&vv, &vh)?;
    RasterTile::new(channels, lon, lat, Some(labels), names)
}

/// `n` labeled tiles; each depends only on `(seed, index, n)`.
pub fn synthesize_dataset(cfg: &SynthConfig, n: usize) -> Result<Vec<RasterTile>> {
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    cfg.validate()?;
    kernels::map_indexed(n, |i| synthesize_tile(cfg, i, n)).into_iter().collect()
}
