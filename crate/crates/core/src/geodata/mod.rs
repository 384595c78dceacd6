//! Raster tiles, seasonal channel stacking, geographic splits and dataset
//! conditioning.

mod dataset;
pub(crate) mod srt1;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dataset::{load_dataset, read_manifest, tile_id, write_dataset, ManifestEntry, MANIFEST, MANIFEST_HEADER};
pub use srt1::{load_tile, read_tile, save_tile, write_tile, MAGIC, VERSION};
pub use synth::{synthesize_dataset, synthesize_tile, SynthConfig, CLASS_NAMES};

pub const NUM_CLASSES: usize = 11;
pub const SEASONS: usize = 4;

/// `C×H×W` raster with a geographic center point and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterTile {
    pub channels: Tensor,
    pub lon: f64,
    pub lat: f64,
    pub labels: Option<Vec<u8>>,
    pub channel_names: Vec<String>,
}

impl RasterTile {
    pub fn new(
        channels: Tensor,
        lon: f64,
        lat: f64,
        labels: Option<Vec<u8>>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let tile = Self { channels, lon, lat, labels, channel_names };
        tile.validate()?;
        Ok(tile)
    }

    pub fn validate(&self) -> Result<()> {
        let &[c, h, w] = self.channels.shape() else {
            return Err(Error::data(format!("tile channels must be C×H×W, got {:?}", self.channels.shape())));
        };
        if c != self.channel_names.len() {
            return Err(Error::data(format!("{c} channels but {} channel names", self.channel_names.len())));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != h * w {
                return Err(Error::data(format!("label plane has {} pixels, expected {}", labels.len(), h * w)));
            }
            if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
                return Err(Error::data(format!("label {bad} outside 0..{}", NUM_CLASSES - 1)));
            }
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.channels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[2]
    }

    pub fn labels_or_err(&self) -> Result<&[u8]> {
        self.labels.as_deref().ok_or_else(|| Error::data("tile has no label plane"))
    }
}

pub fn seasonal_channel_names() -> Vec<String> {
    (1..=SEASONS).flat_map(|s| [format!("s{s}_vv"), format!("s{s}_vh"), format!("s{s}_vv-vh")]).collect()
}

/// Season-major `(VV, VH, VV−VH)` stack of four seasonal dB plane pairs.
/// Each plane is `H×W`.
pub fn stack_seasonal_channels(vv: &[Tensor], vh: &[Tensor]) -> Result<(Tensor, Vec<String>)> {
    if vv.len() != SEASONS || vh.len() != SEASONS {
        return Err(Error::data(format!("need {SEASONS} seasonal planes per polarization, got {} and {}", vv.len(), vh.len())));
    }
    let shape = vv[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::data(format!("seasonal planes must be H×W, got {shape:?}")));
    }
    let plane = shape[0] * shape[1];
    let mut data = Vec::with_capacity(3 * SEASONS * plane);
    for (a, b) in vv.iter().zip(vh) {
        if a.shape() != &shape[..] || b.shape() != &shape[..] {
            return Err(Error::data(format!("plane sizes differ: {:?}, {:?} vs {shape:?}", a.shape(), b.shape())));
        }
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        data.extend(a.data().iter().zip(b.data()).map(|(x, y)| x - y));
    }
    Ok((Tensor::new([3 * SEASONS, shape[0], shape[1]], data)?, seasonal_channel_names()))
}

/// Inverse of [`stack_seasonal_channels`]: the VV and VH planes per season.
pub fn unstack_seasonal_channels(stack: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let &[c, h, w] = stack.shape() else {
        return Err(Error::data(format!("expected C×H×W stack, got {:?}", stack.shape())));
    };
    if c != 3 * SEASONS {
        return Err(Error::data(format!("seasonal stack needs {} channels, got {c}", 3 * SEASONS)));
    }
    let plane = h * w;
    let get = |i: usize| Tensor::new([h, w], stack.data()[i * plane..(i + 1) * plane].to_vec());
    let vv = (0..SEASONS).map(|s| get(3 * s)).collect::<Result<_>>()?;
    let vh = (0..SEASONS).map(|s| get(3 * s + 1)).collect::<Result<_>>()?;
    Ok((vv, vh))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}' (expected train, val or test)"))),
        }
    }
}

pub const DEFAULT_BAND_HEIGHT: f64 = 1.0;

/// Latitude band index `floor(lat / band_height)`.
pub fn band_of(lat: f64, band_height: f64) -> i64 {
    (lat / band_height).floor() as i64
}

/// Bands cycle train, train, train, val, test.
pub fn split_of(lat: f64, band_height: f64) -> Split {
    match band_of(lat, band_height).rem_euclid(5) {
        0..=2 => Split::Train,
        3 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub band_height: f64,
    pub splits: Vec<Split>,
}

impl SplitAssignment {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits.iter().enumerate().filter(|(_, &s)| s == split).map(|(i, _)| i).collect()
    }

    /// Realized `(train, val, test)` fractions.
    pub fn fractions(&self) -> (f64, f64, f64) {
        let n = self.splits.len() as f64;
        let count = |s| self.splits.iter().filter(|&&x| x == s).count() as f64 / n;
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }
}

pub fn geographic_band_split(lats: &[f64], band_height: f64) -> Result<SplitAssignment> {
    if lats.is_empty() {
        return Err(Error::data("cannot split an empty tile set"));
    }
    if !(band_height > 0.0 && band_height.is_finite()) {
        return Err(Error::config(format!("band height must be positive, got {band_height}")));
    }
    Ok(SplitAssignment { band_height, splits: lats.iter().map(|&l| split_of(l, band_height)).collect() })
}

/// Seeded sample of `max(1, round(f·n))` indices out of `n`. Samples for a
/// smaller fraction are prefixes of those for a larger one at the same seed.
pub fn subsample_fraction(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::data("cannot subsample an empty set"));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Population statistics over the given tiles. Channels with zero
    /// variance get a standard deviation of 1.
    pub fn fit(tiles: &[&RasterTile]) -> Result<Self> {
        if tiles.len() < 2 {
            return Err(Error::data(format!("need at least 2 tiles for channel statistics, got {}", tiles.len())));
        }
        let c = tiles[0].num_channels();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for t in tiles {
            if t.num_channels() != c {
                return Err(Error::data(format!("tiles have {} and {c} channels", t.num_channels())));
            }
            let plane = t.height() * t.width();
            for (ch, vals) in t.channels.data().chunks(plane).enumerate() {
                for &v in vals {
                    sum[ch] += v as f64;
                    sq[ch] += v as f64 * v as f64;
                }
            }
            count += plane;
        }
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let m = sum[ch] / count as f64;
            let var = (sq[ch] / count as f64 - m * m).max(0.0);
            let s = var.sqrt();
            mean.push(m as f32);
            if s < 1e-6 {
                log::warn!("channel {ch} has zero variance; using std 1");
                std.push(1.0);
            } else {
                std.push(s as f32);
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, tile: &mut RasterTile) -> Result<()> {
        let c = tile.num_channels();
        if c != self.mean.len() {
            return Err(Error::data(format!("statistics cover {} channels, tile has {c}", self.mean.len())));
        }
        let plane = tile.height() * tile.width();
        for (ch, vals) in tile.channels.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in vals {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

/// Fits statistics on the `train` tiles and standardizes every tile with
/// them.
pub fn normalize_channels(tiles: &mut [RasterTile], train: &[usize]) -> Result<ChannelStats> {
    let fit: Vec<&RasterTile> = train.iter().map(|&i| &tiles[i]).collect();
    let stats = ChannelStats::fit(&fit)?;
    for t in tiles.iter_mut() {
        stats.apply(t)?;
    }
    Ok(stats)
}
