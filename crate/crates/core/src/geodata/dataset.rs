//! Tile directories: one SRT1 file per tile plus `manifest.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{load_tile, save_tile, RasterTile};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,file,lon,lat,split";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub lon: f64,
    pub lat: f64,
    pub split: String,
}

pub fn tile_id(index: usize) -> String {
    format!("tile_{index:05}")
}

/// Writes `tiles` as `tile_NNNNN.srt1` with a manifest whose split column
/// reads `unassigned`.
pub fn write_dataset(dir: &Path, tiles: &[RasterTile]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (i, t) in tiles.iter().enumerate() {
        let id = tile_id(i);
        let file = format!("{id}.srt1");
        save_tile(&dir.join(&file), t)?;
        let _ = writeln!(manifest, "{id},{file},{},{},unassigned", t.lon, t.lat);
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::data(format!("{} does not start with '{MANIFEST_HEADER}'", dir.join(MANIFEST).display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let bad = || Error::data(format!("{MANIFEST} line {}: malformed row '{l}'", n + 2));
            let f: Vec<&str> = l.split(',').collect();
            let [id, file, lon, lat, split] = f[..] else { return Err(bad()) };
            Ok(ManifestEntry {
                id: id.into(),
                file: file.into(),
                lon: lon.parse().map_err(|_| bad())?,
                lat: lat.parse().map_err(|_| bad())?,
                split: split.into(),
            })
        })
        .collect()
}

/// Every tile listed in the manifest of `dir`, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(Vec<ManifestEntry>, Vec<RasterTile>)> {
    let entries = read_manifest(dir)?;
    if entries.is_empty() {
        return Err(Error::data(format!("{} lists no tiles", dir.join(MANIFEST).display())));
    }
    let tiles = entries
        .iter()
        .map(|e| load_tile(&dir.join(&e.file)).map_err(|err| annotate(err, &e.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok((entries, tiles))
}

fn annotate(err: Error, file: &str) -> Error {
    match err {
        Error::Format { offset, msg } => Error::Format { offset, msg: format!("{file}: {msg}") },
        Error::Data(msg) => Error::Data(format!("{file}: {msg}")),
        other => other,
    }
}
