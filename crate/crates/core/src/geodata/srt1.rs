//! `SRT1` tile files.
//!
//! ```text
//! magic        8 bytes  "SARTILE1"
//! version      u16      1
//! channels     u16
//! width        u32
//! height       u32
//! lon, lat     f64, f64
//! has_labels   u8
//! names        u16 count, then per name: u16 byte length + UTF-8
//! payload      channels·height·width f32, row-major
//! labels       height·width u8 (when has_labels = 1)
//! ```
//!
//! All multi-byte values are little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::RasterTile;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SARTILE1";
pub const VERSION: u16 = 1;

pub fn write_tile<W: Write>(mut w: W, tile: &RasterTile) -> Result<()> {
    tile.validate()?;
    let (c, h, wd) = (tile.num_channels(), tile.height(), tile.width());
    let c16 = u16::try_from(c).map_err(|_| Error::data(format!("{c} channels exceed the format limit")))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&c16.to_le_bytes())?;
    w.write_all(&(wd as u32).to_le_bytes())?;
    w.write_all(&(h as u32).to_le_bytes())?;
    w.write_all(&tile.lon.to_le_bytes())?;
    w.write_all(&tile.lat.to_le_bytes())?;
    w.write_all(&[tile.labels.is_some() as u8])?;
    w.write_all(&c16.to_le_bytes())?;
    for name in &tile.channel_names {
        let len = u16::try_from(name.len()).map_err(|_| Error::data("channel name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * tile.channels.numel());
    for v in tile.channels.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    if let Some(labels) = &tile.labels {
        w.write_all(labels)?;
    }
    Ok(())
}

/// Byte reader that reports the offset of truncation.
pub(crate) struct Cursor<R> {
    pub(crate) inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> Cursor<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut got = 0;
        while got < n {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + got as u64,
                        format!("truncated file while reading {what} ({got} of {n} bytes)"),
                    ))
                }
                Ok(k) => got += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += n as u64;
        Ok(buf)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.bytes(N, what)?.try_into().expect("exact length"))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
}

pub fn read_tile<R: Read>(r: R) -> Result<RasterTile> {
    let mut cur = Cursor::new(r);
    let magic = cur.array::<8>("magic")?;
    if &magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, not an SRT1 tile")));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: VERSION });
    }
    let c = cur.u16("channel count")? as usize;
    let w = cur.u32("width")? as usize;
    let h = cur.u32("height")? as usize;
    let lon = cur.f64("longitude")?;
    let lat = cur.f64("latitude")?;
    let flag_at = cur.offset;
    let has_labels = match cur.u8("label flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::format(flag_at, format!("label flag must be 0 or 1, got {other}"))),
    };
    let names_at = cur.offset;
    let n_names = cur.u16("name count")? as usize;
    if n_names != c {
        return Err(Error::format(names_at, format!("{n_names} channel names for {c} channels")));
    }
    if c == 0 || w == 0 || h == 0 {
        return Err(Error::format(8 + 2, format!("empty raster {c}×{h}×{w}")));
    }
    let mut names = Vec::with_capacity(c);
    for i in 0..c {
        let len = cur.u16("name length")? as usize;
        let at = cur.offset;
        let raw = cur.bytes(len, "channel name")?;
        names.push(String::from_utf8(raw).map_err(|_| Error::format(at, format!("channel name {i} is not UTF-8")))?);
    }
    let n = c * h * w;
    let raw = cur.bytes(4 * n, "channel payload")?;
    let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    let labels = if has_labels {
        let at = cur.offset;
        let labels = cur.bytes(h * w, "label payload")?;
        if let Some(pos) = labels.iter().position(|&l| l as usize >= super::NUM_CLASSES) {
            return Err(Error::format(at + pos as u64, format!("label {} out of range", labels[pos])));
        }
        Some(labels)
    } else {
        None
    };
    let mut probe = [0u8; 1];
    if cur.inner.read(&mut probe)? != 0 {
        return Err(Error::format(cur.offset, "trailing bytes after tile payload"));
    }
    RasterTile::new(Tensor::new([c, h, w], data)?, lon, lat, labels, names)
}

pub fn save_tile(path: &Path, tile: &RasterTile) -> Result<()> {
    let mut buf = Vec::new();
    write_tile(&mut buf, tile)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tile(path: &Path) -> Result<RasterTile> {
    let bytes = fs::read(path)?;
    read_tile(&bytes[..])
}
