//! Attention rasters and 8-bit grayscale contact sheets.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geodata::RasterTile;
use crate::tensor::Tensor;

/// `[H, G, G]` attention maps as an unlabeled tile at the source location.
pub fn attention_tile(source: &RasterTile, maps: Tensor) -> Result<RasterTile> {
    let &[heads, _, _] = maps.shape() else {
        return Err(Error::dim(format!("expected H×G×G attention maps, got {:?}", maps.shape())));
    };
    let names = (0..heads).map(|h| format!("attn_head{h}")).collect();
    RasterTile::new(maps, source.lon, source.lat, None, names)
}

fn to_gray(plane: &[f32]) -> Vec<u8> {
    let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    plane
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// One row of panels, each `size` pixels square: the first channel of
/// `tile`, then every attention head upsampled by pixel replication. Every
/// panel is stretched to the full 0..255 range.
pub fn contact_sheet(tile: &RasterTile, maps: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let &[heads, g, g2] = maps.shape() else {
        return Err(Error::dim(format!("expected H×G×G attention maps, got {:?}", maps.shape())));
    };
    let (h, w) = (tile.height(), tile.width());
    if g != g2 || h != w || g == 0 || h % g != 0 {
        return Err(Error::dim(format!("{g}×{g2} maps do not tile a {h}×{w} raster")));
    }
    let scale = h / g;
    let mut panels = vec![to_gray(&tile.channels.data()[..h * w])];
    for head in maps.data().chunks(g * g) {
        let up: Vec<f32> = (0..h * w).map(|p| head[(p / w / scale) * g + (p % w) / scale]).collect();
        panels.push(to_gray(&up));
    }
    let sheet_w = w * (heads + 1);
    let mut out = vec![0u8; sheet_w * h];
    for (i, panel) in panels.iter().enumerate() {
        for y in 0..h {
            out[y * sheet_w + i * w..y * sheet_w + (i + 1) * w].copy_from_slice(&panel[y * w..(y + 1) * w]);
        }
    }
    Ok((sheet_w, h, out))
}

pub fn write_png_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::dim(format!("{} pixels for a {width}×{height} image", pixels.len())));
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::Io(std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(pixels).map_err(io)?;
    writer.finish().map_err(io)?;
    Ok(())
}
