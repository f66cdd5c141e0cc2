//! Image, mask and heatmap files.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};
use samic_core::interp::resize_plane;
use samic_core::metrics::Mask;
use samic_core::{SaliencyHeatmap, Tensor};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn png_bytes<P, C>(img: &ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Argument(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = read(path)?;
    image::load_from_memory(&bytes).map(|i| i.to_rgb8()).map_err(|e| Error::format(path, e))
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &png_bytes(img)?)
}

/// `[3, H, W]` tensor in `[0,1]`, resized bilinearly to `size = (H, W)`.
pub fn image_tensor(img: &RgbImage, size: (usize, usize)) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(3 * size.0 * size.1);
    for c in 0..3 {
        let plane: Vec<f64> = img.pixels().map(|p| f64::from(p.0[c]) / 255.0).collect();
        if (h, w) == size {
            data.extend(plane);
        } else {
            data.extend(resize_plane(&plane, h, w, size.0, size.1));
        }
    }
    Tensor::from_vec(&[3, size.0, size.1], data).expect("length matches shape")
}

pub fn mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let img = ImageBuffer::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255u8 } else { 0 }])
    });
    png_bytes(&img)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_atomic(path, &mask_png(mask)?)
}

/// Any pixel at or above 128 is foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes = read(path)?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::format(path, e))?.to_luma8();
    let data = img.pixels().map(|p| p.0[0] >= 128).collect();
    Ok(Mask::new(img.height() as usize, img.width() as usize, data)?)
}

/// 16-bit grayscale, value `round(65535·g)`.
pub fn heatmap_png(map: &SaliencyHeatmap) -> Result<Vec<u8>> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Luma([(map.get(x as usize, y as usize) * 65535.0).round() as u16])
    });
    png_bytes(&img)
}

pub fn save_heatmap_png(path: &Path, map: &SaliencyHeatmap) -> Result<()> {
    write_atomic(path, &heatmap_png(map)?)
}

/// Reads a grayscale PNG back into `[0,1]`. The map is taken as stored, not
/// re-normalized.
pub fn load_heatmap_png(path: &Path) -> Result<SaliencyHeatmap> {
    let bytes = read(path)?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::format(path, e))?.to_luma16();
    let data = img.pixels().map(|p| f64::from(p.0[0]) / 65535.0).collect();
    Ok(SaliencyHeatmap::from_vec(img.height() as usize, img.width() as usize, data)?)
}

/// Little-endian `u32 H`, `u32 W`, then `H·W` f32 values in row-major order.
pub fn heatmap_raw(map: &SaliencyHeatmap) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * map.data().len());
    out.extend((map.height() as u32).to_le_bytes());
    out.extend((map.width() as u32).to_le_bytes());
    for v in map.data() {
        out.extend((*v as f32).to_le_bytes());
    }
    out
}

pub fn parse_heatmap_raw(path: &Path, bytes: &[u8]) -> Result<SaliencyHeatmap> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "raw heatmap shorter than its header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(Error::format(path, format!("expected {} bytes of data for {h}x{w}, found {}", 4 * h * w, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
    Ok(SaliencyHeatmap::from_vec(h, w, data)?)
}

pub fn load_heatmap(path: &Path) -> Result<SaliencyHeatmap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_heatmap_png(path),
        _ => parse_heatmap_raw(path, &read(path)?),
    }
}
