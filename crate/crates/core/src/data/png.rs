//! 8-bit RGB and 16-bit depth PNG reading and writing.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::head::DepthMap;

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(img.to_rgb8())
}

/// Raw 16-bit depth values, row-major.
pub struct DepthPng {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u16>,
}

pub fn read_depth_png(path: &Path) -> Result<DepthPng> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::Data(format!(
                "{}: expected 16-bit grayscale depth PNG, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(DepthPng {
        height: img.height() as usize,
        width: img.width() as usize,
        values: img.into_raw(),
    })
}

pub fn write_depth_png(path: &Path, height: usize, width: usize, values: &[u16]) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| Error::Contract(format!("depth buffer does not match {height}x{width}")))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Quantize meters to `round(depth * scale)` and write as 16-bit PNG.
pub fn write_depth_map(path: &Path, depth: &DepthMap, scale: f64) -> Result<()> {
    let values: Vec<u16> = depth
        .data
        .iter()
        .map(|d| (d * scale).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    write_depth_png(path, depth.height, depth.width, &values)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

// Dark purple through orange to pale yellow; near is bright.
const ANCHORS: [[u8; 3]; 9] = [
    [0, 0, 4],
    [28, 16, 68],
    [79, 18, 123],
    [129, 37, 129],
    [181, 54, 122],
    [229, 80, 100],
    [251, 135, 97],
    [254, 194, 135],
    [252, 253, 191],
];

/// 256-entry lookup table, linear between the anchors.
pub fn colormap_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    let segs = (ANCHORS.len() - 1) as f64;
    for (i, entry) in lut.iter_mut().enumerate() {
        let pos = i as f64 / 255.0 * segs;
        let k = (pos.floor() as usize).min(ANCHORS.len() - 2);
        let f = pos - k as f64;
        for c in 0..3 {
            let a = ANCHORS[k][c] as f64;
            let b = ANCHORS[k + 1][c] as f64;
            entry[c] = (a + (b - a) * f).round() as u8;
        }
    }
    lut
}

/// Render depth over `[0, d_max]` with the fixed LUT, near = bright.
pub fn colorize(depth: &DepthMap, d_max: f64) -> RgbImage {
    let lut = colormap_lut();
    RgbImage::from_fn(depth.width as u32, depth.height as u32, |x, y| {
        let d = depth.get(y as usize, x as usize);
        let t = (1.0 - d / d_max).clamp(0.0, 1.0);
        Rgb(lut[(t * 255.0).round() as usize])
    })
}
