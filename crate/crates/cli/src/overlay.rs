//! Heat-map overlays: a jet palette alpha-blended over the source raster,
//! with alpha equal to the (clamped) map value.

use std::path::Path;

use agssp_core::{read_tensor, AnomalyMap};
use image::{ImageError, Rgb, RgbImage};

use crate::error::{CliError, Result};

/// Jet palette at `v ∈ [0, 1]`.
pub fn jet(v: f32) -> [f32; 3] {
    let ch = |centre: f32| (1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

pub fn blend(base: &RgbImage, map: &AnomalyMap) -> Result<RgbImage> {
    let (w, h) = base.dimensions();
    if map.dims() != (h as usize, w as usize) {
        return Err(CliError::Overlay(format!(
            "map is {}x{} but image is {h}x{w}",
            map.height, map.width
        )));
    }
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = map.get(y as usize, x as usize);
        let a = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        let c = jet(a);
        let Rgb(p) = *px;
        *px = Rgb(std::array::from_fn(|i| {
            ((1.0 - a) * p[i] as f32 + a * 255.0 * c[i]).round() as u8
        }));
    }
    Ok(out)
}

pub fn render(image: &Path, map: &Path, out: &Path) -> Result<()> {
    let base = image::open(image)
        .map_err(|e| match e {
            ImageError::IoError(io) => CliError::Io(format!("reading {}", image.display()), io),
            other => CliError::Overlay(format!("{}: {other}", image.display())),
        })?
        .to_rgb8();
    let map = AnomalyMap::from_tensor(read_tensor(map)?)?;
    blend(&base, &map)?
        .save_with_format(out, image::ImageFormat::Png)
        .map_err(|e| match e {
            ImageError::IoError(io) => CliError::Io(format!("writing {}", out.display()), io),
            other => CliError::Internal(format!("encoding {}: {other}", out.display())),
        })
}
