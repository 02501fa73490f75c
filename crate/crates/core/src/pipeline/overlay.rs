use std::path::Path;

use crate::data_schema::{CxrImage, Heatmap};
use crate::error::{Error, Result};

/// Weight of the colormap in the blend.
pub const OVERLAY_ALPHA: f64 = 0.5;

// Perceptually ordered dark-purple → teal → yellow ramp.
const ANCHORS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Colormap value for `t` in `[0, 1]`, as unrounded RGB in `[0, 255]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (t.floor() as usize).min(ANCHORS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (ANCHORS[i], ANCHORS[i + 1]);
    [0, 1, 2].map(|c| a[c] + f * (b[c] - a[c]))
}

/// RGB bytes (row-major) of the grayscale image blended with the colormap
/// of `heatmap` at weight `alpha`.
pub fn overlay_rgb(image: &CxrImage, heatmap: &Heatmap, alpha: f64) -> Result<Vec<u8>> {
    if image.pixels().dim() != heatmap.values().dim() {
        return Err(Error::Shape("overlay image and heatmap differ in size".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(image.pixels().len() * 3);
    for (&g, &h) in image.pixels().iter().zip(heatmap.values().iter()) {
        let c = colormap(h);
        for ch in c {
            out.push(((1.0 - alpha) * g * 255.0 + alpha * ch).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Writes the overlay as an 8-bit RGB PNG.
pub fn render_overlay(image: &CxrImage, heatmap: &Heatmap, out_path: impl AsRef<Path>) -> Result<()> {
    let path = out_path.as_ref();
    let rgb = overlay_rgb(image, heatmap, OVERLAY_ALPHA)?;
    image::save_buffer(
        path,
        &rgb,
        image.width() as u32,
        image.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
