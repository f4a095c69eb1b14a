//! Grayscale PNG panels of the central transverse and sagittal slices.

use std::path::Path;

use anyhow::{Context, Result};
use dosediff::Volume3D;
use image::GrayImage;

const GAP: u32 = 2;

/// Central transverse slice (rows x cols).
fn transverse(v: &Volume3D) -> (u32, u32, Vec<f32>) {
    let [s, h, w] = v.dims();
    (w as u32, h as u32, v.slice_data(s / 2).to_vec())
}

/// Central sagittal plane: z runs down, rows run across.
fn sagittal(v: &Volume3D) -> (u32, u32, Vec<f32>) {
    let [s, h, w] = v.dims();
    let x = w / 2;
    let data = (0..s)
        .flat_map(|z| (0..h).map(move |y| (z, y)))
        .map(|(z, y)| v.get(z, y, x))
        .collect();
    (h as u32, s as u32, data)
}

/// Tiles one view of each volume side by side, scaled so `peak` is white.
fn tile(volumes: &[&Volume3D], view: fn(&Volume3D) -> (u32, u32, Vec<f32>), peak: f32) -> GrayImage {
    let views: Vec<_> = volumes.iter().map(|v| view(v)).collect();
    let (w, h) = (views[0].0, views[0].1);
    let n = views.len() as u32;
    let mut img = GrayImage::new(n * w + (n - 1) * GAP, h);
    for (k, (_, _, data)) in views.iter().enumerate() {
        let x0 = k as u32 * (w + GAP);
        for y in 0..h {
            for x in 0..w {
                let v = data[(y * w + x) as usize] / peak;
                img.put_pixel(x0 + x, y, image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
            }
        }
    }
    img
}

/// Writes `<stem>_transverse.png` and `<stem>_sagittal.png`, each tiling the
/// given volumes left to right in a shared intensity scale.
pub fn write_panels(volumes: &[&Volume3D], dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    let peak = volumes[0].data().iter().cloned().fold(f32::MIN, f32::max).max(1e-12);
    let mut out = Vec::new();
    for (name, view) in [("transverse", transverse as fn(&Volume3D) -> _), ("sagittal", sagittal)] {
        let path = dir.join(format!("{stem}_{name}.png"));
        tile(volumes, view, peak)
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        out.push(path);
    }
    Ok(out)
}
