//! 8-bit renderings of layouts and depth maps, and the on-disk export of a
//! generated scene.

use std::path::Path;

use crate::compositor::Layout;
use crate::error::Result;
use crate::toydata::{to_rgb8, write_ppm};
use crate::{Scalar, Tensor};

/// Fixed class colours of layout visualizations (cycled past the end).
pub const CLASS_COLORS: [[u8; 3]; 8] = [
    [40, 40, 40],
    [230, 80, 60],
    [70, 170, 90],
    [60, 110, 220],
    [230, 200, 60],
    [170, 80, 200],
    [60, 200, 210],
    [240, 150, 200],
];

/// Per-pixel argmax class painted with [`CLASS_COLORS`].
pub fn layout_rgb8<S: Scalar>(layout: &Layout<S>) -> Vec<u8> {
    layout.class_ids().into_iter().flat_map(|c| CLASS_COLORS[c % CLASS_COLORS.len()]).collect()
}

/// Depth map as grayscale RGB, linearly mapped so the minimum is 0 and the
/// maximum 255 (all zero for a constant map).
pub fn depth_rgb8<S: Scalar>(depth: &Tensor<S>) -> Vec<u8> {
    let d = depth.to_f64_vec();
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    d.iter()
        .flat_map(|&v| {
            let g = if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
            [g; 3]
        })
        .collect()
}

/// Writes `image.ppm`, `layout.ppm`, `depth.ppm` and `segments.json` into `dir`.
pub fn export_visuals<S: Scalar>(layout: &Layout<S>, image: &Tensor<S>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let r = layout.res();
    write_ppm(&dir.join("image.ppm"), &to_rgb8(image), r, r)?;
    write_ppm(&dir.join("layout.ppm"), &layout_rgb8(layout), r, r)?;
    write_ppm(&dir.join("depth.ppm"), &depth_rgb8(&layout.depth_map), r, r)?;
    std::fs::write(dir.join("segments.json"), serde_json::to_vec_pretty(&layout.sidecar())?)?;
    Ok(())
}
