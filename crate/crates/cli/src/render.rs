//! PNG heatmaps of FRM frames.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use treecast::storage::read_frame;
use treecast::{Error, Grid};

use crate::CliResult;

/// Black → red → yellow → white ramp over `[0, 1]`.
pub fn heat_color(value: f64) -> Rgb<u8> {
    let v = if value.is_finite() { value.clamp(0.0, 1.0) } else { 0.0 };
    let ramp = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ramp(3.0 * v), ramp(3.0 * v - 1.0), ramp(3.0 * v - 2.0)])
}

pub fn heatmap(grid: &Grid, scale: u32) -> RgbImage {
    let (h, w) = grid.shape();
    let scale = scale.max(1);
    ImageBuffer::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        heat_color(grid.get((y / scale) as usize, (x / scale) as usize))
    })
}

/// Places `right` next to `left` with a 2-pixel grey separator.
fn side_by_side(left: &RgbImage, right: &RgbImage) -> RgbImage {
    let gap = 2;
    let (w, h) = (left.width() + gap + right.width(), left.height().max(right.height()));
    let mut out = ImageBuffer::from_pixel(w, h, Rgb([96, 96, 96]));
    image::imageops::replace(&mut out, left, 0, 0);
    image::imageops::replace(&mut out, right, (left.width() + gap) as i64, 0);
    out
}

fn frame_paths(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "f32"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .f32 frames in {}", input.display())));
    }
    Ok(paths)
}

/// Renders every frame under `input` (paired in sorted order with the
/// frames under `target`, when given) into `out/<stem>.png`.
pub fn render_frames(input: &Path, target: Option<&Path>, out: &Path, scale: u32) -> CliResult<()> {
    let frames = frame_paths(input)?;
    let targets = match target {
        Some(t) => Some(frame_paths(t)?),
        None => None,
    };
    if let Some(t) = &targets {
        if t.len() < frames.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frames to render but only {} targets",
                frames.len(),
                t.len()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, path) in frames.iter().enumerate() {
        let (map, _) = read_frame(path)?;
        let mut img = heatmap(&map.grid, scale);
        if let Some(t) = &targets {
            let (truth, _) = read_frame(&t[i])?;
            img = side_by_side(&img, &heatmap(&truth.grid, scale));
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        let png = out.join(format!("{stem}.png"));
        img.save(&png)
            .map_err(|e| Error::Data(format!("{}: {e}", png.display())))?;
    }
    println!("rendered {} frame(s) into {}", frames.len(), out.display());
    Ok(())
}
