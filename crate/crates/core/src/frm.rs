//! Fire Risk Map construction: intensity-scaled Gaussian kernels summed
//! over the day's events, then a dataset-wide normalization to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::Grid;
use crate::ingest::{BoundingBox, DailyEventSet};

/// Affine, clamped brightness-to-width mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaConfig {
    /// Brightness (K) mapped to `sigma_min_px`.
    pub b_lo: f64,
    /// Brightness (K) mapped to `sigma_max_px`.
    pub b_hi: f64,
    pub sigma_min_px: f64,
    pub sigma_max_px: f64,
    /// `sigma_y / sigma_x`; 1 gives isotropic kernels.
    pub aspect: f64,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        SigmaConfig {
            b_lo: 300.0,
            b_hi: 500.0,
            sigma_min_px: 1.0,
            sigma_max_px: 4.0,
            aspect: 1.0,
        }
    }
}

impl SigmaConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.sigma_min_px > 0.0, "sigma_min_px must be positive");
        ensure!(
            self.sigma_max_px >= self.sigma_min_px,
            "sigma_max_px must be >= sigma_min_px"
        );
        ensure!(self.b_hi > self.b_lo, "b_hi must exceed b_lo");
        ensure!(self.aspect > 0.0, "aspect must be positive");
        Ok(())
    }
}

/// Maps a brightness temperature to per-axis kernel widths in pixels.
pub fn intensity_to_sigma(brightness: f64, config: &SigmaConfig) -> Result<(f64, f64)> {
    config.validate()?;
    ensure!(
        brightness > 0.0,
        "brightness must be positive, got {brightness}"
    );
    let frac = (brightness - config.b_lo) / (config.b_hi - config.b_lo);
    let sigma = (config.sigma_min_px + frac * (config.sigma_max_px - config.sigma_min_px))
        .clamp(config.sigma_min_px, config.sigma_max_px);
    Ok((sigma, sigma * config.aspect))
}

/// A 2-D Gaussian in pixel coordinates; pixel `(x, y)` has its centre at
/// the integer coordinate `(x, y)` (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub center_px: (f64, f64),
    pub sigma_px: (f64, f64),
}

impl KernelSpec {
    pub fn new(center_px: (f64, f64), sigma_px: (f64, f64)) -> Result<Self> {
        ensure!(
            sigma_px.0 > 0.0 && sigma_px.1 > 0.0,
            "kernel widths must be positive, got {sigma_px:?}"
        );
        Ok(KernelSpec {
            center_px,
            sigma_px,
        })
    }

    pub fn peak(&self) -> f64 {
        1.0 / (2.0 * std::f64::consts::PI * self.sigma_px.0 * self.sigma_px.1)
    }
}

/// Evaluates the normalized Gaussian density at every pixel centre.
///
/// With `cutoff_sigmas = Some(k)` (k >= 6) pixels farther than `k` widths
/// from the centre along either axis are left at zero.
pub fn rasterize_kernel(
    spec: &KernelSpec,
    resolution: (usize, usize),
    cutoff_sigmas: Option<f64>,
) -> Result<Grid> {
    let mut grid = Grid::zeros(resolution.0, resolution.1);
    accumulate_kernel(&mut grid, spec, cutoff_sigmas)?;
    Ok(grid)
}

fn accumulate_kernel(grid: &mut Grid, spec: &KernelSpec, cutoff_sigmas: Option<f64>) -> Result<()> {
    let (height, width) = grid.shape();
    ensure!(height > 0 && width > 0, "resolution must be positive");
    if let Some(k) = cutoff_sigmas {
        ensure!(k >= 6.0, "kernel cutoff must be at least 6 sigma, got {k}");
    }
    let (cx, cy) = spec.center_px;
    let (sx, sy) = spec.sigma_px;
    let peak = spec.peak();
    // separable: exp(a + b) = exp(a) exp(b)
    let axis = |n: usize, c: f64, s: f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let d = i as f64 - c;
                match cutoff_sigmas {
                    Some(k) if d.abs() > k * s => 0.0,
                    _ => (-(d * d) / (2.0 * s * s)).exp(),
                }
            })
            .collect()
    };
    let gx = axis(width, cx, sx);
    let gy = axis(height, cy, sy);
    let data = grid.as_mut_slice();
    for (y, &wy) in gy.iter().enumerate() {
        if wy == 0.0 {
            continue;
        }
        let row = &mut data[y * width..(y + 1) * width];
        for (v, &wx) in row.iter_mut().zip(&gx) {
            *v += peak * wy * wx;
        }
    }
    Ok(())
}

/// Plate carrée projection of a bounding box onto the pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub bbox: BoundingBox,
    pub resolution: (usize, usize),
}

impl GeoTransform {
    pub fn new(bbox: BoundingBox, resolution: (usize, usize)) -> Result<Self> {
        bbox.validate()?;
        ensure!(
            resolution.0 > 0 && resolution.1 > 0,
            "resolution must be positive"
        );
        Ok(GeoTransform { bbox, resolution })
    }

    /// `(x, y)` pixel coordinates; the box edges land on the outer pixel edges
    /// and north is row 0.
    pub fn to_pixel(&self, latitude: f64, longitude: f64) -> (f64, f64) {
        let (height, width) = self.resolution;
        let b = &self.bbox;
        let x = (longitude - b.lon_min) / (b.lon_max - b.lon_min) * width as f64 - 0.5;
        let y = (b.lat_max - latitude) / (b.lat_max - b.lat_min) * height as f64 - 0.5;
        (x, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FireRiskMap {
    pub grid: Grid,
    pub day_index: usize,
    /// Divisor applied to reach `[0, 1]`; 1 for raw maps.
    pub normalization_constant: f64,
}

impl FireRiskMap {
    pub fn resolution(&self) -> (usize, usize) {
        self.grid.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterOptions {
    pub sigma: SigmaConfig,
    pub cutoff_sigmas: Option<f64>,
}

/// Sums one kernel per event; an empty day yields the zero map.
pub fn build_frm(
    day: &DailyEventSet,
    transform: &GeoTransform,
    options: &RasterOptions,
) -> Result<FireRiskMap> {
    let (height, width) = transform.resolution;
    let mut grid = Grid::zeros(height, width);
    for event in &day.events {
        let sigma = intensity_to_sigma(event.brightness, &options.sigma)?;
        let spec = KernelSpec::new(transform.to_pixel(event.latitude, event.longitude), sigma)?;
        accumulate_kernel(&mut grid, &spec, options.cutoff_sigmas)?;
    }
    Ok(FireRiskMap {
        grid,
        day_index: day.day_index,
        normalization_constant: 1.0,
    })
}

/// Percentile used to derive the dataset scaling constant.
pub const NORMALIZATION_PERCENTILE: f64 = 99.9;

/// Computes the scaling constant from the maps whose `day_index` satisfies
/// `is_train`: the 99.9th percentile (nearest rank) of positive pixels, or
/// the maximum when that percentile is zero.
pub fn normalization_constant(
    maps: &[FireRiskMap],
    is_train: impl Fn(usize) -> bool,
) -> Result<f64> {
    let mut train_maps = maps.iter().filter(|m| is_train(m.day_index)).peekable();
    if train_maps.peek().is_none() {
        return Err(Error::Data("training split holds no maps".into()));
    }
    let mut positive: Vec<f64> = train_maps
        .flat_map(|m| m.grid.as_slice().iter().copied())
        .filter(|&v| v > 0.0)
        .collect();
    if positive.is_empty() {
        return Err(Error::Data(
            "training maps are all zero; no normalization constant exists".into(),
        ));
    }
    let n = positive.len();
    let rank = ((NORMALIZATION_PERCENTILE / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    let (_, &mut pct, _) = positive.select_nth_unstable_by(rank - 1, f64::total_cmp);
    if pct > 0.0 {
        Ok(pct)
    } else {
        Ok(positive.iter().copied().fold(0.0, f64::max))
    }
}

/// Divides by `constant`, clips to `[0, 1]` and records the constant.
pub fn apply_normalization(map: &FireRiskMap, constant: f64) -> FireRiskMap {
    FireRiskMap {
        grid: map.grid.map(|v| (v / constant).clamp(0.0, 1.0)),
        day_index: map.day_index,
        normalization_constant: constant,
    }
}

pub fn normalize_dataset(
    maps: &[FireRiskMap],
    is_train: impl Fn(usize) -> bool,
) -> Result<(Vec<FireRiskMap>, f64)> {
    let constant = normalization_constant(maps, is_train)?;
    Ok((
        maps.iter()
            .map(|m| apply_normalization(m, constant))
            .collect(),
        constant,
    ))
}
