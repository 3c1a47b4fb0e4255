//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json              DatasetManifest
//! <dir>/segment_index.json         SegmentIndex (all splits)
//! <dir>/segments_{split}.json      {split, boundaries, segments:[{start_day,length}]}
//! <dir>/frames/day_00000.f32       raw f32 little-endian, row-major HxW
//! <dir>/frames/day_00000.json      {day_index, shape, dtype, normalization_constant, bbox}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::frm::{build_frm, normalize_dataset, FireRiskMap, GeoTransform, RasterOptions};
use crate::grid::Grid;
use crate::ingest::{build_segment_index, BoundingBox, ParsedEvents, Segment, SegmentIndex, Split};

pub const FRAME_DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSidecar {
    pub day_index: usize,
    pub shape: [usize; 2],
    pub dtype: String,
    pub normalization_constant: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayEntry {
    pub day_index: usize,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// `"csv"` or `"synthetic"`.
    pub source: String,
    pub num_days: usize,
    pub resolution: [usize; 2],
    pub bbox: BoundingBox,
    pub normalization_constant: f64,
    /// Forecast horizons per segment; segments are `horizons + 1` days.
    pub horizons: usize,
    pub days: Vec<DayEntry>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn frame_stem(day_index: usize) -> String {
    format!("day_{day_index:05}")
}

pub fn encode_f32le(grid: &Grid) -> Vec<u8> {
    grid.as_slice()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn decode_f32le(bytes: &[u8], height: usize, width: usize) -> Result<Grid> {
    if bytes.len() != height * width * 4 {
        return Err(Error::Data(format!(
            "frame holds {} bytes, expected {} for {height}x{width} f32",
            bytes.len(),
            height * width * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Grid::from_vec(height, width, data)
}

/// Writes `<stem>.f32` and `<stem>.json` into `dir`; returns the `.f32` path.
pub fn write_frame(dir: &Path, stem: &str, map: &FireRiskMap, bbox: &BoundingBox) -> Result<PathBuf> {
    create_dir(dir)?;
    let data_path = dir.join(format!("{stem}.f32"));
    fs::write(&data_path, encode_f32le(&map.grid)).map_err(|e| Error::io(&data_path, e))?;
    let (h, w) = map.grid.shape();
    let sidecar = FrameSidecar {
        day_index: map.day_index,
        shape: [h, w],
        dtype: FRAME_DTYPE.into(),
        normalization_constant: map.normalization_constant,
        bbox: *bbox,
    };
    write_json(&dir.join(format!("{stem}.json")), &sidecar)?;
    Ok(data_path)
}

/// Reads a frame given its `.f32` path; the sidecar sits next to it.
pub fn read_frame(data_path: &Path) -> Result<(FireRiskMap, FrameSidecar)> {
    let sidecar: FrameSidecar = read_json(&data_path.with_extension("json"))?;
    if sidecar.dtype != FRAME_DTYPE {
        return Err(Error::Data(format!(
            "{}: unsupported dtype {:?}",
            data_path.display(),
            sidecar.dtype
        )));
    }
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let grid = decode_f32le(&bytes, sidecar.shape[0], sidecar.shape[1])?;
    Ok((
        FireRiskMap {
            grid,
            day_index: sidecar.day_index,
            normalization_constant: sidecar.normalization_constant,
        },
        sidecar,
    ))
}

/// Writes a complete dataset directory.
pub fn write_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    maps: &[FireRiskMap],
    index: &SegmentIndex,
) -> Result<()> {
    create_dir(dir)?;
    let frames = dir.join("frames");
    for (map, entry) in maps.iter().zip(&manifest.days) {
        let stem = Path::new(&entry.file)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("bad frame name {:?}", entry.file)))?;
        write_frame(&frames, stem, map, &manifest.bbox)?;
    }
    write_json(&dir.join("manifest.json"), manifest)?;
    write_segment_index(dir, index)
}

pub fn write_segment_index(dir: &Path, index: &SegmentIndex) -> Result<()> {
    write_json(&dir.join("segment_index.json"), index)?;
    for split in &index.splits {
        write_json(&dir.join(format!("segments_{}.json", split.split.name())), split)?;
    }
    Ok(())
}

/// Rasterizes parsed events into normalized maps, with the chronological
/// split over stride-1 windows of `horizons + 1` days.
pub fn build_event_dataset(
    parsed: &ParsedEvents,
    data: &DataConfig,
) -> Result<(DatasetManifest, Vec<FireRiskMap>, SegmentIndex)> {
    let resolution = (data.resolution[0], data.resolution[1]);
    let index = build_segment_index(parsed.num_days(), data.split, data.horizons + 1)?;
    let transform = GeoTransform::new(data.bbox, resolution)?;
    let options = RasterOptions {
        sigma: data.sigma,
        cutoff_sigmas: data.cutoff_sigmas,
    };
    let raw: Vec<FireRiskMap> = parsed
        .days
        .par_iter()
        .map(|day| build_frm(day, &transform, &options))
        .collect::<Result<_>>()?;
    let train_days = index.day_range(Split::Train);
    let (maps, constant) = normalize_dataset(&raw, |d| train_days.contains(&d))?;
    let manifest = DatasetManifest {
        source: "csv".into(),
        num_days: maps.len(),
        resolution: data.resolution,
        bbox: data.bbox,
        normalization_constant: constant,
        horizons: data.horizons,
        days: parsed
            .days
            .iter()
            .map(|d| DayEntry {
                day_index: d.day_index,
                file: format!("frames/{}.f32", frame_stem(d.day_index)),
                date: Some(d.date.to_string()),
            })
            .collect(),
    };
    Ok((manifest, maps, index))
}

/// In-memory dataset: all frames at f64 plus the segment index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub index: SegmentIndex,
    pub frames: Vec<Grid>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::Data(format!(
                "no dataset at {} (missing manifest.json; run build-data first)",
                dir.display()
            )));
        }
        let manifest: DatasetManifest = read_json(&manifest_path)?;
        let index: SegmentIndex = read_json(&dir.join("segment_index.json"))?;
        index.verify()?;
        if index.num_days != manifest.num_days || manifest.days.len() != manifest.num_days {
            return Err(Error::Data("manifest and segment index disagree on day count".into()));
        }
        let mut frames = Vec::with_capacity(manifest.num_days);
        for (i, entry) in manifest.days.iter().enumerate() {
            let (map, sidecar) = read_frame(&dir.join(&entry.file))?;
            if sidecar.day_index != i || sidecar.shape != manifest.resolution {
                return Err(Error::Data(format!(
                    "frame {} does not match the manifest",
                    entry.file
                )));
            }
            frames.push(map.grid);
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            index,
            frames,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.manifest.resolution[0], self.manifest.resolution[1])
    }

    pub fn horizons(&self) -> usize {
        self.manifest.horizons
    }

    pub fn segments(&self, split: Split) -> &[Segment] {
        &self.index.split(split).segments
    }

    /// Conditioning frame (first day) of a segment.
    pub fn condition(&self, segment: &Segment) -> &Grid {
        &self.frames[segment.start_day]
    }

    /// Target frame for `horizon` (day `start + 1 + horizon`).
    pub fn target(&self, segment: &Segment, horizon: usize) -> &Grid {
        &self.frames[segment.start_day + 1 + horizon]
    }

    pub fn targets(&self, segment: &Segment) -> Vec<Grid> {
        (0..self.horizons())
            .map(|t| self.target(segment, t).clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_frames_round_trip(values in proptest::collection::vec(0.0f32..1.0, 12)) {
            let grid = Grid::from_vec(3, 4, values.iter().map(|&v| v as f64).collect()).unwrap();
            let back = decode_f32le(&encode_f32le(&grid), 3, 4).unwrap();
            prop_assert_eq!(back, grid);
        }
    }

    #[test]
    fn frame_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = FireRiskMap {
            grid: Grid::from_vec(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap(),
            day_index: 7,
            normalization_constant: 0.042,
        };
        let path = write_frame(dir.path(), "day_00007", &map, &BoundingBox::CONUS).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[4..8], &0.25f32.to_le_bytes());
        let (back, sidecar) = read_frame(&path).unwrap();
        assert_eq!(back, map);
        assert_eq!(sidecar.shape, [2, 3]);
        assert_eq!(sidecar.dtype, "f32le");
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
        for key in ["day_index", "shape", "dtype", "normalization_constant", "bbox"] {
            assert!(raw.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn truncated_frames_are_rejected() {
        assert!(decode_f32le(&[0u8; 10], 2, 2).is_err());
    }
}
