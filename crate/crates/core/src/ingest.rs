//! FIRMS-style CSV parsing and chronological split/segment indexing.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::NaiveDate;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// One satellite fire detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FireEvent {
    pub latitude: f64,
    pub longitude: f64,
    pub acq_date: NaiveDate,
    /// Brightness temperature in Kelvin.
    pub brightness: f64,
    pub confidence: Option<f64>,
}

impl FireEvent {
    pub fn new(
        latitude: f64,
        longitude: f64,
        acq_date: NaiveDate,
        brightness: f64,
        confidence: Option<f64>,
    ) -> Result<Self> {
        ensure!(
            (-90.0..=90.0).contains(&latitude),
            "latitude {latitude} outside [-90, 90]"
        );
        ensure!(
            (-180.0..=180.0).contains(&longitude),
            "longitude {longitude} outside [-180, 180]"
        );
        ensure!(
            brightness > 0.0 && brightness.is_finite(),
            "brightness must be positive, got {brightness}"
        );
        Ok(FireEvent {
            latitude,
            longitude,
            acq_date,
            brightness,
            confidence,
        })
    }
}

/// All in-region detections of one calendar day. May be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyEventSet {
    pub day_index: usize,
    pub date: NaiveDate,
    pub events: Vec<FireEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    /// Continental United States.
    pub const CONUS: BoundingBox = BoundingBox {
        lat_min: 24.5,
        lat_max: 49.5,
        lon_min: -125.0,
        lon_max: -66.5,
    };

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lat_min < self.lat_max && self.lon_min < self.lon_max,
            "degenerate bounding box {self:?}"
        );
        Ok(())
    }

    pub fn contains(&self, latitude: f64, longitude: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&latitude)
            && (self.lon_min..=self.lon_max).contains(&longitude)
    }
}

impl Default for BoundingBox {
    fn default() -> Self {
        BoundingBox::CONUS
    }
}

/// Header names of the columns the parser reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub latitude: String,
    pub longitude: String,
    pub acq_date: String,
    pub brightness: String,
    pub confidence: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            latitude: "latitude".into(),
            longitude: "longitude".into(),
            acq_date: "acq_date".into(),
            brightness: "brightness".into(),
            confidence: Some("confidence".into()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParseOptions {
    pub columns: ColumnMap,
    /// Drop detections whose confidence is missing or below this value.
    pub min_confidence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ParsedEvents {
    pub start_date: NaiveDate,
    pub days: Vec<DailyEventSet>,
    pub skipped_rows: usize,
}

impl ParsedEvents {
    pub fn num_days(&self) -> usize {
        self.days.len()
    }

    pub fn num_events(&self) -> usize {
        self.days.iter().map(|d| d.events.len()).sum()
    }
}

struct ColumnPositions {
    latitude: usize,
    longitude: usize,
    acq_date: usize,
    brightness: usize,
    confidence: Option<usize>,
}

impl ColumnPositions {
    fn resolve(headers: &csv::StringRecord, columns: &ColumnMap) -> Result<Self> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let require =
            |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
        Ok(ColumnPositions {
            latitude: require(&columns.latitude)?,
            longitude: require(&columns.longitude)?,
            acq_date: require(&columns.acq_date)?,
            brightness: require(&columns.brightness)?,
            confidence: columns.confidence.as_deref().and_then(find),
        })
    }

    fn event(&self, record: &csv::StringRecord) -> std::result::Result<FireEvent, String> {
        let field = |i: usize| record.get(i).map(str::trim).ok_or("short row");
        let number = |i: usize| -> std::result::Result<f64, String> {
            let raw = field(i)?;
            raw.parse::<f64>()
                .map_err(|_| format!("not a number: {raw:?}"))
        };
        let latitude = number(self.latitude)?;
        let longitude = number(self.longitude)?;
        let brightness = number(self.brightness)?;
        let raw_date = field(self.acq_date)?;
        let acq_date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d")
            .map_err(|_| format!("bad date: {raw_date:?}"))?;
        let confidence = self
            .confidence
            .and_then(|i| record.get(i))
            .and_then(|c| c.trim().parse::<f64>().ok());
        FireEvent::new(latitude, longitude, acq_date, brightness, confidence)
            .map_err(|e| e.to_string())
    }
}

/// Parses a FIRMS-style CSV into one [`DailyEventSet`] per calendar day.
///
/// The covered date range spans every well-formed row, including rows that
/// fall outside `region`; missing days are filled with empty sets. Malformed
/// rows are skipped and counted.
pub fn parse_events<R: Read>(
    source: R,
    region: &BoundingBox,
    options: &ParseOptions,
) -> Result<ParsedEvents> {
    region.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::EmptyInput("csv has no header row".into()));
    }
    let positions = ColumnPositions::resolve(&headers, &options.columns)?;

    let mut by_date: BTreeMap<NaiveDate, Vec<FireEvent>> = BTreeMap::new();
    let mut skipped_rows = 0;
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        rows += 1;
        let parsed = record
            .map_err(|e| e.to_string())
            .and_then(|r| positions.event(&r));
        let event = match parsed {
            Ok(event) => event,
            Err(reason) => {
                // header is line 1
                warn!("skipping csv line {}: {reason}", line + 2);
                skipped_rows += 1;
                continue;
            }
        };
        let day = by_date.entry(event.acq_date).or_default();
        let passes_confidence = match options.min_confidence {
            None => true,
            Some(min) => event.confidence.is_some_and(|c| c >= min),
        };
        if passes_confidence && region.contains(event.latitude, event.longitude) {
            day.push(event);
        }
    }
    if rows == 0 {
        return Err(Error::EmptyInput("csv has a header but no rows".into()));
    }
    let (Some(&first), Some(&last)) = (by_date.keys().next(), by_date.keys().next_back()) else {
        return Err(Error::EmptyInput(format!(
            "all {skipped_rows} rows were malformed"
        )));
    };

    let days = first
        .iter_days()
        .take_while(|d| *d <= last)
        .enumerate()
        .map(|(day_index, date)| DailyEventSet {
            day_index,
            date,
            events: by_date.remove(&date).unwrap_or_default(),
        })
        .collect();
    Ok(ParsedEvents {
        start_date: first,
        days,
        skipped_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start_day: usize,
    pub length: usize,
}

impl Segment {
    pub fn end_day(&self) -> usize {
        self.start_day + self.length
    }

    pub fn days(&self) -> std::ops::Range<usize> {
        self.start_day..self.end_day()
    }
}

/// Segments of one split. Serializes to the on-disk segment index document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSegments {
    pub split: Split,
    /// The two chronological day indices separating train|val and val|test.
    pub boundaries: [usize; 2],
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentIndex {
    pub num_days: usize,
    pub segment_length: usize,
    pub boundaries: [usize; 2],
    pub splits: Vec<SplitSegments>,
}

impl SegmentIndex {
    pub fn split(&self, split: Split) -> &SplitSegments {
        self.splits
            .iter()
            .find(|s| s.split == split)
            .expect("index always holds all three splits")
    }

    /// Half-open day range owned by `split`.
    pub fn day_range(&self, split: Split) -> std::ops::Range<usize> {
        let [a, b] = self.boundaries;
        match split {
            Split::Train => 0..a,
            Split::Val => a..b,
            Split::Test => b..self.num_days,
        }
    }

    /// Checks the partition and leakage properties.
    pub fn verify(&self) -> Result<()> {
        let [a, b] = self.boundaries;
        if !(a <= b && b <= self.num_days) {
            return Err(Error::Data(format!("unordered boundaries {a}, {b}")));
        }
        for split in Split::ALL {
            let range = self.day_range(split);
            for seg in &self.split(split).segments {
                if seg.length != self.segment_length
                    || seg.start_day < range.start
                    || seg.end_day() > range.end
                {
                    return Err(Error::Data(format!(
                        "segment {seg:?} leaves the {} range {range:?}",
                        split.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        ensure!(
            all.iter().all(|r| (0.0..=1.0).contains(r)),
            "split ratios must lie in [0, 1]: {self:?}"
        );
        ensure!(
            ((all.iter().sum::<f64>()) - 1.0).abs() < 1e-6,
            "split ratios must sum to 1: {self:?}"
        );
        Ok(())
    }

    /// Train and val sizes are floored, test takes the remainder.
    pub fn boundaries(&self, units: usize) -> [usize; 2] {
        // guard against 84 * (1/3) landing just below 28
        let floor = |x: f64| (x + 1e-9).floor() as usize;
        let train = floor(units as f64 * self.train).min(units);
        let val = floor(units as f64 * self.val).min(units - train);
        [train, train + val]
    }
}

/// Chronological day-level split with stride-1 windows inside each split.
pub fn build_segment_index(
    num_days: usize,
    ratios: SplitRatios,
    segment_length: usize,
) -> Result<SegmentIndex> {
    ratios.validate()?;
    ensure!(segment_length >= 1, "segment length must be positive");
    ensure!(
        num_days >= segment_length,
        "{num_days} days cannot hold a single {segment_length}-day segment"
    );
    let boundaries = ratios.boundaries(num_days);
    let mut index = SegmentIndex {
        num_days,
        segment_length,
        boundaries,
        splits: Vec::with_capacity(3),
    };
    for split in Split::ALL {
        let range = index.day_range(split);
        let segments: Vec<Segment> = if range.len() >= segment_length {
            (range.start..=range.end - segment_length)
                .map(|start_day| Segment {
                    start_day,
                    length: segment_length,
                })
                .collect()
        } else {
            Vec::new()
        };
        if segments.is_empty() {
            warn!(
                "{} split spans {} days and holds no {segment_length}-day segment",
                split.name(),
                range.len()
            );
        }
        index.splits.push(SplitSegments {
            split,
            boundaries,
            segments,
        });
    }
    Ok(index)
}

/// Split over back-to-back, non-overlapping blocks of `block_length` days
/// (one segment per block). Used for datasets where each block is an
/// independent sequence, so stride-1 windows would straddle two sequences.
pub fn build_block_segment_index(
    num_blocks: usize,
    ratios: SplitRatios,
    block_length: usize,
) -> Result<SegmentIndex> {
    ratios.validate()?;
    ensure!(block_length >= 1, "block length must be positive");
    ensure!(num_blocks >= 1, "need at least one block");
    let [a, b] = ratios.boundaries(num_blocks);
    let block_ranges = [0..a, a..b, b..num_blocks];
    let boundaries = [a * block_length, b * block_length];
    let splits = Split::ALL
        .iter()
        .zip(block_ranges)
        .map(|(&split, blocks)| {
            if blocks.is_empty() {
                warn!("{} split holds no blocks", split.name());
            }
            SplitSegments {
                split,
                boundaries,
                segments: blocks
                    .map(|blk| Segment {
                        start_day: blk * block_length,
                        length: block_length,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(SegmentIndex {
        num_days: num_blocks * block_length,
        segment_length: block_length,
        boundaries,
        splits,
    })
}
