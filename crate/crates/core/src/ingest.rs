//! Raw measurement parsing and aggregation into the incomplete
//! location × timeslot matrix.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, GridIndex};
use crate::numcore::Tensor2;

/// One mobile reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementRecord {
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub position: GeoPoint,
    pub value: f64,
}

/// Parsed records plus counts of rejected rows.
#[derive(Debug, Clone, Default)]
pub struct ParsedMeasurements {
    pub records: Vec<MeasurementRecord>,
    pub malformed: usize,
    pub negative: usize,
}

impl ParsedMeasurements {
    pub fn skipped(&self) -> usize {
        self.malformed + self.negative
    }
}

/// Parses a measurement CSV with header `timestamp,lat,lon,value`.
///
/// Timestamps may be integer epoch seconds or ISO-8601 UTC. Rows that fail to
/// parse or carry out-of-range coordinates are skipped and counted; more than
/// half malformed is an error. Records come back sorted by timestamp.
pub fn parse_measurements(path: impl AsRef<Path>) -> Result<ParsedMeasurements> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_measurements_from(file)
}

pub fn parse_measurements_from<R: Read>(reader: R) -> Result<ParsedMeasurements> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);

    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => {
            return Err(Error::Format {
                what: "measurement CSV",
                detail: e.to_string(),
            })
        }
    };
    let mut out = ParsedMeasurements::default();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        warn!("measurement file is empty");
        return Ok(out);
    }
    let expected = ["timestamp", "lat", "lon", "value"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| !h.eq_ignore_ascii_case(e)) {
        return Err(Error::Format {
            what: "measurement CSV",
            detail: format!(
                "expected header timestamp,lat,lon,value, found {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        });
    }

    let mut total = 0usize;
    for row in rdr.records() {
        total += 1;
        let Ok(row) = row else {
            out.malformed += 1;
            continue;
        };
        match parse_row(&row) {
            Some(rec) if rec.value < 0.0 => out.negative += 1,
            Some(rec) => out.records.push(rec),
            None => out.malformed += 1,
        }
    }
    if total == 0 {
        warn!("measurement file has no data rows");
    }
    if out.malformed * 2 > total {
        return Err(Error::Format {
            what: "measurement CSV",
            detail: format!("{} of {total} rows malformed", out.malformed),
        });
    }
    if out.skipped() > 0 {
        warn!("skipped {} malformed and {} negative rows", out.malformed, out.negative);
    }
    out.records.sort_by_key(|r| r.timestamp);
    Ok(out)
}

fn parse_row(row: &csv::StringRecord) -> Option<MeasurementRecord> {
    if row.len() != 4 {
        return None;
    }
    let timestamp = parse_timestamp(&row[0])?;
    let lat: f64 = row[1].parse().ok()?;
    let lon: f64 = row[2].parse().ok()?;
    let value: f64 = row[3].parse().ok()?;
    if !value.is_finite() {
        return None;
    }
    let position = GeoPoint::new(lat, lon).ok()?;
    Some(MeasurementRecord {
        timestamp,
        position,
        value,
    })
}

/// Integer epoch seconds or an ISO-8601 instant (offset or `Z`; bare times are UTC).
pub fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(|dt| dt.and_utc().timestamp())
}

/// Writes records in the measurement CSV format with epoch-second timestamps.
pub fn write_measurements(path: impl AsRef<Path>, records: &[MeasurementRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "timestamp,lat,lon,value").map_err(io)?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{}",
            r.timestamp,
            r.position.lat(),
            r.position.lon(),
            r.value
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Time and space discretization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    /// Slot length in seconds.
    pub slot_duration: i64,
    /// Aggregation radius in meters.
    pub radius_m: f64,
    pub period_start: i64,
    /// Exclusive end of the period.
    pub period_end: i64,
}

impl AggregationConfig {
    pub const DEFAULT_SLOT_SECONDS: i64 = 3600;
    pub const DEFAULT_RADIUS_M: f64 = 100.0;

    pub fn new(period_start: i64, period_end: i64) -> Self {
        AggregationConfig {
            slot_duration: Self::DEFAULT_SLOT_SECONDS,
            radius_m: Self::DEFAULT_RADIUS_M,
            period_start,
            period_end,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slot_duration <= 0 {
            return Err(Error::invalid("slot duration must be positive"));
        }
        if !(self.radius_m > 0.0 && self.radius_m.is_finite()) {
            return Err(Error::invalid("aggregation radius must be positive"));
        }
        if self.period_end <= self.period_start {
            return Err(Error::invalid("period end must follow period start"));
        }
        Ok(())
    }

    /// Number of slots, `ceil((end - start) / slot)`.
    pub fn n_slots(&self) -> usize {
        let span = self.period_end - self.period_start;
        ((span + self.slot_duration - 1) / self.slot_duration) as usize
    }

    pub fn slot_of(&self, timestamp: i64) -> Option<usize> {
        if timestamp < self.period_start || timestamp >= self.period_end {
            return None;
        }
        Some(((timestamp - self.period_start) / self.slot_duration) as usize)
    }
}

/// The incomplete measurement matrix with its known-entry mask.
///
/// Unknown entries hold 0; `mask` is the source of truth for which entries
/// are observed.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    values: Tensor2,
    mask: Vec<bool>,
    locations: Vec<GeoPoint>,
    slot_times: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct ObservationFile {
    locations: Vec<GeoPoint>,
    slot_times: Vec<i64>,
    values: Vec<Vec<f64>>,
    mask: Vec<Vec<u8>>,
}

impl ObservationMatrix {
    pub fn new(values: Tensor2, mask: Vec<bool>, locations: Vec<GeoPoint>, slot_times: Vec<i64>) -> Result<Self> {
        let (n, t) = values.shape();
        if locations.len() != n || slot_times.len() != t || mask.len() != n * t {
            return Err(Error::invalid(format!(
                "observation shapes disagree: values {n}x{t}, {} locations, {} slots, mask {}",
                locations.len(),
                slot_times.len(),
                mask.len()
            )));
        }
        if !values.all_finite() {
            return Err(Error::invalid("non-finite observation value"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("observation matrix has no known entries"));
        }
        let mut values = values;
        for (v, &m) in values.data_mut().iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        Ok(ObservationMatrix {
            values,
            mask,
            locations,
            slot_times,
        })
    }

    pub fn n_locations(&self) -> usize {
        self.values.rows()
    }

    pub fn n_slots(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor2 {
        &self.values
    }

    /// Row-major known-entry mask.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn locations(&self) -> &[GeoPoint] {
        &self.locations
    }

    pub fn slot_times(&self) -> &[i64] {
        &self.slot_times
    }

    pub fn is_known(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n_slots() + j]
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn known_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Fraction of entries that are known.
    pub fn density(&self) -> f64 {
        self.known_count() as f64 / self.mask.len() as f64
    }

    /// Row-major flat positions of known entries.
    pub fn known_positions(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(p, _)| p)
            .collect()
    }

    /// Mean of the known values.
    pub fn known_mean(&self) -> f64 {
        let (s, c) = self
            .values
            .data()
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
        s / c as f64
    }

    /// Rows with no known entry.
    pub fn empty_rows(&self) -> Vec<usize> {
        let t = self.n_slots();
        (0..self.n_locations())
            .filter(|&i| !self.mask[i * t..(i + 1) * t].iter().any(|&m| m))
            .collect()
    }

    /// Same matrix restricted to a sub-mask; entries dropped from the mask are zeroed.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::invalid("mask length mismatch"));
        }
        if mask.iter().zip(&self.mask).any(|(&new, &old)| new && !old) {
            return Err(Error::invalid("sub-mask marks an unknown entry as known"));
        }
        ObservationMatrix::new(
            self.values.clone(),
            mask,
            self.locations.clone(),
            self.slot_times.clone(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let t = self.n_slots();
        let file = ObservationFile {
            locations: self.locations.clone(),
            slot_times: self.slot_times.clone(),
            values: self.values.to_rows(),
            mask: self
                .mask
                .chunks(t)
                .map(|r| r.iter().map(|&m| m as u8).collect())
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Format {
            what: "observation matrix",
            detail: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ObservationFile = serde_json::from_str(s).map_err(|e| Error::Format {
            what: "observation matrix",
            detail: e.to_string(),
        })?;
        let values = Tensor2::from_rows(&f.values)?;
        if f.mask.len() != values.rows() || f.mask.iter().any(|r| r.len() != values.cols()) {
            return Err(Error::Format {
                what: "observation matrix",
                detail: "mask shape differs from values".into(),
            });
        }
        let mut mask = Vec::with_capacity(values.len());
        for v in f.mask.iter().flatten() {
            match v {
                0 => mask.push(false),
                1 => mask.push(true),
                other => {
                    return Err(Error::Format {
                        what: "observation matrix",
                        detail: format!("mask entry {other} is not 0/1"),
                    })
                }
            }
        }
        ObservationMatrix::new(values, mask, f.locations, f.slot_times)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ObservationMatrix::from_json(&s)
    }
}

/// Greedy radius cover over records in timestamp order.
///
/// A record within `radius_m` of an existing location joins the nearest such
/// location; otherwise its position becomes a new location. The result depends
/// on record order, which is why records are scanned by timestamp.
pub fn discretize_locations(records: &[MeasurementRecord], radius_m: f64) -> Result<Vec<GeoPoint>> {
    if records.is_empty() {
        return Err(Error::invalid("no records to discretize"));
    }
    if !(radius_m > 0.0 && radius_m.is_finite()) {
        return Err(Error::invalid("radius must be positive"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| records[i].timestamp);
    let mut index = GridIndex::new(radius_m, records[order[0]].position.lat());
    let mut locations = Vec::new();
    for i in order {
        let p = records[i].position;
        if index.nearest_within(p, radius_m).is_none() {
            index.insert(p);
            locations.push(p);
        }
    }
    debug_assert_eq!(index.len(), locations.len());
    Ok(locations)
}

/// Aggregated matrix plus bookkeeping about what was dropped.
#[derive(Debug, Clone)]
pub struct Aggregation {
    pub matrix: ObservationMatrix,
    /// Contributing record count per cell, row-major N×T.
    pub counts: Vec<u32>,
    pub accepted: usize,
    pub out_of_period: usize,
    pub unassigned: usize,
    /// Locations removed because none of their records fell in the period.
    pub dropped_locations: usize,
}

/// Median of all readings per (location, slot).
pub fn aggregate(
    records: &[MeasurementRecord],
    locations: &[GeoPoint],
    config: &AggregationConfig,
) -> Result<Aggregation> {
    config.validate()?;
    if locations.is_empty() {
        return Err(Error::invalid("no locations"));
    }
    let t = config.n_slots();
    let n = locations.len();
    let mut index = GridIndex::new(config.radius_m, locations[0].lat());
    for &p in locations {
        index.insert(p);
    }

    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); n * t];
    let (mut out_of_period, mut unassigned, mut accepted) = (0, 0, 0);
    for r in records {
        let Some(j) = config.slot_of(r.timestamp) else {
            out_of_period += 1;
            continue;
        };
        let Some((i, _)) = index.nearest_within(r.position, config.radius_m) else {
            unassigned += 1;
            continue;
        };
        cells[i * t + j].push(r.value);
        accepted += 1;
    }
    if out_of_period > 0 {
        warn!("dropped {out_of_period} records outside the aggregation period");
    }
    if unassigned > 0 {
        warn!(
            "dropped {unassigned} records farther than {} m from any location",
            config.radius_m
        );
    }
    if accepted == 0 {
        return Err(Error::invalid("no records fall inside the aggregation period"));
    }

    let keep: Vec<usize> = (0..n)
        .filter(|&i| cells[i * t..(i + 1) * t].iter().any(|c| !c.is_empty()))
        .collect();
    let dropped_locations = n - keep.len();
    let mut values = Tensor2::zeros(keep.len(), t);
    let mut mask = vec![false; keep.len() * t];
    let mut counts = vec![0u32; keep.len() * t];
    for (row, &i) in keep.iter().enumerate() {
        for j in 0..t {
            let cell = &mut cells[i * t + j];
            if cell.is_empty() {
                continue;
            }
            values.set(row, j, median(cell));
            mask[row * t + j] = true;
            counts[row * t + j] = cell.len() as u32;
        }
    }
    let slot_times = (0..t as i64)
        .map(|j| config.period_start + j * config.slot_duration)
        .collect();
    let matrix = ObservationMatrix::new(values, mask, keep.iter().map(|&i| locations[i]).collect(), slot_times)?;
    Ok(Aggregation {
        matrix,
        counts,
        accepted,
        out_of_period,
        unassigned,
        dropped_locations,
    })
}

/// Median with the even-count rule "mean of the two middle values". Sorts in place.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
