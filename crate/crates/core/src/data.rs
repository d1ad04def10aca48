//! Tabular ingestion, feature encoding, storm-wise splitting and standardization.
//!
//! Station files carry one row per (storm, station, hour); grid files one row
//! per (storm, cell, hour). Both hold the same nine raw model inputs, from
//! which the 11 model features are derived: wind direction becomes a
//! (sin, cos) pair and the timestamp becomes the cosine day-of-year term.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, TimeZone, Timelike, Utc};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowIssue};

/// Model features, in column order.
pub const FEATURE_NAMES: [&str; 11] = [
    "WS_10m",
    "WS_850mb",
    "WS_950mb",
    "PBLH",
    "Ustar",
    "WindDC_sin",
    "WindDC_cos",
    "Terrain_height",
    "Lapse_rate_sfc_1km",
    "Lapse_rate_sfc_2km",
    "yday",
];

/// Raw input columns shared by station and grid files.
pub const RAW_COLUMNS: [&str; 9] = [
    "WS_10m",
    "WS_850mb",
    "WS_950mb",
    "PBLH",
    "Ustar",
    "wind_dir_deg",
    "terrain_height_m",
    "lapse_sfc_1km",
    "lapse_sfc_2km",
];

pub const GUST_COLUMN: &str = "gust_obs";

/// Analysis window per storm, excluding spin-up.
pub const STORM_WINDOW_HOURS: i64 = 48;

const MAX_REPORTED_ISSUES: usize = 10;

/// `cos(2π(t−1)/365)` for day of year `t` in 1..=366.
pub fn day_of_year_cos(ts: &DateTime<Utc>) -> f64 {
    let t = ts.ordinal() as f64;
    (2.0 * std::f64::consts::PI * (t - 1.0) / 365.0).cos()
}

/// Meteorological direction (degrees, where the wind blows from) to `(sin θ, cos θ)`.
pub fn wind_direction_components(deg: f64) -> (f64, f64) {
    deg.to_radians().sin_cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawFeatures {
    pub ws_10m: f64,
    pub ws_850mb: f64,
    pub ws_950mb: f64,
    pub pblh: f64,
    pub ustar: f64,
    pub wind_dir_deg: f64,
    pub terrain_height_m: f64,
    pub lapse_sfc_1km: f64,
    pub lapse_sfc_2km: f64,
}

impl RawFeatures {
    fn from_slice(v: &[f64; 9]) -> Self {
        Self {
            ws_10m: v[0],
            ws_850mb: v[1],
            ws_950mb: v[2],
            pblh: v[3],
            ustar: v[4],
            wind_dir_deg: v[5],
            terrain_height_m: v[6],
            lapse_sfc_1km: v[7],
            lapse_sfc_2km: v[8],
        }
    }

    fn to_array(self) -> [f64; 9] {
        [
            self.ws_10m,
            self.ws_850mb,
            self.ws_950mb,
            self.pblh,
            self.ustar,
            self.wind_dir_deg,
            self.terrain_height_m,
            self.lapse_sfc_1km,
            self.lapse_sfc_2km,
        ]
    }

    /// The 11 model features in [`FEATURE_NAMES`] order.
    pub fn encode(&self, ts: &DateTime<Utc>) -> [f64; 11] {
        let (s, c) = wind_direction_components(self.wind_dir_deg);
        [
            self.ws_10m,
            self.ws_850mb,
            self.ws_950mb,
            self.pblh,
            self.ustar,
            s,
            c,
            self.terrain_height_m,
            self.lapse_sfc_1km,
            self.lapse_sfc_2km,
            day_of_year_cos(ts),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StormRecord {
    pub storm_id: String,
    pub timestamp: DateTime<Utc>,
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub raw: RawFeatures,
    pub gust: Option<f64>,
}

impl StormRecord {
    pub fn features(&self) -> [f64; 11] {
        self.raw.encode(&self.timestamp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRecord {
    pub storm_id: String,
    pub timestamp: DateTime<Utc>,
    pub row: usize,
    pub col: usize,
    pub lat: f64,
    pub lon: f64,
    pub raw: RawFeatures,
}

impl GridRecord {
    pub fn features(&self) -> [f64; 11] {
        self.raw.encode(&self.timestamp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Every row must carry a non-negative observed gust.
    Training,
    /// Target column and values are optional.
    Inference,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub mode: LoadMode,
    /// Reject rows more than this many hours after their storm's first row.
    pub storm_window_hours: Option<i64>,
}

impl LoadOptions {
    pub fn training() -> Self {
        Self {
            mode: LoadMode::Training,
            storm_window_hours: Some(STORM_WINDOW_HOURS),
        }
    }

    pub fn inference() -> Self {
        Self {
            mode: LoadMode::Inference,
            storm_window_hours: Some(STORM_WINDOW_HOURS),
        }
    }
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&t));
        }
    }
    None
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Collects row issues, keeping only the first few.
#[derive(Default)]
struct Issues {
    kept: Vec<RowIssue>,
    total: usize,
}

impl Issues {
    fn push(&mut self, line: u64, message: impl Into<String>) {
        self.total += 1;
        if self.kept.len() < MAX_REPORTED_ISSUES {
            self.kept.push(RowIssue {
                line,
                message: message.into(),
            });
        }
    }

    fn finish(self) -> Result<()> {
        if self.total == 0 {
            Ok(())
        } else {
            Err(Error::Ingest {
                issues: self.kept,
                total: self.total,
            })
        }
    }
}

/// Header layout resolved against the known schema.
struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn resolve(header: &csv::StringRecord, required: &[&str], optional: &[&str]) -> Result<Self> {
        let mut index = HashMap::new();
        let mut issues = Issues::default();
        for (i, name) in header.iter().enumerate() {
            let name = name.trim();
            if !required.contains(&name) && !optional.contains(&name) {
                issues.push(1, format!("unknown column '{name}'"));
            } else if index.insert(name.to_string(), i).is_some() {
                issues.push(1, format!("duplicate column '{name}'"));
            }
        }
        for name in required {
            if !index.contains_key(*name) {
                issues.push(1, format!("missing column '{name}'"));
            }
        }
        issues.finish()?;
        Ok(Self { index })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.index.get(name).and_then(|&i| rec.get(i)).map(str::trim)
    }
}

fn station_required() -> Vec<&'static str> {
    let mut v = vec!["storm_id", "timestamp_utc", "station_id", "lat", "lon"];
    v.extend_from_slice(&RAW_COLUMNS);
    v
}

fn grid_required() -> Vec<&'static str> {
    let mut v = vec!["storm_id", "timestamp_utc", "row", "col", "lat", "lon"];
    v.extend_from_slice(&RAW_COLUMNS);
    v
}

/// Parses the shared columns of one row. Returns `None` after logging issues.
fn parse_common(
    cols: &Columns,
    rec: &csv::StringRecord,
    line: u64,
    issues: &mut Issues,
) -> Option<(String, DateTime<Utc>, f64, f64, RawFeatures)> {
    let mut ok = true;
    let storm = cols.get(rec, "storm_id").unwrap_or("").to_string();
    if storm.is_empty() {
        issues.push(line, "empty storm_id");
        ok = false;
    }
    let ts_raw = cols.get(rec, "timestamp_utc").unwrap_or("");
    let ts = parse_timestamp(ts_raw);
    if ts.is_none() {
        issues.push(line, format!("unparsable timestamp_utc '{ts_raw}'"));
        ok = false;
    }
    let mut num = |name: &str| -> f64 {
        let s = cols.get(rec, name).unwrap_or("");
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                issues.push(line, format!("unparsable {name} '{s}'"));
                ok = false;
                f64::NAN
            }
        }
    };
    let lat = num("lat");
    let lon = num("lon");
    let mut raw = [0.0; 9];
    for (slot, name) in raw.iter_mut().zip(RAW_COLUMNS) {
        *slot = num(name);
    }
    if ok && !(0.0..=360.0).contains(&raw[5]) {
        issues.push(line, format!("wind_dir_deg {} outside [0, 360]", raw[5]));
        ok = false;
    }
    if ok {
        Some((storm, ts.unwrap(), lat, lon, RawFeatures::from_slice(&raw)))
    } else {
        None
    }
}

fn check_storm_windows<'a>(
    rows: impl Iterator<Item = (u64, &'a str, DateTime<Utc>)> + Clone,
    hours: i64,
    issues: &mut Issues,
) {
    let mut first: HashMap<&str, DateTime<Utc>> = HashMap::new();
    for (_, storm, ts) in rows.clone() {
        first
            .entry(storm)
            .and_modify(|t| *t = (*t).min(ts))
            .or_insert(ts);
    }
    for (line, storm, ts) in rows {
        if ts - first[storm] > Duration::hours(hours) {
            issues.push(
                line,
                format!("timestamp more than {hours} h after the start of storm {storm}"),
            );
        }
    }
}

pub fn read_records<R: Read>(reader: R, opts: LoadOptions) -> Result<Vec<StormRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols = Columns::resolve(&header, &station_required(), &[GUST_COLUMN])?;
    let has_gust = cols.index.contains_key(GUST_COLUMN);
    if opts.mode == LoadMode::Training && !has_gust {
        return Err(Error::Ingest {
            issues: vec![RowIssue {
                line: 1,
                message: format!("missing target column '{GUST_COLUMN}'"),
            }],
            total: 1,
        });
    }

    let mut issues = Issues::default();
    let mut out = Vec::new();
    let mut lines = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                issues.push(line, e.to_string());
                continue;
            }
        };
        let Some((storm_id, timestamp, lat, lon, raw)) = parse_common(&cols, &rec, line, &mut issues)
        else {
            continue;
        };
        let station_id = cols.get(&rec, "station_id").unwrap_or("").to_string();
        if station_id.is_empty() {
            issues.push(line, "empty station_id");
            continue;
        }
        let gust_raw = if has_gust { cols.get(&rec, GUST_COLUMN).unwrap_or("") } else { "" };
        let gust = if gust_raw.is_empty() {
            if opts.mode == LoadMode::Training {
                issues.push(line, "missing gust_obs");
                continue;
            }
            None
        } else {
            match gust_raw.parse::<f64>() {
                Ok(g) if g.is_finite() && g >= 0.0 => Some(g),
                Ok(g) if g.is_finite() => {
                    issues.push(line, format!("gust_obs {g} is negative"));
                    continue;
                }
                _ => {
                    issues.push(line, format!("unparsable gust_obs '{gust_raw}'"));
                    continue;
                }
            }
        };
        lines.push(line);
        out.push(StormRecord {
            storm_id,
            timestamp,
            station_id,
            lat,
            lon,
            raw,
            gust,
        });
    }
    if let Some(h) = opts.storm_window_hours {
        check_storm_windows(
            lines
                .iter()
                .zip(&out)
                .map(|(&l, r)| (l, r.storm_id.as_str(), r.timestamp)),
            h,
            &mut issues,
        );
    }
    issues.finish()?;
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Vec<StormRecord>> {
    read_records(std::fs::File::open(path)?, opts)
}

fn fmt_f(v: f64) -> String {
    // Display for f64 is shortest round-trip.
    format!("{v}")
}

pub fn write_records<W: Write>(writer: W, records: &[StormRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = station_required();
    header.push(GUST_COLUMN);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.storm_id.clone(),
            format_timestamp(&r.timestamp),
            r.station_id.clone(),
            fmt_f(r.lat),
            fmt_f(r.lon),
        ];
        row.extend(r.raw.to_array().iter().map(|&v| fmt_f(v)));
        row.push(r.gust.map(fmt_f).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid_records<R: Read>(reader: R, storm_window_hours: Option<i64>) -> Result<Vec<GridRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols = Columns::resolve(&header, &grid_required(), &[])?;
    let mut issues = Issues::default();
    let mut out = Vec::new();
    let mut lines = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                issues.push(line, e.to_string());
                continue;
            }
        };
        let Some((storm_id, timestamp, lat, lon, raw)) = parse_common(&cols, &rec, line, &mut issues)
        else {
            continue;
        };
        let idx = |name: &str, issues: &mut Issues| -> Option<usize> {
            let s = cols.get(&rec, name).unwrap_or("");
            s.parse::<usize>()
                .map_err(|_| issues.push(line, format!("unparsable {name} '{s}'")))
                .ok()
        };
        let (Some(row), Some(col)) = (idx("row", &mut issues), idx("col", &mut issues)) else {
            continue;
        };
        lines.push(line);
        out.push(GridRecord {
            storm_id,
            timestamp,
            row,
            col,
            lat,
            lon,
            raw,
        });
    }
    if let Some(h) = storm_window_hours {
        check_storm_windows(
            lines
                .iter()
                .zip(&out)
                .map(|(&l, r)| (l, r.storm_id.as_str(), r.timestamp)),
            h,
            &mut issues,
        );
    }
    issues.finish()?;
    Ok(out)
}

pub fn write_grid_records<W: Write>(writer: W, records: &[GridRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(grid_required())?;
    for r in records {
        let mut row = vec![
            r.storm_id.clone(),
            format_timestamp(&r.timestamp),
            r.row.to_string(),
            r.col.to_string(),
            fmt_f(r.lat),
            fmt_f(r.lon),
        ];
        row.extend(r.raw.to_array().iter().map(|&v| fmt_f(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Does the header look like a grid file (has row/col, no station_id)?
pub fn is_grid_header(header: &str) -> bool {
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    cols.contains(&"row") && cols.contains(&"col") && !cols.contains(&"station_id")
}

/// Feature matrix with aligned targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub features: Array2<f64>,
    pub targets: Array1<f64>,
    pub feature_names: Vec<String>,
}

impl Samples {
    pub fn new(features: Array2<f64>, targets: Array1<f64>, feature_names: Vec<String>) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::Dimension {
                context: "samples targets",
                expected: features.nrows(),
                found: targets.len(),
            });
        }
        if features.ncols() != feature_names.len() {
            return Err(Error::Dimension {
                context: "samples feature names",
                expected: features.ncols(),
                found: feature_names.len(),
            });
        }
        Ok(Self {
            features,
            targets,
            feature_names,
        })
    }

    /// Builds the 11-feature matrix; every record must have a target.
    pub fn from_records(records: &[StormRecord]) -> Result<Self> {
        let mut targets = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            targets.push(
                r.gust
                    .ok_or_else(|| Error::usage(format!("record {i} has no observed gust")))?,
            );
        }
        Ok(Self {
            features: feature_matrix(records.iter().map(StormRecord::features)),
            targets: Array1::from(targets),
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub fn feature_matrix(rows: impl Iterator<Item = [f64; 11]>) -> Array2<f64> {
    let flat: Vec<f64> = rows.flat_map(|r| r.into_iter()).collect();
    let n = flat.len() / FEATURE_NAMES.len();
    Array2::from_shape_vec((n, FEATURE_NAMES.len()), flat).expect("row-major 11-wide")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// Storm ids assigned to each split, in chronological order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ordered_storms: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct StormSplit {
    pub spec: SplitSpec,
    pub train: Vec<StormRecord>,
    pub validation: Vec<StormRecord>,
    pub test: Vec<StormRecord>,
}

/// Storms ordered by first timestamp, ties by storm id.
pub fn storms_by_start(records: &[StormRecord]) -> Vec<String> {
    let mut start: BTreeMap<&str, DateTime<Utc>> = BTreeMap::new();
    for r in records {
        start
            .entry(r.storm_id.as_str())
            .and_modify(|t| *t = (*t).min(r.timestamp))
            .or_insert(r.timestamp);
    }
    let mut storms: Vec<(&str, DateTime<Utc>)> = start.into_iter().collect();
    storms.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    storms.into_iter().map(|(s, _)| s.to_string()).collect()
}

/// Earliest storms train, the next validate, the latest test.
pub fn chronological_split(records: &[StormRecord], counts: SplitCounts) -> Result<StormSplit> {
    let ordered = storms_by_start(records);
    if counts.total() != ordered.len() {
        return Err(Error::usage(format!(
            "split counts {}/{}/{} sum to {}, but the data holds {} storms",
            counts.train,
            counts.validation,
            counts.test,
            counts.total(),
            ordered.len()
        )));
    }
    let train = ordered[..counts.train].to_vec();
    let validation = ordered[counts.train..counts.train + counts.validation].to_vec();
    let test = ordered[counts.train + counts.validation..].to_vec();

    let mut which: HashMap<&str, u8> = HashMap::new();
    for (k, ids) in [&train, &validation, &test].into_iter().enumerate() {
        for id in ids {
            let prev = which.insert(id.as_str(), k as u8);
            assert!(prev.is_none(), "storm {id} assigned to two splits");
        }
    }
    let mut parts: [Vec<StormRecord>; 3] = Default::default();
    for r in records {
        parts[which[r.storm_id.as_str()] as usize].push(r.clone());
    }
    let [tr, va, te] = parts;
    Ok(StormSplit {
        spec: SplitSpec {
            ordered_storms: ordered,
            train,
            validation,
            test,
        },
        train: tr,
        validation: va,
        test: te,
    })
}

/// Rotating train/validation folds over chronologically ordered storms:
/// fold `k` validates on storms `[k·v, (k+1)·v)` and trains on the rest.
pub fn rotation_folds(storms: &[String], n_folds: usize, val_per_fold: usize) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    if n_folds == 0 || val_per_fold == 0 || n_folds * val_per_fold > storms.len() {
        return Err(Error::usage(format!(
            "{n_folds} folds of {val_per_fold} validation storms need at least {} storms, have {}",
            n_folds * val_per_fold,
            storms.len()
        )));
    }
    Ok((0..n_folds)
        .map(|k| {
            let lo = k * val_per_fold;
            let hi = lo + val_per_fold;
            let val = storms[lo..hi].to_vec();
            let train = storms[..lo].iter().chain(&storms[hi..]).cloned().collect();
            (train, val)
        })
        .collect())
}

/// Per-column z-score fitted on the training split.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant columns get mean 0 and scale 1 so they pass through unchanged.
    pub fn fit(features: ArrayView2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::usage("cannot fit standardization on an empty set"));
        }
        let n = features.nrows() as f64;
        let mut mean = Vec::with_capacity(features.ncols());
        let mut scale = Vec::with_capacity(features.ncols());
        for (j, col) in features.axis_iter(Axis(1)).enumerate() {
            let m = col.sum() / n;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 && sd.is_finite() {
                mean.push(m);
                scale.push(sd);
            } else {
                log::warn!("feature column {j} is constant; passed through unscaled");
                mean.push(0.0);
                scale.push(1.0);
            }
        }
        Ok(Self { mean, scale })
    }

    pub fn is_fitted(&self) -> bool {
        !self.mean.is_empty()
    }

    pub fn apply(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if !self.is_fitted() {
            return Err(Error::usage("standardization applied before fitting"));
        }
        if features.ncols() != self.mean.len() {
            return Err(Error::Dimension {
                context: "standardization width",
                expected: self.mean.len(),
                found: features.ncols(),
            });
        }
        let mut out = features.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }
}

/// Hourly gust from 5-minute readings: the maximum of the :50 and :55
/// readings of the previous hour and the :00 reading of the hour itself.
/// Hours with none of those readings are omitted.
pub fn hourly_gust_from_five_minute(readings: &[(DateTime<Utc>, f64)]) -> Vec<(DateTime<Utc>, f64)> {
    let mut hours: BTreeMap<DateTime<Utc>, f64> = BTreeMap::new();
    for &(ts, v) in readings {
        if !v.is_finite() || ts.second() != 0 {
            continue;
        }
        let hour = match ts.minute() {
            0 => ts,
            50 | 55 => ts + Duration::minutes(60 - ts.minute() as i64),
            _ => continue,
        };
        hours
            .entry(hour)
            .and_modify(|m| *m = m.max(v))
            .or_insert(v);
    }
    hours.into_iter().collect()
}
