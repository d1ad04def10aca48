//! Gridded post-processing on regular lat/lon rasters.
//!
//! Distances are measured in degrees, so gradients carry units of the
//! field per degree and depend on the grid convention.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{format_timestamp, parse_timestamp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    /// Latitude of each row, strictly monotone.
    pub lats: Vec<f64>,
    /// Longitude of each column, strictly monotone.
    pub lons: Vec<f64>,
    pub values: Array2<f64>,
    /// `true` marks a usable cell. `None` means all cells are valid.
    pub valid: Option<Array2<bool>>,
}

fn strictly_monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1]) || v.windows(2).all(|w| w[0] > w[1])
}

impl GridField {
    pub fn new(lats: Vec<f64>, lons: Vec<f64>, values: Array2<f64>, valid: Option<Array2<bool>>) -> Result<Self> {
        if values.nrows() != lats.len() {
            return Err(Error::Dimension {
                context: "grid rows",
                expected: lats.len(),
                found: values.nrows(),
            });
        }
        if values.ncols() != lons.len() {
            return Err(Error::Dimension {
                context: "grid columns",
                expected: lons.len(),
                found: values.ncols(),
            });
        }
        if let Some(m) = &valid {
            if m.raw_dim() != values.raw_dim() {
                return Err(Error::usage("grid mask shape differs from values"));
            }
        }
        if !strictly_monotone(&lats) || !strictly_monotone(&lons) {
            return Err(Error::usage("grid axes must be strictly monotone"));
        }
        Ok(Self {
            lats,
            lons,
            values,
            valid,
        })
    }

    /// Regular grid starting at `(lat0, lon0)` with the given spacing.
    pub fn regular(lat0: f64, lon0: f64, dlat: f64, dlon: f64, values: Array2<f64>) -> Result<Self> {
        let lats = (0..values.nrows()).map(|i| lat0 + i as f64 * dlat).collect();
        let lons = (0..values.ncols()).map(|j| lon0 + j as f64 * dlon).collect();
        Self::new(lats, lons, values, None)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Valid and holding a finite value.
    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.valid.as_ref().is_none_or(|m| m[[r, c]]) && self.values[[r, c]].is_finite()
    }

    pub fn with_values(&self, values: Array2<f64>, valid: Option<Array2<bool>>) -> Self {
        Self {
            lats: self.lats.clone(),
            lons: self.lons.clone(),
            values,
            valid,
        }
    }

    fn valid_cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let (rows, cols) = self.shape();
        (0..rows)
            .flat_map(move |r| (0..cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.is_valid(r, c))
            .map(|(r, c)| (r, c, self.values[[r, c]]))
    }

    /// Builds a field from indexed cells; missing cells are masked. The lat of
    /// a row and the lon of a column come from the first cell seen there.
    pub fn from_cells(cells: impl IntoIterator<Item = (usize, usize, f64, f64, f64)>) -> Result<Self> {
        let cells: Vec<_> = cells.into_iter().collect();
        if cells.is_empty() {
            return Err(Error::usage("no grid cells"));
        }
        let rows = cells.iter().map(|c| c.0).max().unwrap() + 1;
        let cols = cells.iter().map(|c| c.1).max().unwrap() + 1;
        let mut lats = vec![f64::NAN; rows];
        let mut lons = vec![f64::NAN; cols];
        let mut values = Array2::from_elem((rows, cols), f64::NAN);
        let mut valid = Array2::from_elem((rows, cols), false);
        for &(r, c, lat, lon, v) in &cells {
            if lats[r].is_nan() {
                lats[r] = lat;
            }
            if lons[c].is_nan() {
                lons[c] = lon;
            }
            values[[r, c]] = v;
            valid[[r, c]] = v.is_finite();
        }
        if lats.iter().chain(&lons).any(|v| v.is_nan()) {
            return Err(Error::usage("grid has a row or column without any cell"));
        }
        let all_valid = valid.iter().all(|&b| b);
        Self::new(lats, lons, values, (!all_valid).then_some(valid))
    }
}

/// Mean over the four nearest neighbours of `|ΔG| / ‖ΔS‖₂`, with `ΔS` in
/// degrees. Edge cells average over the neighbours that exist; a cell with
/// no valid neighbour, or masked itself, is masked in the output.
pub fn spatial_gradient(field: &GridField) -> Result<GridField> {
    let (rows, cols) = field.shape();
    if rows < 2 || cols < 2 {
        return Err(Error::usage(format!("gradient needs a grid of at least 2x2, got {rows}x{cols}")));
    }
    let mut out = Array2::from_elem((rows, cols), f64::NAN);
    let mut valid = Array2::from_elem((rows, cols), false);
    for r in 0..rows {
        for c in 0..cols {
            if !field.is_valid(r, c) {
                continue;
            }
            let g = field.values[[r, c]];
            let neighbours = [
                (r.checked_sub(1), Some(c)),
                ((r + 1 < rows).then_some(r + 1), Some(c)),
                (Some(r), c.checked_sub(1)),
                (Some(r), (c + 1 < cols).then_some(c + 1)),
            ];
            let (mut sum, mut count) = (0.0, 0usize);
            for (nr, nc) in neighbours {
                let (Some(nr), Some(nc)) = (nr, nc) else { continue };
                if !field.is_valid(nr, nc) {
                    continue;
                }
                let dlat = field.lats[nr] - field.lats[r];
                let dlon = field.lons[nc] - field.lons[c];
                let dist = (dlon * dlon + dlat * dlat).sqrt();
                sum += (field.values[[nr, nc]] - g).abs() / dist;
                count += 1;
            }
            if count > 0 {
                out[[r, c]] = sum / count as f64;
                valid[[r, c]] = true;
            }
        }
    }
    let all_valid = valid.iter().all(|&b| b);
    Ok(field.with_values(out, (!all_valid).then_some(valid)))
}

/// `(v − min) / (max − min)`.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = finite_range(values.iter().copied())?;
    Ok(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Normalizes the valid cells of a field; masked cells are left as they are.
pub fn minmax_normalize_field(field: &GridField) -> Result<GridField> {
    let (lo, hi) = finite_range(field.valid_cells().map(|(_, _, v)| v))?;
    let mut out = field.values.clone();
    for (r, c, v) in field.valid_cells() {
        out[[r, c]] = (v - lo) / (hi - lo);
    }
    Ok(field.with_values(out, field.valid.clone()))
}

fn finite_range(values: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("min-max normalization input".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Err(Error::usage("min-max normalization of an empty input"));
    }
    if lo == hi {
        return Err(Error::usage(format!(
            "min-max normalization of a constant input (all values {lo}) divides by zero"
        )));
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialMax {
    /// Index into the input time series.
    pub step: usize,
    pub value: f64,
    pub row: usize,
    pub col: usize,
    pub lat: f64,
    pub lon: f64,
}

/// Largest valid cell of one field; ties resolve to the first in row-major order.
pub fn field_max(field: &GridField, step: usize) -> Option<SpatialMax> {
    let mut best: Option<SpatialMax> = None;
    for (r, c, v) in field.valid_cells() {
        if best.is_none_or(|b| v > b.value) {
            best = Some(SpatialMax {
                step,
                value: v,
                row: r,
                col: c,
                lat: field.lats[r],
                lon: field.lons[c],
            });
        }
    }
    best
}

/// Per time step maximum; fully masked steps are skipped.
pub fn track_spatial_max(fields: &[GridField]) -> Result<Vec<SpatialMax>> {
    if fields.is_empty() {
        return Err(Error::usage("no time steps to track"));
    }
    Ok(fields
        .iter()
        .enumerate()
        .filter_map(|(t, f)| {
            let m = field_max(f, t);
            if m.is_none() {
                log::warn!("time step {t} is fully masked; skipped");
            }
            m
        })
        .collect())
}

/// Fraction of shared time steps where the two maxima lie within `k` cells
/// of each other (Chebyshev distance on grid indices). `None` when the
/// tracks share no step.
pub fn alignment_fraction(a: &[SpatialMax], b: &[SpatialMax], k: usize) -> Option<f64> {
    let bm: BTreeMap<usize, &SpatialMax> = b.iter().map(|m| (m.step, m)).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for x in a {
        if let Some(y) = bm.get(&x.step) {
            total += 1;
            if x.row.abs_diff(y.row).max(x.col.abs_diff(y.col)) <= k {
                hits += 1;
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub elevation_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationValue {
    pub station_id: String,
    pub value: f64,
    /// Set when an enclosing cell was masked and the nearest valid cell was used.
    pub fallback: bool,
}

/// Lower index and fractional position of `x` along a monotone axis.
fn locate(axis: &[f64], x: f64) -> Option<(usize, f64)> {
    let n = axis.len();
    if n < 2 {
        return None;
    }
    let ascending = axis[1] > axis[0];
    let (lo, hi) = if ascending {
        (axis[0], axis[n - 1])
    } else {
        (axis[n - 1], axis[0])
    };
    if !(x >= lo && x <= hi) {
        return None;
    }
    // first index whose successor is beyond x
    let mut i = if ascending {
        axis.partition_point(|&a| a <= x)
    } else {
        axis.partition_point(|&a| a >= x)
    };
    i = i.saturating_sub(1).min(n - 2);
    let t = (x - axis[i]) / (axis[i + 1] - axis[i]);
    Some((i, t))
}

/// Bilinear interpolation at one point.
pub fn bilinear_at(field: &GridField, lat: f64, lon: f64) -> Result<(f64, bool)> {
    let (Some((r, tr)), Some((c, tc))) = (locate(&field.lats, lat), locate(&field.lons, lon)) else {
        return Err(Error::domain(format!("point ({lat}, {lon}) outside the grid")));
    };
    let corners = [(r, c), (r + 1, c), (r, c + 1), (r + 1, c + 1)];
    if corners.iter().all(|&(a, b)| field.is_valid(a, b)) {
        let v = &field.values;
        let value = (1.0 - tr) * (1.0 - tc) * v[[r, c]]
            + tr * (1.0 - tc) * v[[r + 1, c]]
            + (1.0 - tr) * tc * v[[r, c + 1]]
            + tr * tc * v[[r + 1, c + 1]];
        return Ok((value, false));
    }
    let nearest = field
        .valid_cells()
        .map(|(a, b, v)| {
            let d = (field.lats[a] - lat).powi(2) + (field.lons[b] - lon).powi(2);
            (d, v)
        })
        .min_by(|x, y| x.0.total_cmp(&y.0));
    match nearest {
        Some((_, v)) => Ok((v, true)),
        None => Err(Error::domain("grid has no valid cell")),
    }
}

/// Interpolates the field to every station; stations outside the grid get
/// their own error rather than failing the batch.
pub fn bilinear_to_stations(field: &GridField, stations: &[Station]) -> Vec<Result<StationValue>> {
    stations
        .iter()
        .map(|s| {
            bilinear_at(field, s.lat, s.lon)
                .map(|(value, fallback)| StationValue {
                    station_id: s.id.clone(),
                    value,
                    fallback,
                })
                .map_err(|e| Error::domain(format!("station {}: {e}", s.id)))
        })
        .collect()
}

/// A time-indexed sequence of fields on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    pub times: Vec<DateTime<Utc>>,
    pub fields: Vec<GridField>,
}

/// Writes `time,lat,lon,<value_name>` rows, one per valid cell per step.
pub fn write_long_csv<W: Write>(writer: W, series: &FieldSeries, value_name: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "lat", "lon", value_name])?;
    for (t, f) in series.times.iter().zip(&series.fields) {
        let ts = format_timestamp(t);
        for (r, c, v) in f.valid_cells() {
            w.write_record([
                ts.clone(),
                f.lats[r].to_string(),
                f.lons[c].to_string(),
                v.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads long-format rows back into one field per distinct time; the grid
/// axes are the sorted distinct coordinates and absent cells are masked.
pub fn read_long_csv<R: Read>(reader: R) -> Result<FieldSeries> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() != 4 || &header[0] != "time" || &header[1] != "lat" || &header[2] != "lon" {
        return Err(Error::usage("grid file header must be time,lat,lon,<value>"));
    }
    let mut rows: Vec<(DateTime<Utc>, f64, f64, f64)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let t = parse_timestamp(&rec[0]).ok_or_else(|| Error::usage(format!("line {line}: bad time")))?;
        let num = |k: usize| {
            rec[k]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::usage(format!("line {line}: bad number '{}'", &rec[k])))
        };
        rows.push((t, num(1)?, num(2)?, num(3)?));
    }
    let mut lats: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut lons: Vec<f64> = rows.iter().map(|r| r.2).collect();
    for axis in [&mut lats, &mut lons] {
        axis.sort_by(f64::total_cmp);
        axis.dedup();
    }
    let mut by_time: BTreeMap<DateTime<Utc>, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for (t, la, lo, v) in rows {
        by_time.entry(t).or_default().push((la, lo, v));
    }
    let mut series = FieldSeries {
        times: Vec::new(),
        fields: Vec::new(),
    };
    for (t, cells) in by_time {
        let mut values = Array2::from_elem((lats.len(), lons.len()), f64::NAN);
        let mut valid = Array2::from_elem((lats.len(), lons.len()), false);
        for (la, lo, v) in cells {
            let r = lats.partition_point(|&a| a < la);
            let c = lons.partition_point(|&a| a < lo);
            values[[r, c]] = v;
            valid[[r, c]] = v.is_finite();
        }
        let all = valid.iter().all(|&b| b);
        series.times.push(t);
        series
            .fields
            .push(GridField::new(lats.clone(), lons.clone(), values, (!all).then_some(valid))?);
    }
    Ok(series)
}
