#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::{Duration, TimeZone, Utc};
use evgust::data::{write_grid_records, write_records, GridRecord, RawFeatures, StormRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evgust"))
}

pub fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

pub fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "evgust {args:?} failed");
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn raw<R: Rng>(r: &mut R) -> RawFeatures {
    RawFeatures {
        ws_10m: r.random_range(1.0..15.0),
        ws_850mb: r.random_range(5.0..40.0),
        ws_950mb: r.random_range(3.0..30.0),
        pblh: r.random_range(100.0..2000.0),
        ustar: r.random_range(0.1..1.2),
        wind_dir_deg: r.random_range(0.0..360.0),
        terrain_height_m: r.random_range(0.0..800.0),
        lapse_sfc_1km: r.random_range(-9.0..-3.0),
        lapse_sfc_2km: r.random_range(-8.0..-4.0),
    }
}

/// Gust mostly driven by surface wind and friction velocity, with noise
/// growing with wind speed.
pub fn gust<R: Rng>(f: &RawFeatures, r: &mut R) -> f64 {
    let m = 1.4 * f.ws_10m + 4.0 * f.ustar + 0.05 * f.ws_850mb;
    let sd = 0.3 + 0.08 * f.ws_10m;
    (m + Normal::new(0.0, sd).unwrap().sample(r)).max(0.0)
}

/// `storms` storms, one day apart in start time, `hours` hourly steps at
/// `stations` stations each.
pub fn station_records(storms: usize, stations: usize, hours: usize, seed: u64) -> Vec<StormRecord> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(f64, f64)> = (0..stations)
        .map(|_| (r.random_range(40.0..45.0), r.random_range(-79.0..-72.0)))
        .collect();
    let t0 = Utc.with_ymd_and_hms(2020, 10, 1, 0, 0, 0).unwrap();
    let mut out = Vec::new();
    for s in 0..storms {
        let start = t0 + Duration::days(3 * s as i64);
        for h in 0..hours {
            for (k, &(lat, lon)) in coords.iter().enumerate() {
                let f = raw(&mut r);
                out.push(StormRecord {
                    storm_id: format!("S{s:02}"),
                    timestamp: start + Duration::hours(h as i64),
                    station_id: format!("ST{k:03}"),
                    lat,
                    lon,
                    raw: f,
                    gust: Some(gust(&f, &mut r)),
                });
            }
        }
    }
    out
}

pub fn write_station_csv(path: &Path, records: &[StormRecord]) {
    write_records(std::fs::File::create(path).unwrap(), records).unwrap();
}

/// Regular grid; `ws` gives the surface wind at `(hour, row, col)`.
pub fn grid_records(rows: usize, cols: usize, hours: usize, ws: impl Fn(usize, usize, usize) -> f64) -> Vec<GridRecord> {
    let t0 = Utc.with_ymd_and_hms(2020, 10, 1, 0, 0, 0).unwrap();
    let mut out = Vec::new();
    for h in 0..hours {
        for i in 0..rows {
            for j in 0..cols {
                out.push(GridRecord {
                    storm_id: "G".into(),
                    timestamp: t0 + Duration::hours(h as i64),
                    row: i,
                    col: j,
                    lat: 40.0 + 0.5 * i as f64,
                    lon: -78.0 + 0.5 * j as f64,
                    raw: RawFeatures {
                        ws_10m: ws(h, i, j),
                        ws_850mb: 20.0,
                        ws_950mb: 15.0,
                        pblh: 800.0,
                        ustar: 0.5,
                        wind_dir_deg: 225.0,
                        terrain_height_m: 100.0,
                        lapse_sfc_1km: -6.5,
                        lapse_sfc_2km: -6.0,
                    },
                });
            }
        }
    }
    out
}

pub fn write_grid_csv(path: &Path, records: &[GridRecord]) {
    write_grid_records(std::fs::File::create(path).unwrap(), records).unwrap();
}

pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn read(path: &Path) -> Self {
        let mut r = csv::Reader::from_path(path).unwrap();
        let header = r.headers().unwrap().iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|x| x.unwrap().iter().map(String::from).collect())
            .collect();
        Self { header, rows }
    }

    pub fn col(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
    }

    pub fn floats(&self, name: &str) -> Vec<f64> {
        let c = self.col(name);
        self.rows.iter().map(|r| r[c].parse().unwrap()).collect()
    }
}

/// Small training run; returns the output directory.
pub fn train_small(dir: &Path, data: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("train_{seed}"));
    ok(&[
        "train", "--data", p(data), "--out", p(&out), "--seed", &seed.to_string(),
        "--train-storms", "4", "--val-storms", "1", "--test-storms", "1",
        "--hidden", "16,16", "--max-epochs", "15", "--patience", "5", "--lambda", "0.01",
        "--batch-size", "32",
    ]);
    out
}
