mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use evgust::data::format_timestamp;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn train_writes_artifacts_and_reloaded_model_reproduces_validation_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    let records = station_records(6, 8, 24, 11);
    write_station_csv(&data, &records);
    let out = train_small(dir.path(), &data, 3);
    for f in ["model.json", "epoch_log.csv", "validation_report.json", "validation_predictions.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("validation_report.json")).unwrap()).unwrap();
    assert_eq!(report["split"]["validation"], serde_json::json!(["S04"]));
    assert!(report["report"]["errors"]["mae"].as_f64().unwrap().is_finite());

    // the validation storm alone, predicted by the reloaded artifact
    let val: Vec<_> = records.iter().filter(|r| r.storm_id == "S04").cloned().collect();
    let vdata = dir.path().join("val.csv");
    write_station_csv(&vdata, &val);
    let pout = dir.path().join("pred");
    ok(&["predict", "--data", p(&vdata), "--model", p(&out.join("model.json")), "--out", p(&pout)]);
    assert_eq!(
        std::fs::read(out.join("validation_predictions.csv")).unwrap(),
        std::fs::read(pout.join("predictions.csv")).unwrap()
    );
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(6, 5, 12, 2));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "train", "--data", p(&data), "--out", p(out), "--seed", "9", "--hidden", "8",
            "--max-epochs", "5", "--train-storms", "4", "--val-storms", "1",
        ]);
    }
    for f in ["model.json", "epoch_log.csv", "validation_report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    ok(&[
        "train", "--data", p(&data), "--out", p(&c), "--seed", "10", "--hidden", "8",
        "--max-epochs", "5", "--train-storms", "4", "--val-storms", "1",
    ]);
    assert_ne!(std::fs::read(a.join("model.json")).unwrap(), std::fs::read(c.join("model.json")).unwrap());
}

#[test]
fn missing_target_column_is_an_ingest_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(3, 2, 4, 1));
    let text = std::fs::read_to_string(&data).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    assert!(!stripped.lines().next().unwrap().contains("gust_obs"));
    std::fs::write(&data, stripped).unwrap();
    let out = run(&["train", "--data", p(&data), "--out", p(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[ingest]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn errors_are_one_line_with_a_class() {
    let out = run(&["train"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end(), "error[usage]: usage: --data is required");

    let out = run(&["predict", "--data", "/nonexistent.csv", "--model", "/nope.json"]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[usage]: "));

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[usage]: ") && err.trim_end().lines().count() == 1, "{err}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(3, 3, 6, 4));
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "data = \"{}\"\nlambda = 0.25\npatience = 2\nmax_epochs = 3\nhidden = [4]\ntrain_storms = 1\nval_storms = 1\ntest_storms = 1\n",
            data.display()
        ),
    )
    .unwrap();
    let out = dir.path().join("o");
    ok(&["train", "--config", p(&cfg), "--out", p(&out), "--lambda", "0.05"]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(m["train_config"]["lambda"], 0.05);
    assert_eq!(m["train_config"]["patience"], 2);
    assert_eq!(m["arch"]["hidden"], serde_json::json!([4]));

    std::fs::write(&cfg, "lamda = 1\n").unwrap();
    let bad = run(&["train", "--config", p(&cfg)]);
    assert!(String::from_utf8(bad.stderr).unwrap().starts_with("error[config]: "));
}

#[test]
fn predict_masks_and_builds_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(6, 6, 20, 5));
    let trained = train_small(dir.path(), &data, 1);
    let out = dir.path().join("pred");
    ok(&[
        "predict", "--data", p(&data), "--model", p(&trained.join("model.json")), "--out", p(&out),
        "--levels", "0.70,0.95", "--mask-percentile", "95",
    ]);
    let c = Csv::read(&out.join("predictions.csv"));
    let n = c.rows.len() as f64;
    let flagged = c.floats("flagged").iter().sum::<f64>();
    assert!(flagged / n <= 0.05 + 1.0 / n, "flagged {flagged} of {n}");
    let (lo, hi, sd) = (c.floats("lower_95"), c.floats("upper_95"), c.floats("total_sd"));
    for i in 0..lo.len() {
        let w = hi[i] - lo[i];
        assert!((w - 2.0 * 1.96 * sd[i]).abs() <= 1e-12 * (1.0 + w), "row {i}");
    }
    assert!(c.header.contains(&"upper_70".to_string()) && !c.header.contains(&"upper_90".to_string()));
}

#[test]
fn schema_mismatch_reports_feature_diff() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(6, 4, 10, 6));
    let trained = train_small(dir.path(), &data, 1);
    let model = trained.join("model.json");
    let text = std::fs::read_to_string(&model).unwrap().replace("\"Ustar\"", "\"CAPE\"");
    std::fs::write(&model, text).unwrap();
    let out = run(&["predict", "--data", p(&data), "--model", p(&model), "--out", p(&dir.path().join("p"))]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[usage]: ") && err.contains("missing [CAPE]"), "{err}");
}

#[test]
fn one_feature_model_trains_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(6, 5, 12, 8));
    let out = dir.path().join("o");
    ok(&[
        "train", "--data", p(&data), "--out", p(&out), "--features", "WS_10m", "--hidden", "8",
        "--max-epochs", "10", "--train-storms", "4", "--val-storms", "1",
    ]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(m["feature_names"], serde_json::json!(["WS_10m"]));
    ok(&["predict", "--data", p(&data), "--model", p(&out.join("model.json")), "--out", p(&out)]);
}

#[test]
fn constant_grid_gives_constant_mean_and_zero_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(6, 4, 10, 7));
    let trained = train_small(dir.path(), &data, 2);
    let grid = dir.path().join("grid.csv");
    write_grid_csv(&grid, &grid_records(4, 5, 2, |_, _, _| 8.0));
    let out = dir.path().join("g");
    ok(&["predict", "--data", p(&grid), "--model", p(&trained.join("model.json")), "--out", p(&out)]);
    let preds = Csv::read(&out.join("grid_predictions.csv"));
    let means = preds.floats("mean");
    assert_eq!(means.len(), 40);
    // rows within one hour share every feature
    for h in 0..2 {
        let hour = &means[h * 20..(h + 1) * 20];
        assert!(hour.iter().all(|m| m.to_bits() == hour[0].to_bits()));
    }
    let fields = Csv::read(&out.join("grid_fields.csv"));
    assert!(fields.floats("mean_gradient").iter().all(|g| *g == 0.0));
    let c = fields.col("mean_normalized");
    assert!(fields.rows.iter().all(|r| r[c].is_empty()));
}

#[test]
fn grid_gradient_of_varying_wind() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(6, 4, 10, 7));
    let trained = train_small(dir.path(), &data, 2);
    let grid = dir.path().join("grid.csv");
    write_grid_csv(&grid, &grid_records(5, 5, 3, |h, i, j| 3.0 + i as f64 + 0.5 * j as f64 + h as f64));
    let out = dir.path().join("g");
    ok(&["predict", "--data", p(&grid), "--model", p(&trained.join("model.json")), "--out", p(&out)]);
    let fields = Csv::read(&out.join("grid_fields.csv"));
    assert_eq!(fields.rows.len(), 75);
    let norm = fields.floats("WS_10m_normalized");
    assert!(norm.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(norm.iter().filter(|v| **v == 1.0).count(), 3);
    let up = fields.floats("upper_95_normalized");
    assert!(up.iter().all(|v| (0.0..=1.0).contains(v)));
}

fn write_predictions(path: &std::path::Path, rows: &[(String, String, f64, f64)]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["storm_id", "station_id", "timestamp", "mean", "aleatoric_sd", "epistemic_sd", "total_sd", "flagged"])
        .unwrap();
    for (st, ts, m, s) in rows {
        let a = s / 2f64.sqrt();
        w.write_record(["X", st, ts, &m.to_string(), &a.to_string(), &a.to_string(), &s.to_string(), "0"])
            .unwrap();
    }
    w.flush().unwrap();
}

#[test]
fn evaluate_perfect_predictions_cover_everything() {
    let dir = tempfile::tempdir().unwrap();
    let records = station_records(2, 5, 6, 3);
    let data = dir.path().join("obs.csv");
    write_station_csv(&data, &records);
    let preds = dir.path().join("pred.csv");
    let rows: Vec<_> = records
        .iter()
        .map(|r| (r.station_id.clone(), format_timestamp(&r.timestamp), r.gust.unwrap(), 0.5))
        .collect();
    write_predictions(&preds, &rows);
    let out = dir.path().join("e");
    ok(&["evaluate", "--predictions", p(&preds), "--data", p(&data), "--out", p(&out), "--spread-bins", "5"]);
    let c = Csv::read(&out.join("picp_by_station.csv"));
    assert_eq!(c.rows.len(), 5 * 4);
    assert!(c.floats("picp").iter().all(|v| *v == 1.0));
    let stations: BTreeSet<&String> = c.rows.iter().map(|r| &r[0]).collect();
    assert_eq!(stations.len(), 5);
    let mut per: BTreeMap<&String, usize> = BTreeMap::new();
    for r in &c.rows {
        *per.entry(&r[0]).or_default() += 1;
    }
    assert!(per.values().all(|&k| k == 4));
    for f in ["eval_report.json", "discard_fraction.csv", "spread_skill.csv", "pit_histogram.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(Csv::read(&out.join("pit_histogram.csv")).rows.len(), 30);
}

#[test]
fn evaluate_monte_carlo_calibrated_picp() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = station_records(10, 50, 40, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut rows = Vec::new();
    for (i, r) in records.iter_mut().enumerate() {
        let mean = 12.0 + (i % 17) as f64;
        let sd = 0.5 + (i % 7) as f64 * 0.3;
        r.gust = Some(mean + Normal::new(0.0, sd).unwrap().sample(&mut rng));
        rows.push((r.station_id.clone(), format_timestamp(&r.timestamp), mean, sd));
    }
    let data = dir.path().join("obs.csv");
    write_station_csv(&data, &records);
    let preds = dir.path().join("pred.csv");
    write_predictions(&preds, &rows);
    let out = dir.path().join("e");
    ok(&["evaluate", "--predictions", p(&preds), "--data", p(&data), "--out", p(&out), "--levels", "0.95"]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("eval_report.json")).unwrap()).unwrap();
    let picp = report["picp"][0]["picp"].as_f64().unwrap();
    assert_eq!(report["n"], 20000);
    assert!((picp - 0.95).abs() <= 0.01, "picp {picp}");
}

#[test]
fn evaluate_empty_join_lists_keys() {
    let dir = tempfile::tempdir().unwrap();
    let records = station_records(1, 2, 2, 3);
    let data = dir.path().join("obs.csv");
    write_station_csv(&data, &records);
    let preds = dir.path().join("pred.csv");
    write_predictions(&preds, &[("NOPE".into(), "2020-10-01T00:00:00Z".into(), 1.0, 1.0)]);
    let out = run(&["evaluate", "--predictions", p(&preds), "--data", p(&data), "--out", p(&dir.path().join("e"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[usage]: "), "{err}");
    assert!(err.contains("(NOPE, 2020-10-01T00:00:00Z)") && err.contains("(ST000, 2020-10-01T00:00:00Z)"), "{err}");
}

fn write_spatial(path: &std::path::Path, hours: usize, ws: impl Fn(usize, usize, usize) -> f64, sd: impl Fn(usize, usize, usize) -> f64) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["timestamp", "row", "col", "lat", "lon", "WS_10m", "total_sd"]).unwrap();
    for h in 0..hours {
        for i in 0..6 {
            for j in 0..6 {
                w.write_record([
                    format!("2021-01-01T{h:02}:00:00Z"),
                    i.to_string(),
                    j.to_string(),
                    (40.0 + i as f64).to_string(),
                    (-75.0 + j as f64).to_string(),
                    ws(h, i, j).to_string(),
                    sd(h, i, j).to_string(),
                ])
                .unwrap();
            }
        }
    }
    w.flush().unwrap();
}

fn bump(h: usize, i: usize, j: usize, di: usize) -> f64 {
    // single peak at (h % 3 + di, h % 4), scaled by hour
    let (pi, pj) = ((h % 3 + di) as f64, (h % 4) as f64);
    (1.0 + h as f64) * (-((i as f64 - pi).powi(2) + (j as f64 - pj).powi(2))).exp()
}

fn alignment(out: &std::path::Path) -> f64 {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("alignment.json")).unwrap()).unwrap();
    v["fraction"].as_f64().unwrap()
}

#[test]
fn spatial_alignment_of_copies_and_shifted_copies() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("grid.csv");
    write_spatial(&f, 8, |h, i, j| bump(h, i, j, 0), |h, i, j| bump(h, i, j, 0));
    let out = dir.path().join("s");
    ok(&["spatial", "--predictions", p(&f), "--out", p(&out), "--align-k", "0"]);
    assert_eq!(alignment(&out), 1.0);

    let series = Csv::read(&out.join("normalized_series.csv"));
    let raw = series.floats("WS_10m_max");
    let norm = series.floats("WS_10m_max_normalized");
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    assert_eq!(argmax(&raw), argmax(&norm));
    assert_eq!(Csv::read(&out.join("spatial_max_tracks.csv")).rows.len(), 16);

    write_spatial(&f, 8, |h, i, j| bump(h, i, j, 0), |h, i, j| bump(h, i, j, 2));
    ok(&["spatial", "--predictions", p(&f), "--out", p(&out), "--align-k", "1"]);
    assert_eq!(alignment(&out), 0.0);
    ok(&["spatial", "--predictions", p(&f), "--out", p(&out), "--align-k", "2"]);
    assert_eq!(alignment(&out), 1.0);
}

#[test]
fn spatial_without_total_sd_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("grid.csv");
    std::fs::write(&f, "timestamp,row,col,lat,lon,WS_10m\n2021-01-01T00:00:00Z,0,0,40,-75,3\n").unwrap();
    let out = run(&["spatial", "--predictions", p(&f), "--out", p(&dir.path().join("s"))]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[usage]: ") && err.contains("total_sd"), "{err}");
}

#[test]
fn spatial_accepts_predict_grid_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(6, 4, 10, 7));
    let trained = train_small(dir.path(), &data, 2);
    let grid = dir.path().join("grid.csv");
    write_grid_csv(&grid, &grid_records(4, 4, 3, |h, i, j| 2.0 + (i * 4 + j + h) as f64));
    let out = dir.path().join("g");
    ok(&["predict", "--data", p(&grid), "--model", p(&trained.join("model.json")), "--out", p(&out)]);
    ok(&["spatial", "--predictions", p(&out.join("grid_predictions.csv")), "--out", p(&out), "--align-k", "1"]);
    let f = alignment(&out);
    assert!((0.0..=1.0).contains(&f));
}

#[test]
fn explain_writes_pfi_and_pdp() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(6, 6, 12, 9));
    let trained = train_small(dir.path(), &data, 4);
    let out = dir.path().join("x");
    ok(&[
        "explain", "--data", p(&data), "--model", p(&trained.join("model.json")), "--out", p(&out),
        "--shuffles", "3", "--pdp-points", "7",
    ]);
    let pfi = Csv::read(&out.join("pfi.csv"));
    assert_eq!(pfi.rows.len(), 12);
    let rank_col = pfi.col("rank");
    let top = pfi.rows.iter().find(|r| r[rank_col] == "1").unwrap();
    assert_eq!(top[0], "WS_10m");
    let pdp = Csv::read(&out.join("pdp.csv"));
    assert_eq!(pdp.rows.len(), 11 * 7);
}

#[test]
fn tune_writes_log_and_pareto_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    write_station_csv(&data, &station_records(4, 4, 8, 12));
    let out = dir.path().join("t");
    let args = |n: &'static str| {
        vec![
            "tune".to_string(), "--data".into(), p(&data).into(), "--out".into(), p(&out).into(),
            "--trials".into(), n.into(), "--max-epochs".into(), "2".into(), "--seed".into(), "5".into(),
            "--train-storms".into(), "2".into(), "--val-storms".into(), "1".into(),
        ]
    };
    let a: Vec<String> = args("3");
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let first = Csv::read(&out.join("trials_log.csv"));
    assert_eq!(first.rows.len(), 3);
    let a: Vec<String> = args("4");
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let second = Csv::read(&out.join("trials_log.csv"));
    assert_eq!(second.rows.len(), 4);
    assert_eq!(second.rows[..3], first.rows[..]);
    let pareto: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("pareto.json")).unwrap()).unwrap();
    assert_eq!(pareto["trials"], 4);
    assert!(!pareto["pareto"].as_array().unwrap().is_empty());
}
