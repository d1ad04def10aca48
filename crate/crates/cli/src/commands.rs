use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::Serialize;

use evgust::artifact::{load_model, write_model};
use evgust::data::{
    chronological_split, feature_matrix, format_timestamp, is_grid_header, load_records,
    parse_timestamp, read_grid_records, storms_by_start, GridRecord, LoadOptions, Samples,
    SplitSpec, StormRecord, FEATURE_NAMES, STORM_WINDOW_HOURS,
};
use evgust::evidential::{train_evidential, EvidentialModel, UncertaintyDecomposition};
use evgust::metrics::{evaluate, mask_highly_uncertain, picp, EvalReport, PredictionWithUQ};
use evgust::spatial::{
    alignment_fraction, minmax_normalize, minmax_normalize_field, spatial_gradient,
    track_spatial_max, GridField, SpatialMax,
};
use evgust::tune::{
    evidential_objective, read_trial_log, search, write_trial_log, HyperSpace, Objectives,
    DEFAULT_BUDGET, DEFAULT_SCALAR_WEIGHT,
};
use evgust::xai::{partial_dependence_all, permutation_importance, PfiOptions};
use evgust::{Error, Result};

use crate::config::Settings;
use crate::output::{header, num, opt, uq_fields, uq_header, write_atomic, write_csv, write_json, Table};

/// Column indices into the encoded feature vector, or an error naming the
/// features the input cannot supply.
fn feature_columns(wanted: &[String]) -> Result<Vec<usize>> {
    let missing: Vec<&str> = wanted
        .iter()
        .filter(|w| !FEATURE_NAMES.contains(&w.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::usage(format!(
            "feature schema mismatch: model expects [{}]; input provides [{}]; missing [{}]",
            wanted.join(", "),
            FEATURE_NAMES.join(", "),
            missing.join(", ")
        )));
    }
    Ok(wanted
        .iter()
        .map(|w| FEATURE_NAMES.iter().position(|f| f == w).unwrap())
        .collect())
}

fn select(full: Array2<f64>, cols: &[usize]) -> Array2<f64> {
    if cols.len() == full.ncols() && cols.iter().enumerate().all(|(i, &c)| i == c) {
        full
    } else {
        full.select(Axis(1), cols)
    }
}

fn station_samples(records: &[StormRecord], cols: &[usize], names: &[String]) -> Result<Samples> {
    let all = Samples::from_records(records)?;
    Samples::new(select(all.features, cols), all.targets, names.to_vec())
}

/// Predictions with intervals at `levels` and the `q`-percentile flag.
fn with_uq(dec: &[UncertaintyDecomposition], levels: &[f64], q: f64) -> Result<(Vec<PredictionWithUQ>, f64)> {
    let total: Vec<f64> = dec.iter().map(UncertaintyDecomposition::total_sd).collect();
    let mask = mask_highly_uncertain(&total, q)?;
    let preds = dec
        .iter()
        .zip(&mask.flags)
        .map(|(d, &f)| {
            let mut p = PredictionWithUQ::from_decomposition(d, levels)?;
            p.flagged = f;
            Ok(p)
        })
        .collect::<Result<_>>()?;
    Ok((preds, mask.threshold))
}

fn station_prediction_rows(records: &[StormRecord], preds: &[PredictionWithUQ]) -> Vec<Vec<String>> {
    records
        .iter()
        .zip(preds)
        .map(|(r, p)| {
            let mut row = vec![r.storm_id.clone(), r.station_id.clone(), format_timestamp(&r.timestamp)];
            row.extend(uq_fields(p));
            row
        })
        .collect()
}

fn station_prediction_header(levels: &[f64]) -> Vec<String> {
    let mut h = header(&["storm_id", "station_id", "timestamp"]);
    h.extend(uq_header(levels));
    h
}

#[derive(Serialize)]
struct ValidationReport<'a> {
    split: &'a SplitSpec,
    features: &'a [String],
    epochs_run: usize,
    best_epoch: usize,
    mask_percentile: f64,
    mask_threshold: f64,
    report: EvalReport,
}

pub fn train(s: &Settings) -> Result<()> {
    let data = s.data_path()?;
    let out = s.out_dir()?;
    let levels = s.levels()?;
    let q = s.mask_percentile()?;
    let opts = s.eval_options()?;
    let records = load_records(&data, LoadOptions::training())?;
    if records.is_empty() {
        return Err(Error::usage(format!("{} holds no records", data.display())));
    }
    let counts = s.split_counts(storms_by_start(&records).len())?;
    let split = chronological_split(&records, counts)?;
    let names: Vec<String> = s
        .features
        .clone()
        .unwrap_or_else(|| FEATURE_NAMES.iter().map(|f| f.to_string()).collect());
    let cols = feature_columns(&names)?;
    let train = station_samples(&split.train, &cols, &names)?;
    let val = station_samples(&split.validation, &cols, &names)?;
    log::info!(
        "training on {} rows ({} storms), validating on {} rows ({} storms)",
        train.len(),
        split.spec.train.len(),
        val.len(),
        split.spec.validation.len()
    );
    let outcome = train_evidential(&train, &val, &s.arch(), &s.train_config())?;

    let mut buf = Vec::new();
    write_model(&mut buf, &outcome.model)?;
    let model_path = s.model.clone().unwrap_or_else(|| out.join("model.json"));
    write_atomic(&model_path, &buf)?;

    let log_rows: Vec<Vec<String>> = outcome
        .log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                num(e.train_loss),
                num(e.val_loss),
                num(e.val_mae),
                num(e.val_mean_total_sd),
                (e.inflated_uncertainty as u8).to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("epoch_log.csv"),
        &header(&["epoch", "train_loss", "val_loss", "val_mae", "val_mean_total_sd", "inflated_uncertainty"]),
        &log_rows,
    )?;

    let dec = outcome.model.predict(val.features.view())?;
    let (preds, threshold) = with_uq(&dec, &levels, q)?;
    write_csv(
        &out.join("validation_predictions.csv"),
        &station_prediction_header(&levels),
        &station_prediction_rows(&split.validation, &preds),
    )?;
    let report = evaluate(&preds, val.targets.as_slice().expect("contiguous"), &opts)?;
    write_json(
        &out.join("validation_report.json"),
        &ValidationReport {
            split: &split.spec,
            features: &names,
            epochs_run: outcome.log.len(),
            best_epoch: outcome.best_epoch,
            mask_percentile: q,
            mask_threshold: threshold,
            report,
        },
    )
}

fn first_line(path: &Path) -> Result<String> {
    let mut line = String::new();
    BufReader::new(File::open(path)?).read_line(&mut line)?;
    Ok(line)
}

#[derive(Serialize)]
struct PredictSummary {
    mode: &'static str,
    rows: usize,
    flagged: usize,
    mask_percentile: f64,
    mask_threshold: f64,
    levels: Vec<f64>,
}

pub fn predict(s: &Settings) -> Result<()> {
    let data = s.data_path()?;
    let model = load_model(s.model_path()?)?;
    let out = s.out_dir()?;
    let levels = s.levels()?;
    let q = s.mask_percentile()?;
    let cols = feature_columns(&model.feature_names)?;

    let grid = is_grid_header(&first_line(&data)?);
    let (n, preds, threshold) = if grid {
        let records = read_grid_records(File::open(&data)?, Some(STORM_WINDOW_HOURS))?;
        let (preds, threshold) = predict_rows(&model, records.iter().map(GridRecord::features), &cols, &levels, q)?;
        write_grid_outputs(&out, &records, &preds, &levels)?;
        (records.len(), preds, threshold)
    } else {
        let records = load_records(&data, LoadOptions::inference())?;
        let (preds, threshold) = predict_rows(&model, records.iter().map(StormRecord::features), &cols, &levels, q)?;
        write_csv(
            &out.join("predictions.csv"),
            &station_prediction_header(&levels),
            &station_prediction_rows(&records, &preds),
        )?;
        (records.len(), preds, threshold)
    };
    write_json(
        &out.join("predict_summary.json"),
        &PredictSummary {
            mode: if grid { "grid" } else { "station" },
            rows: n,
            flagged: preds.iter().filter(|p| p.flagged).count(),
            mask_percentile: q,
            mask_threshold: threshold,
            levels,
        },
    )
}

fn predict_rows(
    model: &EvidentialModel,
    rows: impl Iterator<Item = [f64; 11]>,
    cols: &[usize],
    levels: &[f64],
    q: f64,
) -> Result<(Vec<PredictionWithUQ>, f64)> {
    let x = select(feature_matrix(rows), cols);
    if x.nrows() == 0 {
        return Err(Error::usage("input holds no rows to predict"));
    }
    with_uq(&model.predict(x.view())?, levels, q)
}

/// Min-max normalization, or `None` (with a warning) for a constant field.
fn normalized(field: &GridField, what: &str, when: &str) -> Option<GridField> {
    match minmax_normalize_field(field) {
        Ok(f) => Some(f),
        Err(e) => {
            log::warn!("{what} at {when} not normalized: {e}");
            None
        }
    }
}

fn cell(field: Option<&GridField>, r: usize, c: usize) -> String {
    match field {
        Some(f) if f.is_valid(r, c) => num(f.values[[r, c]]),
        _ => String::new(),
    }
}

fn group_by_time<T>(items: &[T], ts: impl Fn(&T) -> String) -> BTreeMap<String, Vec<usize>> {
    let mut by: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by.entry(ts(it)).or_default().push(i);
    }
    by
}

fn write_grid_outputs(out: &Path, records: &[GridRecord], preds: &[PredictionWithUQ], levels: &[f64]) -> Result<()> {
    let mut h = header(&["storm_id", "timestamp", "row", "col", "lat", "lon", "WS_10m"]);
    h.extend(uq_header(levels));
    let rows: Vec<Vec<String>> = records
        .iter()
        .zip(preds)
        .map(|(r, p)| {
            let mut row = vec![
                r.storm_id.clone(),
                format_timestamp(&r.timestamp),
                r.row.to_string(),
                r.col.to_string(),
                num(r.lat),
                num(r.lon),
                num(r.raw.ws_10m),
            ];
            row.extend(uq_fields(p));
            row
        })
        .collect();
    write_csv(&out.join("grid_predictions.csv"), &h, &rows)?;

    let mut fh = header(&[
        "timestamp",
        "row",
        "col",
        "lat",
        "lon",
        "mean_gradient",
        "mean_normalized",
        "total_sd_normalized",
        "WS_10m_normalized",
    ]);
    for &l in levels {
        let tag = crate::output::level_label(l);
        fh.push(format!("lower_{tag}_normalized"));
        fh.push(format!("upper_{tag}_normalized"));
    }
    let mut frows = Vec::new();
    for (ts, idx) in group_by_time(records, |r| format_timestamp(&r.timestamp)) {
        let field = |value: &dyn Fn(usize) -> f64| {
            GridField::from_cells(idx.iter().map(|&i| {
                let r = &records[i];
                (r.row, r.col, r.lat, r.lon, value(i))
            }))
        };
        let mean = field(&|i| preds[i].mean)?;
        let gradient = spatial_gradient(&mean)?;
        let mut maps = vec![
            normalized(&mean, "mean", &ts),
            normalized(&field(&|i| preds[i].total_sd)?, "total sd", &ts),
            normalized(&field(&|i| records[i].raw.ws_10m)?, "WS_10m", &ts),
        ];
        for k in 0..levels.len() {
            maps.push(normalized(&field(&|i| preds[i].intervals[k].lower)?, "lower bound", &ts));
            maps.push(normalized(&field(&|i| preds[i].intervals[k].upper)?, "upper bound", &ts));
        }
        let (nr, nc) = mean.shape();
        for r in 0..nr {
            for c in 0..nc {
                if !mean.is_valid(r, c) {
                    continue;
                }
                let mut row = vec![
                    ts.clone(),
                    r.to_string(),
                    c.to_string(),
                    num(mean.lats[r]),
                    num(mean.lons[c]),
                    cell(Some(&gradient), r, c),
                ];
                row.extend(maps.iter().map(|m| cell(m.as_ref(), r, c)));
                frows.push(row);
            }
        }
    }
    write_csv(&out.join("grid_fields.csv"), &fh, &frows)
}

/// Parsed predictions file keyed by `(station_id, timestamp)`.
struct StationPredictions {
    keys: Vec<(String, String)>,
    preds: Vec<PredictionWithUQ>,
}

/// Intervals are rebuilt at `levels` if given, else at the levels found in
/// the file, else at `fallback`.
fn read_station_predictions(
    path: &Path,
    levels: Option<&[f64]>,
    fallback: &[f64],
) -> Result<(StationPredictions, Vec<f64>)> {
    let t = Table::read(path)?;
    let what = "predictions file";
    let st = t.require("station_id", what)?;
    let ts = t.require("timestamp", what)?;
    let cols = [
        t.require("mean", what)?,
        t.require("aleatoric_sd", what)?,
        t.require("epistemic_sd", what)?,
        t.require("total_sd", what)?,
    ];
    let flag = t.index.get("flagged").copied();
    let levels = match levels {
        Some(l) => l.to_vec(),
        None => Some(t.levels()).filter(|l| !l.is_empty()).unwrap_or_else(|| fallback.to_vec()),
    };
    let mut keys = Vec::with_capacity(t.rows.len());
    let mut preds = Vec::with_capacity(t.rows.len());
    for i in 0..t.rows.len() {
        let raw_ts = t.text(i, ts);
        let stamp = parse_timestamp(raw_ts)
            .ok_or_else(|| Error::usage(format!("{what} line {}: bad timestamp '{raw_ts}'", i + 2)))?;
        keys.push((t.text(i, st).to_string(), format_timestamp(&stamp)));
        let v = |k: usize| t.float(i, cols[k]);
        let mut p = PredictionWithUQ::new(v(0)?, v(1)?, v(2)?, v(3)?, &levels)?;
        p.flagged = flag.is_some_and(|f| matches!(t.text(i, f), "1" | "true"));
        preds.push(p);
    }
    Ok((StationPredictions { keys, preds }, levels))
}

fn show_keys<'a>(keys: impl Iterator<Item = &'a (String, String)>) -> String {
    keys.take(5).map(|(s, t)| format!("({s}, {t})")).collect::<Vec<_>>().join(" ")
}

pub fn evaluate_cmd(s: &Settings) -> Result<()> {
    let pred_path = s.input("predictions", &s.predictions)?;
    let data = s.data_path()?;
    let out = s.out_dir()?;
    let mut opts = s.eval_options()?;
    let (table, levels) = read_station_predictions(&pred_path, s.levels.as_deref(), &opts.levels)?;
    opts.levels = levels;

    let mut lookup: HashMap<&(String, String), usize> = HashMap::new();
    for (i, k) in table.keys.iter().enumerate() {
        if lookup.insert(k, i).is_some() {
            return Err(Error::usage(format!("duplicate prediction key ({}, {})", k.0, k.1)));
        }
    }
    let records = load_records(&data, LoadOptions::inference())?;
    let observed: Vec<((String, String), f64)> = records
        .iter()
        .filter_map(|r| r.gust.map(|g| ((r.station_id.clone(), format_timestamp(&r.timestamp)), g)))
        .collect();
    let mut preds = Vec::new();
    let mut obs = Vec::new();
    let mut stations = Vec::new();
    let mut matched = vec![false; table.keys.len()];
    let mut unmatched_obs = Vec::new();
    for (key, g) in &observed {
        match lookup.get(key) {
            Some(&i) => {
                matched[i] = true;
                preds.push(table.preds[i].clone());
                obs.push(*g);
                stations.push(key.0.clone());
            }
            None => unmatched_obs.push(key),
        }
    }
    let unmatched_pred: Vec<&(String, String)> = table
        .keys
        .iter()
        .zip(&matched)
        .filter(|(_, &m)| !m)
        .map(|(k, _)| k)
        .collect();
    if preds.is_empty() {
        return Err(Error::usage(format!(
            "no prediction matches an observation on (station_id, timestamp); unmatched predictions: {}; unmatched observations: {}",
            show_keys(unmatched_pred.into_iter()),
            show_keys(unmatched_obs.into_iter())
        )));
    }
    if !unmatched_pred.is_empty() || !unmatched_obs.is_empty() {
        log::warn!(
            "{} prediction(s) and {} observation(s) unmatched",
            unmatched_pred.len(),
            unmatched_obs.len()
        );
    }

    let report = evaluate(&preds, &obs, &opts)?;
    write_json(&out.join("eval_report.json"), &report)?;

    let mut by_station: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, st) in stations.iter().enumerate() {
        by_station.entry(st).or_default().push(i);
    }
    let mut rows = Vec::new();
    for (st, idx) in &by_station {
        let sp: Vec<PredictionWithUQ> = idx.iter().map(|&i| preds[i].clone()).collect();
        let so: Vec<f64> = idx.iter().map(|&i| obs[i]).collect();
        for &level in &opts.levels {
            let c = picp(&sp, &so, level, opts.exclude_flagged)?;
            rows.push(vec![
                st.to_string(),
                num(level),
                c.covered.to_string(),
                c.total.to_string(),
                opt(c.fraction()),
            ]);
        }
    }
    write_csv(
        &out.join("picp_by_station.csv"),
        &header(&["station_id", "level", "covered", "total", "picp"]),
        &rows,
    )?;

    let rows: Vec<Vec<String>> = report
        .discard_fraction
        .iter()
        .map(|d| vec![num(d.fraction), num(d.rmse), d.retained.to_string()])
        .collect();
    write_csv(&out.join("discard_fraction.csv"), &header(&["fraction", "rmse", "retained"]), &rows)?;

    let rows: Vec<Vec<String>> = report
        .spread_skill
        .bins
        .iter()
        .enumerate()
        .map(|(i, b)| vec![i.to_string(), num(b.mean_sd), num(b.rmse), b.count.to_string()])
        .collect();
    write_csv(&out.join("spread_skill.csv"), &header(&["bin", "mean_sd", "rmse", "count"]), &rows)?;

    let mut rows = Vec::new();
    for p in &report.pitd {
        let m = p.score.counts.len();
        for (b, c) in p.score.counts.iter().enumerate() {
            rows.push(vec![
                p.kind.name().to_string(),
                b.to_string(),
                num(b as f64 / m as f64),
                num((b + 1) as f64 / m as f64),
                c.to_string(),
            ]);
        }
    }
    write_csv(&out.join("pit_histogram.csv"), &header(&["kind", "bin", "lower", "upper", "count"]), &rows)
}

pub fn explain(s: &Settings) -> Result<()> {
    let data = s.data_path()?;
    let model = load_model(s.model_path()?)?;
    let out = s.out_dir()?;
    let cols = feature_columns(&model.feature_names)?;
    let records = load_records(&data, LoadOptions::training())?;
    let samples = station_samples(&records, &cols, &model.feature_names)?;
    let y = samples.targets.as_slice().expect("contiguous");

    // permutation runs on standardized inputs, PDP on physical units
    let z = model.standardizer.apply(samples.features.view())?;
    let pfi = permutation_importance(
        &model.net,
        z.view(),
        y,
        &model.feature_names,
        &PfiOptions {
            n_shuffles: s.shuffles(),
            seed: s.seed(),
            spread_bins: s.spread_bins.unwrap_or(evgust::metrics::DEFAULT_SPREAD_BINS),
            ..Default::default()
        },
    )?;
    let rank: HashMap<&str, usize> = pfi.ranking().into_iter().enumerate().map(|(i, f)| (f, i + 1)).collect();
    let rows: Vec<Vec<String>> = pfi
        .features
        .iter()
        .map(|f| {
            vec![
                f.feature.clone(),
                rank[f.feature.as_str()].to_string(),
                num(f.rmse_delta_mean),
                num(f.rmse_delta_sd),
                opt(f.r2_delta_mean),
                opt(f.r2_delta_sd),
                f.shuffles.len().to_string(),
                (f.constant as u8).to_string(),
            ]
        })
        .collect();
    let mut pfi_rows = rows;
    pfi_rows.push(vec![
        "baseline".into(),
        String::new(),
        num(pfi.baseline.rmse),
        String::new(),
        opt(pfi.baseline.r2),
        String::new(),
        String::new(),
        String::new(),
    ]);
    write_csv(
        &out.join("pfi.csv"),
        &header(&[
            "feature",
            "rank",
            "rmse_delta_mean",
            "rmse_delta_sd",
            "r2_delta_mean",
            "r2_delta_sd",
            "shuffles",
            "constant",
        ]),
        &pfi_rows,
    )?;

    let curves = partial_dependence_all(&model, samples.features.view(), &model.feature_names, s.pdp_points())?;
    let mut rows = Vec::new();
    for c in &curves {
        for p in &c.points {
            rows.push(vec![
                c.feature.clone(),
                num(p.value),
                num(p.mean_prediction),
                num(p.sd_prediction),
                num(p.mean_total_sd),
                num(p.sd_total_sd),
            ]);
        }
    }
    write_csv(
        &out.join("pdp.csv"),
        &header(&["feature", "value", "mean_prediction", "sd_prediction", "mean_total_sd", "sd_total_sd"]),
        &rows,
    )
}

#[derive(Serialize)]
struct AlignmentReport {
    k: usize,
    hours: usize,
    fraction: Option<f64>,
}

pub fn spatial(s: &Settings) -> Result<()> {
    let path = match &s.predictions {
        Some(_) => s.input("predictions", &s.predictions)?,
        None => s.data_path()?,
    };
    let out = s.out_dir()?;
    let k = s.align_k.unwrap_or(0);
    let t = Table::read(&path)?;
    let what = "gridded predictions";
    let c_ts = t.require("timestamp", what)?;
    let c_row = t.require("row", what)?;
    let c_col = t.require("col", what)?;
    let c_lat = t.require("lat", what)?;
    let c_lon = t.require("lon", what)?;
    let c_ws = t.require("WS_10m", what)?;
    let c_sd = t.require("total_sd", what)?;

    let stamps: Vec<String> = (0..t.rows.len())
        .map(|i| {
            let raw = t.text(i, c_ts);
            parse_timestamp(raw)
                .map(|d| format_timestamp(&d))
                .ok_or_else(|| Error::usage(format!("{what} line {}: bad timestamp '{raw}'", i + 2)))
        })
        .collect::<Result<_>>()?;
    let index = |i: usize, c: usize| -> Result<usize> {
        t.text(i, c)
            .parse::<usize>()
            .map_err(|_| Error::usage(format!("{what} line {}: bad grid index '{}'", i + 2, t.text(i, c))))
    };
    let groups = group_by_time(&stamps, |s| s.clone());
    let times: Vec<String> = groups.keys().cloned().collect();
    let mut ws_fields = Vec::new();
    let mut sd_fields = Vec::new();
    for idx in groups.values() {
        let build = |vc: usize| -> Result<GridField> {
            let cells = idx
                .iter()
                .map(|&i| Ok((index(i, c_row)?, index(i, c_col)?, t.float(i, c_lat)?, t.float(i, c_lon)?, t.float(i, vc)?)))
                .collect::<Result<Vec<_>>>()?;
            GridField::from_cells(cells)
        };
        ws_fields.push(build(c_ws)?);
        sd_fields.push(build(c_sd)?);
    }
    let ws = track_spatial_max(&ws_fields)?;
    let sd = track_spatial_max(&sd_fields)?;

    let mut rows = Vec::new();
    for (name, track) in [("WS_10m", &ws), ("total_sd", &sd)] {
        for m in track.iter() {
            rows.push(vec![
                times[m.step].clone(),
                name.to_string(),
                num(m.value),
                m.row.to_string(),
                m.col.to_string(),
                num(m.lat),
                num(m.lon),
            ]);
        }
    }
    write_csv(
        &out.join("spatial_max_tracks.csv"),
        &header(&["timestamp", "field", "value", "row", "col", "lat", "lon"]),
        &rows,
    )?;

    let norm = |track: &[SpatialMax], what: &str| -> Vec<Option<f64>> {
        let values: Vec<f64> = track.iter().map(|m| m.value).collect();
        let mut by_step = vec![None; times.len()];
        match minmax_normalize(&values) {
            Ok(n) => {
                for (m, v) in track.iter().zip(n) {
                    by_step[m.step] = Some(v);
                }
            }
            Err(e) => log::warn!("{what} maximum series not normalized: {e}"),
        }
        by_step
    };
    let raw = |track: &[SpatialMax]| -> Vec<Option<f64>> {
        let mut by_step = vec![None; times.len()];
        for m in track {
            by_step[m.step] = Some(m.value);
        }
        by_step
    };
    let (ws_raw, sd_raw, ws_norm, sd_norm) = (raw(&ws), raw(&sd), norm(&ws, "WS_10m"), norm(&sd, "total sd"));
    let rows: Vec<Vec<String>> = times
        .iter()
        .enumerate()
        .map(|(i, ts)| vec![ts.clone(), opt(ws_raw[i]), opt(ws_norm[i]), opt(sd_raw[i]), opt(sd_norm[i])])
        .collect();
    write_csv(
        &out.join("normalized_series.csv"),
        &header(&["timestamp", "WS_10m_max", "WS_10m_max_normalized", "total_sd_max", "total_sd_max_normalized"]),
        &rows,
    )?;
    write_json(
        &out.join("alignment.json"),
        &AlignmentReport {
            k,
            hours: times.len(),
            fraction: alignment_fraction(&ws, &sd, k),
        },
    )
}

#[derive(Serialize)]
struct ParetoEntry<'a> {
    id: usize,
    config: &'a evgust::tune::HyperConfig,
    objectives: &'a Objectives,
    epochs: usize,
    scalarized: f64,
}

#[derive(Serialize)]
struct ParetoReport<'a> {
    trials: usize,
    failed: usize,
    scalar_weight: f64,
    recommended: ParetoEntry<'a>,
    pareto: Vec<ParetoEntry<'a>>,
}

pub fn tune(s: &Settings) -> Result<()> {
    let data = s.data_path()?;
    let out = s.out_dir()?;
    let budget = s.trials.unwrap_or(DEFAULT_BUDGET);
    let weight = s.scalar_weight.unwrap_or(DEFAULT_SCALAR_WEIGHT);
    let records = load_records(&data, LoadOptions::training())?;
    if records.is_empty() {
        return Err(Error::usage(format!("{} holds no records", data.display())));
    }
    let split = chronological_split(&records, s.split_counts(storms_by_start(&records).len())?)?;
    let names: Vec<String> = s
        .features
        .clone()
        .unwrap_or_else(|| FEATURE_NAMES.iter().map(|f| f.to_string()).collect());
    let cols = feature_columns(&names)?;
    let train = station_samples(&split.train, &cols, &names)?;
    let val = station_samples(&split.validation, &cols, &names)?;

    let log_path = out.join("trials_log.csv");
    let previous = if log_path.is_file() {
        let p = read_trial_log(File::open(&log_path)?)?;
        log::info!("resuming with {} logged trial(s)", p.len());
        p
    } else {
        Vec::new()
    };
    let tc = s.train_config();
    let report = search(
        &HyperSpace::default(),
        budget,
        s.seed(),
        weight,
        &previous,
        evidential_objective(&train, &val, tc.max_epochs, tc.patience),
    )?;

    let mut buf = Vec::new();
    write_trial_log(&mut buf, &report.trials, true)?;
    write_atomic(&log_path, &buf)?;

    let entry = |id: usize| -> ParetoEntry<'_> {
        let t = report.trial(id).expect("front ids come from the trial list");
        let o = t.objectives().expect("front trials completed");
        ParetoEntry {
            id,
            config: &t.config,
            objectives: o,
            epochs: t.epochs,
            scalarized: o.scalarized(weight),
        }
    };
    write_json(
        &out.join("pareto.json"),
        &ParetoReport {
            trials: report.trials.len(),
            failed: report.trials.iter().filter(|t| t.objectives().is_none()).count(),
            scalar_weight: weight,
            recommended: entry(report.recommended),
            pareto: report.pareto.iter().map(|&id| entry(id)).collect(),
        },
    )
}
