use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::corpus::{load_labelled_features, ordered_map};
use super::{write_json, write_run_record};
use crate::dsp::load_wav;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_pair, style_cluster_report, write_system_table, ClusterReport, EvalReport,
    SystemScores,
};
use crate::loss::{read_trajectory, TrajectoryRow};
use crate::numerics::{Tensor, TensorArchive};
use crate::ser::{extract_style, SerModel, StyleLevel};

/// Row of a pairs manifest (`id,reference,synthesized`); relative paths
/// resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub id: String,
    pub reference: String,
    pub synthesized: String,
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Splits `name=path`; a bare path is named after its file stem.
pub fn named_path(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !name.contains(['/', '\\']) => {
            (name.to_string(), PathBuf::from(path))
        }
        _ => {
            let p = PathBuf::from(arg);
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            (stem, p)
        }
    }
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Scores every pair of a manifest. Pairs that fail are recorded in the
/// report's `failures` and do not stop the run.
pub fn evaluate_manifest(
    cfg: &RunConfig,
    manifest: &Path,
    single_thread: bool,
) -> Result<EvalReport> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let pairs = read_pairs(manifest)?;
    let results = ordered_map(&pairs, single_thread, |p| {
        let reference = load_wav(&resolve(dir, &p.reference))?;
        let synthesized = load_wav(&resolve(dir, &p.synthesized))?;
        evaluate_pair(&p.id, &reference, &synthesized, &cfg.mel, &cfg.f0)
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (p, r) in pairs.iter().zip(results) {
        match r {
            Ok(m) => rows.push(m),
            Err(e) => failures.push((p.id.clone(), e.to_string())),
        }
    }
    failures.sort();
    let config = serde_json::json!({ "config_hash": cfg.hash(), "mel": cfg.mel, "f0": cfg.f0 });
    Ok(EvalReport::new(rows, failures, config))
}

/// Reports and the comparison table of one evaluation run.
#[derive(Clone, Debug)]
pub struct EvaluationOutcome {
    pub reports: Vec<(String, EvalReport)>,
    pub table: Vec<SystemScores>,
}

impl EvaluationOutcome {
    pub fn failed_rows(&self) -> usize {
        self.reports.iter().map(|(_, r)| r.failures.len()).sum()
    }
}

/// Evaluates each named system. Writes `<out>/<system>/report.{csv,json}`
/// and `<out>/table.csv` with one row per system.
pub fn run_evaluate(
    cfg: &RunConfig,
    systems: &[(String, PathBuf)],
    out_dir: &Path,
    single_thread: bool,
) -> Result<EvaluationOutcome> {
    if systems.is_empty() {
        return Err(Error::invalid("evaluate: no pairs manifest given"));
    }
    let mut seen = std::collections::HashSet::new();
    for (name, _) in systems {
        if name.is_empty() || !seen.insert(name) {
            return Err(Error::invalid(format!(
                "evaluate: system name {name:?} is empty or repeated"
            )));
        }
    }
    let mut reports = Vec::new();
    let mut table = Vec::new();
    for (name, manifest) in systems {
        let report = evaluate_manifest(cfg, manifest, single_thread)?;
        let dir = out_dir.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        report.write_csv(&dir.join("report.csv"))?;
        report.write_json(&dir.join("report.json"))?;
        table.push(SystemScores::from_report(name, &report));
        reports.push((name.clone(), report));
    }
    write_system_table(&table, &out_dir.join("table.csv"))?;
    write_run_record(out_dir, cfg)?;
    Ok(EvaluationOutcome { reports, table })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunWindow {
    pub name: String,
    pub mode: String,
    pub steps: u64,
    pub frame: f64,
    pub style: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedOrdering {
    pub pl_frame: f64,
    pub baseline_frame: f64,
    /// `pl_frame < baseline_frame`.
    pub pl_lower: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryComparison {
    /// Grid points averaged at the end of each run.
    pub window: usize,
    pub runs: Vec<RunWindow>,
    /// Name of the run with the lowest final-window frame loss.
    pub winner: String,
    pub winner_mode: String,
    /// Reported for information only; absent unless both modes are present.
    pub pl_vs_baseline: Option<PairedOrdering>,
    /// Largest absolute frame-loss difference to the first run.
    pub max_abs_frame_difference: f64,
}

/// Linear interpolation of `(step, value)` points at `x`, clamped at the ends.
fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let i = points.partition_point(|p| p.0 < x);
    if i == 0 {
        return points[0].1;
    }
    if i == points.len() {
        return points[i - 1].1;
    }
    let (x0, y0) = points[i - 1];
    let (x1, y1) = points[i];
    if x1 == x {
        return y1;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Aligns trajectory logs on the first log's step grid, writes
/// `merged.csv` (`step` then `<run>_frame,<run>_style,<run>_total` and, for
/// later runs, `<run>_frame_delta` against the first) and `summary.json`.
pub fn compare_trajectories(
    logs: &[(String, PathBuf)],
    out_dir: &Path,
) -> Result<TrajectoryComparison> {
    if logs.len() < 2 {
        return Err(Error::invalid(
            "compare-trajectories needs at least two logs",
        ));
    }
    let mut runs: Vec<(String, Vec<TrajectoryRow>)> = Vec::new();
    for (name, path) in logs {
        let rows = read_trajectory(path)?;
        if rows.is_empty() {
            return Err(Error::invalid(format!(
                "{}: empty trajectory log",
                path.display()
            )));
        }
        let mut unique = name.clone();
        let mut k = 2;
        while runs.iter().any(|(n, _)| *n == unique) {
            unique = format!("{name}_{k}");
            k += 1;
        }
        runs.push((unique, rows));
    }
    let grid: Vec<u64> = runs[0].1.iter().map(|r| r.step).collect();
    let series = |rows: &[TrajectoryRow], f: fn(&TrajectoryRow) -> f64| -> Vec<f64> {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, f(r))).collect();
        grid.iter().map(|&s| interpolate(&pts, s as f64)).collect()
    };
    let aligned: Vec<[Vec<f64>; 3]> = runs
        .iter()
        .map(|(_, rows)| {
            [
                series(rows, |r| r.frame),
                series(rows, |r| r.style),
                series(rows, |r| r.total),
            ]
        })
        .collect();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let merged_path = out_dir.join("merged.csv");
    let mut w = csv::Writer::from_path(&merged_path)?;
    let mut header = vec!["step".to_string()];
    for (i, (name, _)) in runs.iter().enumerate() {
        header.extend(["frame", "style", "total"].map(|c| format!("{name}_{c}")));
        if i > 0 {
            header.push(format!("{name}_frame_delta"));
        }
    }
    w.write_record(&header)?;
    let mut max_diff = 0.0f64;
    for (g, step) in grid.iter().enumerate() {
        let mut rec = vec![step.to_string()];
        for (i, a) in aligned.iter().enumerate() {
            rec.extend(a.iter().map(|s| s[g].to_string()));
            if i > 0 {
                let d = a[0][g] - aligned[0][0][g];
                max_diff = max_diff.max(d.abs());
                rec.push(d.to_string());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&merged_path, e))?;

    let window = (grid.len() / 10).max(1);
    let tail_mean = |s: &[f64]| s[s.len() - window..].iter().sum::<f64>() / window as f64;
    let windows: Vec<RunWindow> = runs
        .iter()
        .zip(&aligned)
        .map(|((name, rows), a)| RunWindow {
            name: name.clone(),
            mode: rows[0].mode.to_string(),
            steps: rows.last().map(|r| r.step).unwrap_or(0),
            frame: tail_mean(&a[0]),
            style: tail_mean(&a[1]),
            total: tail_mean(&a[2]),
        })
        .collect();
    let best = windows
        .iter()
        .min_by(|a, b| a.frame.total_cmp(&b.frame))
        .expect("at least two runs");
    let by_mode = |m: &str| windows.iter().find(|r| r.mode == m).map(|r| r.frame);
    let pl_vs_baseline = match (by_mode("pl"), by_mode("baseline")) {
        (Some(pl), Some(base)) => Some(PairedOrdering {
            pl_frame: pl,
            baseline_frame: base,
            pl_lower: pl < base,
        }),
        _ => None,
    };
    let summary = TrajectoryComparison {
        window,
        winner: best.name.clone(),
        winner_mode: best.mode.clone(),
        runs: windows.clone(),
        pl_vs_baseline,
        max_abs_frame_difference: max_diff,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSeparation {
    pub level: StyleLevel,
    pub within: f64,
    pub between: f64,
    pub score: f64,
}

/// `(label, [(utterance id, style matrix)])` per label.
pub type LabelGroups = Vec<(String, Vec<(String, Tensor)>)>;

/// Style features of every utterance in a labelled manifest at each
/// component of `level`, grouped by label.
pub fn style_groups(
    model: &SerModel,
    manifest: &Path,
    level: StyleLevel,
    cfg: &RunConfig,
    single_thread: bool,
) -> Result<Vec<(StyleLevel, LabelGroups)>> {
    let feats = load_labelled_features(manifest, &cfg.mel, single_thread)?;
    let styles = ordered_map(&feats, single_thread, |(row, mel)| {
        extract_style(model, mel, level, None, &row.id)
    });
    type ByLabel = BTreeMap<String, Vec<(String, Tensor)>>;
    let mut per_level: Vec<(StyleLevel, ByLabel)> = level
        .components()
        .iter()
        .map(|&l| (l, BTreeMap::new()))
        .collect();
    for ((row, _), s) in feats.iter().zip(styles) {
        for (f, (_, groups)) in s?.into_iter().zip(per_level.iter_mut()) {
            groups
                .entry(row.label.clone())
                .or_default()
                .push((row.id.clone(), f.matrix));
        }
    }
    Ok(per_level
        .into_iter()
        .map(|(l, g)| (l, g.into_iter().collect()))
        .collect())
}

/// Cluster separation of each level's style features.
pub fn separation_by_level(
    groups: &[(StyleLevel, LabelGroups)],
) -> Result<Vec<(LevelSeparation, ClusterReport)>> {
    groups
        .iter()
        .map(|(level, g)| {
            let plain: Vec<(String, Vec<Tensor>)> = g
                .iter()
                .map(|(label, members)| {
                    (
                        label.clone(),
                        members.iter().map(|(_, t)| t.clone()).collect(),
                    )
                })
                .collect();
            let report = style_cluster_report(&plain)?;
            Ok((
                LevelSeparation {
                    level: *level,
                    within: report.within,
                    between: report.between,
                    score: report.score,
                },
                report,
            ))
        })
        .collect()
}

/// Writes `features.ckpt` (tensors `<level>/<id>`), `cluster.json` and
/// `distances_<level>.csv` for a labelled manifest.
pub fn run_extract_style(
    cfg: &RunConfig,
    ser_ckpt: &Path,
    manifest: &Path,
    level: StyleLevel,
    out_dir: &Path,
    single_thread: bool,
) -> Result<Vec<LevelSeparation>> {
    let model = SerModel::load(ser_ckpt)?;
    let groups = style_groups(&model, manifest, level, cfg, single_thread)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut archive = TensorArchive::new(serde_json::json!({
        "kind": "style_features",
        "level": level,
        "config_hash": cfg.hash(),
    }));
    for (l, g) in &groups {
        for (_, members) in g {
            for (id, t) in members {
                archive.push(format!("{}/{id}", l.as_str()), t.clone());
            }
        }
    }
    archive.save(&out_dir.join("features.ckpt"))?;
    let separation = separation_by_level(&groups)?;
    for (s, report) in &separation {
        report.write_distance_csv(&out_dir.join(format!("distances_{}.csv", s.level.as_str())))?;
    }
    let levels: Vec<LevelSeparation> = separation.into_iter().map(|(s, _)| s).collect();
    write_json(
        &out_dir.join("cluster.json"),
        &serde_json::json!({ "levels": levels, "config_hash": cfg.hash() }),
    )?;
    write_run_record(out_dir, cfg)?;
    Ok(levels)
}
