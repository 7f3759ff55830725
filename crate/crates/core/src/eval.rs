//! Objective evaluation: DTW alignment, mel distortion, F0 error, frame
//! disturbance and style-cluster separation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{estimate_f0, mel_spectrogram, F0Config, MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Monotone alignment between a reference (`x`) and a synthesized (`y`)
/// sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub steps: Vec<(usize, usize)>,
    /// Summed Euclidean distance along the path.
    pub cost: f64,
}

impl AlignmentPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks start, end and the step pattern against sequence lengths.
    pub fn validate(&self, x_len: usize, y_len: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("alignment path: {msg}")));
        match (self.steps.first(), self.steps.last()) {
            (Some(&(0, 0)), Some(&end)) if end == (x_len - 1, y_len - 1) => {}
            _ => {
                return bad(format!(
                    "must run from (0,0) to ({}, {})",
                    x_len - 1,
                    y_len - 1
                ))
            }
        }
        for w in self.steps.windows(2) {
            let (dx, dy) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            if !matches!((dx, dy), (1, 0) | (0, 1) | (1, 1)) {
                return bad(format!("illegal move {:?} -> {:?}", w[0], w[1]));
            }
        }
        Ok(())
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_matrix(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::invalid(format!("{op}: empty sequence")));
    }
    Ok(())
}

/// Minimum-cost alignment of `a` (`Tx×d`) and `b` (`Ty×d`) under moves
/// (1,1), (1,0), (0,1). Ties prefer the diagonal, then (1,0), then (0,1).
pub fn dtw_align(a: &Tensor, b: &Tensor) -> Result<AlignmentPath> {
    check_matrix("dtw_align", a, b)?;
    let (tx, ty) = (a.rows(), b.rows());
    let mut acc = vec![f64::INFINITY; tx * ty];
    for i in 0..tx {
        for j in 0..ty {
            let d = euclidean(a.row(i), b.row(j));
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[(i - 1) * ty + j - 1]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 {
                    acc[(i - 1) * ty + j]
                } else {
                    f64::INFINITY
                };
                let left = if j > 0 {
                    acc[i * ty + j - 1]
                } else {
                    f64::INFINITY
                };
                diag.min(up).min(left)
            };
            acc[i * ty + j] = if i == 0 && j == 0 { d } else { best + d };
        }
    }
    let mut steps = vec![(tx - 1, ty - 1)];
    let (mut i, mut j) = (tx - 1, ty - 1);
    while (i, j) != (0, 0) {
        let diag = if i > 0 && j > 0 {
            acc[(i - 1) * ty + j - 1]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 {
            acc[(i - 1) * ty + j]
        } else {
            f64::INFINITY
        };
        let left = if j > 0 {
            acc[i * ty + j - 1]
        } else {
            f64::INFINITY
        };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        steps.push((i, j));
    }
    steps.reverse();
    Ok(AlignmentPath {
        steps,
        cost: acc[tx * ty - 1],
    })
}

/// `10·√2 / ln 10`.
pub fn mcd_constant() -> f64 {
    10.0 * std::f64::consts::SQRT_2 / std::f64::consts::LN_10
}

/// Mel distortion in dB, `(10√2/ln10)·(1/N)·√Σ(y−ŷ)²` per aligned pair,
/// averaged over the path.
pub fn mcd(reference: &Tensor, synthesized: &Tensor, path: &AlignmentPath) -> Result<f64> {
    check_matrix("mcd", reference, synthesized)?;
    if path.is_empty() {
        return Err(Error::invalid("mcd: empty alignment path"));
    }
    let n = reference.cols() as f64;
    let k = mcd_constant();
    let sum: f64 = path
        .steps
        .iter()
        .map(|&(x, y)| k * (1.0 / n) * euclidean(reference.row(x), synthesized.row(y)))
        .sum();
    Ok(sum / path.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Error {
    /// `None` when no aligned pair is voiced on both sides.
    pub rmse_hz: Option<f64>,
    pub voiced_pairs: usize,
}

/// RMSE in Hz over aligned pairs where both frames are voiced (non-zero).
pub fn f0_rmse(reference: &[f64], synthesized: &[f64], path: &AlignmentPath) -> F0Error {
    let mut sum = 0.0;
    let mut count = 0;
    for &(x, y) in &path.steps {
        let (a, b) = (
            reference.get(x).copied().unwrap_or(0.0),
            synthesized.get(y).copied().unwrap_or(0.0),
        );
        if a > 0.0 && b > 0.0 {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    F0Error {
        rmse_hz: (count > 0).then(|| (sum / count as f64).sqrt()),
        voiced_pairs: count,
    }
}

/// RMS deviation of the path from the diagonal, in frames.
pub fn frame_disturbance(path: &AlignmentPath) -> f64 {
    if path.is_empty() {
        return 0.0;
    }
    let sum: f64 = path
        .steps
        .iter()
        .map(|&(x, y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    (sum / path.len() as f64).sqrt()
}

/// Metrics of one reference/synthesized pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub mcd_db: f64,
    pub f0_rmse_hz: Option<f64>,
    pub fd_frames: f64,
    pub voiced_pairs: usize,
}

/// Aligns the log-mel features of two waveforms and scores the pair.
pub fn evaluate_pair(
    id: &str,
    reference: &Waveform,
    synthesized: &Waveform,
    mel: &MelConfig,
    f0: &F0Config,
) -> Result<PairMetrics> {
    let a = mel_spectrogram(reference, mel)?.frames;
    let b = mel_spectrogram(synthesized, mel)?.frames;
    let path = dtw_align(&a, &b)?;
    let fa = estimate_f0(reference, &mel.stft, f0)?;
    let fb = estimate_f0(synthesized, &mel.stft, f0)?;
    let pitch = f0_rmse(&fa, &fb, &path);
    Ok(PairMetrics {
        id: id.to_string(),
        mcd_db: mcd(&a, &b, &path)?,
        f0_rmse_hz: pitch.rmse_hz,
        fd_frames: frame_disturbance(&path),
        voiced_pairs: pitch.voiced_pairs,
    })
}

/// Per-pair rows plus corpus means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<PairMetrics>,
    pub mean_mcd_db: f64,
    /// Mean over rows with a defined value.
    pub mean_f0_rmse_hz: Option<f64>,
    pub mean_fd_frames: f64,
    pub voiced_pairs: usize,
    /// Ids of pairs that could not be evaluated, with the reason.
    pub failures: Vec<(String, String)>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Sorts rows by id and computes the means.
    pub fn new(
        mut rows: Vec<PairMetrics>,
        failures: Vec<(String, String)>,
        config: serde_json::Value,
    ) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len().max(1) as f64;
        let defined: Vec<f64> = rows.iter().filter_map(|r| r.f0_rmse_hz).collect();
        EvalReport {
            mean_mcd_db: rows.iter().map(|r| r.mcd_db).sum::<f64>() / n,
            mean_f0_rmse_hz: (!defined.is_empty())
                .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            mean_fd_frames: rows.iter().map(|r| r.fd_frames).sum::<f64>() / n,
            voiced_pairs: rows.iter().map(|r| r.voiced_pairs).sum(),
            rows,
            failures,
            config,
        }
    }

    /// `id,mcd_db,f0_rmse_hz,fd_frames,voiced_pairs`; undefined RMSE is empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "mcd_db", "f0_rmse_hz", "fd_frames", "voiced_pairs"])?;
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.mcd_db.to_string(),
                r.f0_rmse_hz.map(|v| v.to_string()).unwrap_or_default(),
                r.fd_frames.to_string(),
                r.voiced_pairs.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One system's corpus means, a row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemScores {
    pub system: String,
    pub mcd_db: f64,
    pub f0_rmse_hz: Option<f64>,
    pub fd_frames: f64,
}

impl SystemScores {
    pub fn from_report(system: &str, report: &EvalReport) -> Self {
        SystemScores {
            system: system.to_string(),
            mcd_db: report.mean_mcd_db,
            f0_rmse_hz: report.mean_f0_rmse_hz,
            fd_frames: report.mean_fd_frames,
        }
    }
}

/// Writes `system,mcd_db,f0_rmse_hz,fd_frames`.
pub fn write_system_table(rows: &[SystemScores], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["system", "mcd_db", "f0_rmse_hz", "fd_frames"])?;
    for r in rows {
        w.write_record([
            r.system.clone(),
            r.mcd_db.to_string(),
            r.f0_rmse_hz.map(|v| v.to_string()).unwrap_or_default(),
            r.fd_frames.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub within: f64,
    pub between: f64,
    /// `(between − within) / max(between, within)`.
    pub score: f64,
    pub labels: Vec<String>,
    /// Pairwise L2 distances, row-major over `labels`.
    pub distances: Vec<Vec<f64>>,
}

/// Mean within-group and between-group L2 distances of flattened features.
pub fn style_cluster_report(groups: &[(String, Vec<Tensor>)]) -> Result<ClusterReport> {
    if groups.len() < 2 {
        return Err(Error::invalid("cluster report needs at least two groups"));
    }
    if let Some((name, _)) = groups.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::invalid(format!(
            "group {name:?} has fewer than two members"
        )));
    }
    let mut points: Vec<(usize, &[f64])> = Vec::new();
    let mut labels = Vec::new();
    for (g, (name, members)) in groups.iter().enumerate() {
        for (k, m) in members.iter().enumerate() {
            if let Some((_, first)) = points.first() {
                if first.len() != m.numel() {
                    return Err(Error::invalid("cluster report: feature sizes differ"));
                }
            }
            points.push((g, m.data()));
            labels.push(format!("{name}/{k}"));
        }
    }
    let n = points.len();
    let mut distances = vec![vec![0.0; n]; n];
    let (mut within, mut wn, mut between, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(points[i].1, points[j].1);
            distances[i][j] = d;
            distances[j][i] = d;
            if points[i].0 == points[j].0 {
                within += d;
                wn += 1;
            } else {
                between += d;
                bn += 1;
            }
        }
    }
    let within = within / wn as f64;
    let between = between / bn as f64;
    let denom = within.max(between);
    Ok(ClusterReport {
        within,
        between,
        score: if denom > 0.0 {
            (between - within) / denom
        } else {
            0.0
        },
        labels,
        distances,
    })
}

impl ClusterReport {
    pub fn write_distance_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![String::from("id")];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.labels.iter().zip(&self.distances) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|d| d.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: Vec<Vec<f64>>) -> Tensor {
        Tensor::from_rows(&rows).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
        .unwrap()
    }

    /// Cost of every monotone path by explicit enumeration, accumulated
    /// from the start like the path is walked.
    fn brute_force(a: &Tensor, b: &Tensor) -> f64 {
        fn walk(a: &Tensor, b: &Tensor, i: usize, j: usize, acc: f64, best: &mut f64) {
            let acc = acc + euclidean(a.row(i), b.row(j));
            if i + 1 == a.rows() && j + 1 == b.rows() {
                *best = best.min(acc);
                return;
            }
            if i + 1 < a.rows() && j + 1 < b.rows() {
                walk(a, b, i + 1, j + 1, acc, best);
            }
            if i + 1 < a.rows() {
                walk(a, b, i + 1, j, acc, best);
            }
            if j + 1 < b.rows() {
                walk(a, b, i, j + 1, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(a, b, 0, 0, 0.0, &mut best);
        best
    }

    fn path(steps: &[(usize, usize)]) -> AlignmentPath {
        AlignmentPath {
            steps: steps.to_vec(),
            cost: 0.0,
        }
    }

    #[test]
    fn identical_sequences_align_diagonally() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(6, 3, &mut rng);
        let p = dtw_align(&a, &a).unwrap();
        assert_eq!(p.cost, 0.0);
        assert_eq!(p.steps, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn single_reference_frame_visits_every_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = dtw_align(&random(1, 2, &mut rng), &random(5, 2, &mut rng)).unwrap();
        assert_eq!(p.steps, (0..5).map(|j| (0, j)).collect::<Vec<_>>());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(dtw_align(&random(3, 2, &mut rng), &random(3, 4, &mut rng)).is_err());
    }

    #[test]
    fn dynamic_program_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (tx, ty) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let a = random(tx, 2, &mut rng);
            let b = random(ty, 2, &mut rng);
            let p = dtw_align(&a, &b).unwrap();
            p.validate(tx, ty).unwrap();
            assert_eq!(p.cost, brute_force(&a, &b), "{tx}×{ty}");
            let walked = p
                .steps
                .iter()
                .fold(0.0, |acc, &(i, j)| acc + euclidean(a.row(i), b.row(j)));
            assert_eq!(walked, p.cost);
        }
    }

    #[test]
    fn cost_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = random(rng.random_range(1..7), 3, &mut rng);
            let b = random(rng.random_range(1..7), 3, &mut rng);
            let ab = dtw_align(&a, &b).unwrap().cost;
            let ba = dtw_align(&b, &a).unwrap().cost;
            assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        }
    }

    #[test]
    fn mcd_hand_cases() {
        let k = 10.0 * 2f64.sqrt() / 10f64.ln();
        assert!((mcd_constant() - 6.141_851_463_713_754).abs() < 1e-12);
        let one = mcd(
            &mat(vec![vec![1.0]]),
            &mat(vec![vec![0.0]]),
            &path(&[(0, 0)]),
        )
        .unwrap();
        assert!((one - k).abs() < 1e-9);
        let two = mcd(
            &mat(vec![vec![3.0, 4.0]]),
            &mat(vec![vec![0.0, 0.0]]),
            &path(&[(0, 0)]),
        )
        .unwrap();
        assert!((two - k * 0.5 * 5.0).abs() < 1e-9);
        assert!((two - 15.3546).abs() < 1e-3);
        let same = mcd(
            &mat(vec![vec![3.0, 4.0]]),
            &mat(vec![vec![3.0, 4.0]]),
            &path(&[(0, 0)]),
        )
        .unwrap();
        assert_eq!(same, 0.0);
        assert!(mcd(&mat(vec![vec![1.0]]), &mat(vec![vec![1.0]]), &path(&[])).is_err());
    }

    #[test]
    fn f0_rmse_hand_cases() {
        let p = path(&[(0, 0), (1, 1)]);
        let e = f0_rmse(&[100.0, 100.0], &[100.0, 104.0], &p);
        assert!((e.rmse_hz.unwrap() - 8f64.sqrt()).abs() < 1e-9);
        assert_eq!(e.voiced_pairs, 2);
        assert_eq!(
            f0_rmse(&[120.0, 130.0], &[120.0, 130.0], &p).rmse_hz,
            Some(0.0)
        );
        let off = f0_rmse(
            &[120.0, 130.0, 0.0],
            &[127.5, 137.5, 90.0],
            &path(&[(0, 0), (1, 1), (2, 2)]),
        );
        assert!((off.rmse_hz.unwrap() - 7.5).abs() < 1e-9);
        assert_eq!(off.voiced_pairs, 2);
        let none = f0_rmse(&[0.0, 0.0], &[100.0, 0.0], &p);
        assert_eq!(
            none,
            F0Error {
                rmse_hz: None,
                voiced_pairs: 0
            }
        );
    }

    #[test]
    fn frame_disturbance_hand_cases() {
        assert_eq!(frame_disturbance(&path(&[(0, 0), (1, 1), (2, 2)])), 0.0);
        let fd = frame_disturbance(&path(&[(0, 0), (1, 0), (2, 1)]));
        assert!((fd - (2.0f64 / 3.0).sqrt()).abs() < 1e-9);
        let t = 6;
        let steps: Vec<_> = (0..t).map(|x| (x, 0)).collect();
        let expected = ((0..t).map(|x| (x * x) as f64).sum::<f64>() / t as f64).sqrt();
        assert!((frame_disturbance(&path(&steps)) - expected).abs() < 1e-9);
    }

    #[test]
    fn cluster_scores() {
        let p = |v: f64| Tensor::from_vec(vec![v, v]);
        let groups = vec![
            ("a".to_string(), vec![p(0.0), p(0.0)]),
            ("b".to_string(), vec![p(5.0), p(5.0)]),
        ];
        assert_eq!(style_cluster_report(&groups).unwrap().score, 1.0);
        let g = vec![p(0.0), p(1.0), p(3.0)];
        let dup = vec![("x".to_string(), g.clone()), ("y".to_string(), g)];
        assert!(style_cluster_report(&dup).unwrap().score <= 0.0);
        let single = vec![
            ("x".to_string(), vec![p(0.0)]),
            ("y".to_string(), vec![p(1.0), p(2.0)]),
        ];
        assert!(style_cluster_report(&single).is_err());
    }

    #[test]
    fn report_means_and_files() {
        let rows = vec![
            PairMetrics {
                id: "b".into(),
                mcd_db: 2.0,
                f0_rmse_hz: None,
                fd_frames: 1.0,
                voiced_pairs: 0,
            },
            PairMetrics {
                id: "a".into(),
                mcd_db: 4.0,
                f0_rmse_hz: Some(3.0),
                fd_frames: 0.0,
                voiced_pairs: 7,
            },
        ];
        let r = EvalReport::new(rows, vec![], serde_json::json!({}));
        assert_eq!(r.rows[0].id, "a");
        assert_eq!(r.mean_mcd_db, 3.0);
        assert_eq!(r.mean_f0_rmse_hz, Some(3.0));
        assert_eq!(r.mean_fd_frames, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("pairs.csv");
        r.write_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "id,mcd_db,f0_rmse_hz,fd_frames,voiced_pairs"
        );
        assert_eq!(text.lines().nth(2).unwrap(), "b,2,,1,0");
    }

    #[test]
    fn waveform_against_itself_scores_zero() {
        let w = Waveform::new(
            (0..6000)
                .map(|n| 0.4 * (2.0 * std::f64::consts::PI * 180.0 * n as f64 / 16000.0).sin())
                .collect(),
            16000,
        );
        let m = evaluate_pair("x", &w, &w, &MelConfig::default(), &F0Config::default()).unwrap();
        assert_eq!((m.mcd_db, m.f0_rmse_hz, m.fd_frames), (0.0, Some(0.0), 0.0));
        assert!(m.voiced_pairs > 0);
    }

    proptest! {
        #[test]
        fn metrics_are_non_negative(
            a in proptest::collection::vec(-3.0f64..3.0, 8),
            b in proptest::collection::vec(-3.0f64..3.0, 12),
        ) {
            let a = Tensor::new(vec![4, 2], a).unwrap();
            let b = Tensor::new(vec![6, 2], b).unwrap();
            let p = dtw_align(&a, &b).unwrap();
            prop_assert!(p.cost >= 0.0);
            prop_assert!(mcd(&a, &b, &p).unwrap() >= 0.0);
            prop_assert!(frame_disturbance(&p) >= 0.0);
            prop_assert!(p.validate(4, 6).is_ok());
        }
    }
}
