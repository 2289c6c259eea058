//! Testing-phase metrics: optimal cluster-to-label matching, accuracy,
//! weighting sweeps, cluster-count detection and the K-means baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Matrix, MultiViewDataset};
use crate::error::{check_dim, Error, Result};
use crate::model::{conditional_entropy, Posterior, Supervision, WvaeModel};
use crate::seed;
use crate::training::{run_trials, select_index, TrainSetup};

/// Minimum-cost perfect assignment on a square cost matrix (row-major `n x n`),
/// by shortest augmenting paths with dual potentials. Returns `row -> column`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    check_dim("assignment cost matrix", n * n, cost.len())?;
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost"));
    }
    // 1-based arrays; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let reduced = cost[(r - 1) * n + (c - 1)] - u[r] - v[c];
                if reduced < minv[c] {
                    minv[c] = reduced;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for c in 1..=n {
        if owner[c] > 0 {
            assignment[owner[c] - 1] = c - 1;
        }
    }
    Ok(assignment)
}

/// `table[c * k + y]`: samples predicted in cluster `c` with label `y`.
pub fn contingency(pred: &[usize], truth: &[u32], k: usize) -> Result<Vec<usize>> {
    check_dim("prediction/label count", pred.len(), truth.len())?;
    let mut table = vec![0; k * k];
    for (&c, &y) in pred.iter().zip(truth) {
        let y = y as usize;
        for (index, bound) in [(c, k), (y, k)] {
            if index >= bound {
                return Err(Error::IndexOutOfRange {
                    context: "cluster or label",
                    index,
                    bound,
                });
            }
        }
        table[c * k + y] += 1;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMatching {
    /// `permutation[cluster] = label`.
    pub permutation: Vec<usize>,
    pub matched_accuracy: f64,
}

/// Bijection from clusters to labels maximizing the number of agreements.
pub fn match_labels(pred: &[usize], truth: &[u32], k: usize) -> Result<LabelMatching> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let table = contingency(pred, truth, k)?;
    let max = *table.iter().max().unwrap_or(&0) as f64;
    let cost: Vec<f64> = table.iter().map(|&c| max - c as f64).collect();
    let permutation = min_cost_assignment(&cost, k)?;
    let hits: usize = permutation.iter().enumerate().map(|(c, &y)| table[c * k + y]).sum();
    Ok(LabelMatching {
        permutation,
        matched_accuracy: if pred.is_empty() { 0.0 } else { hits as f64 / pred.len() as f64 },
    })
}

/// Fraction of rows whose mapped argmax equals the label.
pub fn accuracy(posterior: &Posterior, truth: &[u32], matching: &LabelMatching) -> Result<f64> {
    check_dim("labels", posterior.n, truth.len())?;
    check_dim("matching size", posterior.z_card, matching.permutation.len())?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let hits = posterior
        .argmax()
        .iter()
        .zip(truth)
        .filter(|(&z, &y)| matching.permutation[z] == y as usize)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `confusion[y * k + label]`: true label `y` predicted (after matching) as `label`.
pub fn confusion_matrix(pred: &[usize], truth: &[u32], matching: &LabelMatching, k: usize) -> Vec<usize> {
    let mut m = vec![0; k * k];
    for (&c, &y) in pred.iter().zip(truth) {
        m[y as usize * k + matching.permutation[c]] += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub matched_accuracy: f64,
    /// Accuracy with clusters read directly as labels.
    pub direct_accuracy: f64,
    pub entropy: f64,
    /// Unsupervised objective on the split.
    pub loss: f64,
    pub matching: LabelMatching,
    pub confusion: Vec<usize>,
    pub classes: usize,
}

/// Scores a model on a labeled split whose class count equals `|Z|`.
pub fn evaluate(model: &WvaeModel, data: &MultiViewDataset) -> Result<Evaluation> {
    if model.z_card() != data.classes {
        return Err(Error::CardinalityMismatch {
            checkpoint: model.z_card(),
            dataset: data.classes,
        });
    }
    check_dim("dataset views", model.views().len(), data.views.len())?;
    for (spec, dim) in model.views().iter().zip(data.dims()) {
        check_dim("view dimension", spec.dim, dim)?;
    }
    let truth = data.labels.as_ref().ok_or(Error::LabelsRequired("evaluation"))?;
    let k = data.classes;
    let table = model.loglik_table(&data.views)?;
    let weights = model.weights();
    let posterior = crate::model::common_encoder(&table, &weights)?;
    let loss = crate::model::objective_from_table(&table, &weights, Supervision::Unlabeled, None)?;
    let pred = posterior.argmax();
    let matching = match_labels(&pred, truth, k)?;
    let identity = LabelMatching {
        permutation: (0..k).collect(),
        matched_accuracy: 0.0,
    };
    Ok(Evaluation {
        matched_accuracy: accuracy(&posterior, truth, &matching)?,
        direct_accuracy: accuracy(&posterior, truth, &identity)?,
        entropy: conditional_entropy(&posterior),
        loss,
        confusion: confusion_matrix(&pred, truth, &matching, k),
        matching,
        classes: k,
    })
}

impl Evaluation {
    pub fn confusion_csv(&self) -> String {
        let k = self.classes;
        let mut s = String::from("label");
        for c in 0..k {
            let _ = write!(s, ",pred_{c}");
        }
        s.push('\n');
        for y in 0..k {
            let _ = write!(s, "{y}");
            for c in 0..k {
                let _ = write!(s, ",{}", self.confusion[y * k + c]);
            }
            s.push('\n');
        }
        s
    }
}

// ---------------------------------------------------------------------------
// K-means.

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeansResult {
    /// Nearest centroid per row; ties go to the lowest index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        check_dim("feature width", self.centroids.cols, x.cols)?;
        Ok((0..x.rows).map(|i| nearest(&self.centroids, x.row(i)).0).collect())
    }
}

fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows {
        let d = sq_dist(centroids.row(c), x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding.
pub fn kmeans_pp_init<R: Rng + ?Sized>(x: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let mut centroids = Matrix::zeros(k, x.cols);
    let first = rng.gen_range(0..x.rows);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..x.rows).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = x.rows - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.gen_range(0..x.rows)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    centroids
}

/// Lloyd iterations from `centroids` until assignments stop changing or
/// `max_iter` is reached. Also returns the objective after every iteration.
/// Empty clusters keep their previous centroid.
pub fn lloyd(x: &Matrix, mut centroids: Matrix, max_iter: usize) -> (KMeansResult, Vec<f64>) {
    let k = centroids.rows;
    let mut assignments = vec![usize::MAX; x.rows];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..x.rows {
            let (c, d) = nearest(&centroids, x.row(i));
            inertia += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, x.cols);
        let mut counts = vec![0usize; k];
        for i in 0..x.rows {
            let c = assignments[i];
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    let inertia = (0..x.rows).map(|i| sq_dist(x.row(i), centroids.row(assignments[i]))).sum();
    (
        KMeansResult {
            assignments,
            centroids,
            inertia,
            iterations,
        },
        history,
    )
}

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 300;

/// Best of [`KMEANS_RESTARTS`] k-means++ / Lloyd runs by within-cluster sum of squares.
pub fn kmeans(x: &Matrix, k: usize, seed_value: u64) -> Result<KMeansResult> {
    if k == 0 || k > x.rows {
        return Err(Error::InvalidArgument(format!("K={k} must be in 1..={}", x.rows)));
    }
    let runs: Vec<KMeansResult> = (0..KMEANS_RESTARTS as u64)
        .into_par_iter()
        .map(|r| {
            let init = kmeans_pp_init(x, k, &mut seed::rng(seed::derive(seed_value, 21, r)));
            lloyd(x, init, KMEANS_MAX_ITER).0
        })
        .collect();
    let inertias: Vec<f64> = runs.iter().map(|r| r.inertia).collect();
    Ok(runs.into_iter().nth(select_index(&inertias, false)).unwrap())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub accuracy: f64,
    pub matching: LabelMatching,
    pub inertia: f64,
}

/// K-means on cascaded view features: fit on `train`, assign `test` to the
/// nearest centroid, and score with optimal matching.
pub fn kmeans_baseline(train: &MultiViewDataset, test: &MultiViewDataset, k: usize, seed_value: u64) -> Result<BaselineResult> {
    let fit = kmeans(&train.cascaded_features()?, k, seed_value)?;
    let pred = fit.predict(&test.cascaded_features()?)?;
    let truth = test.labels.as_ref().ok_or(Error::LabelsRequired("baseline"))?;
    let kk = k.max(test.classes);
    let matching = match_labels(&pred, truth, kk)?;
    Ok(BaselineResult {
        accuracy: matching.matched_accuracy,
        matching,
        inertia: fit.inertia,
    })
}

// ---------------------------------------------------------------------------
// Sweeps.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub loss: f64,
}

/// Trains, selects and evaluates once per `alpha` (weight of view 0; the
/// remaining mass goes to view 1). Returns the rows and the best row index.
pub fn sweep_alpha(setup: &TrainSetup, train: &MultiViewDataset, test: &MultiViewDataset, grid: &[f64]) -> Result<(Vec<AlphaRow>, usize)> {
    if grid.is_empty() || grid.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::InvalidArgument(format!("alpha grid {grid:?} must be nonempty in (0,1)")));
    }
    check_dim("views for an alpha sweep", 2, train.views.len())?;
    let rows = grid
        .iter()
        .map(|&a| {
            let mut s = setup.clone();
            s.alpha = vec![a, 1.0 - a];
            let set = run_trials(&s, train, Some(test))?;
            let ev = evaluate(&set.best().model, test)?;
            Ok(AlphaRow {
                alpha: a,
                accuracy: ev.matched_accuracy,
                loss: set.best().final_loss(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let best = select_index(&accs, true);
    Ok((rows, best))
}

/// Ratio bound between the slope after the knee and the slope before it.
pub const KNEE_SLOPE_RATIO: f64 = 0.25;

/// Position of the sharpest transition in a decreasing curve: the interior
/// point maximizing the discrete second difference, accepted only when the
/// curve drops into it and stays flat after it.
pub fn find_knee(losses: &[f64]) -> Option<usize> {
    if losses.len() < 3 {
        return None;
    }
    let second: Vec<f64> = (1..losses.len() - 1)
        .map(|i| losses[i - 1] - 2.0 * losses[i] + losses[i + 1])
        .collect();
    let i = select_index(&second, true) + 1;
    let pre = losses[i - 1] - losses[i];
    let post = losses[i] - losses[i + 1];
    (pre > 0.0 && post.abs() < KNEE_SLOPE_RATIO * pre).then_some(i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSweepResult {
    pub z_values: Vec<usize>,
    pub losses: Vec<f64>,
    /// `None` when the curve has no sharp transition.
    pub detected_k: Option<usize>,
}

impl ClusterSweepResult {
    pub fn from_curve(z_values: Vec<usize>, losses: Vec<f64>) -> Result<Self> {
        check_dim("loss curve", z_values.len(), losses.len())?;
        if z_values.len() < 3 {
            return Err(Error::InvalidArgument("cluster range must cover at least 3 values".into()));
        }
        if z_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("cluster range must be strictly increasing".into()));
        }
        let detected_k = find_knee(&losses).map(|i| z_values[i]);
        Ok(Self { z_values, losses, detected_k })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("z,loss\n");
        for (z, l) in self.z_values.iter().zip(&self.losses) {
            let _ = writeln!(s, "{z},{l}");
        }
        s
    }
}

/// Trains an unsupervised model per `|Z|` and locates the loss knee.
pub fn detect_clusters(setup: &TrainSetup, train: &MultiViewDataset, z_values: &[usize]) -> Result<ClusterSweepResult> {
    if z_values.len() < 3 {
        return Err(Error::InvalidArgument("cluster range must cover at least 3 values".into()));
    }
    let losses = z_values
        .iter()
        .map(|&z| {
            let mut s = setup.clone();
            s.model.z_card = z;
            s.train.regime = crate::training::Regime::Unsupervised;
            Ok(run_trials(&s, train, None)?.best().final_loss())
        })
        .collect::<Result<Vec<_>>>()?;
    ClusterSweepResult::from_curve(z_values.to_vec(), losses)
}

// ---------------------------------------------------------------------------
// Metrics CSV.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub pnr_db: f64,
    pub regime: String,
    pub alpha_traffic: f64,
    pub accuracy: f64,
    pub loss: f64,
}

pub const METRICS_HEADER: &str = "experiment,pnr_db,regime,alpha_traffic,accuracy,loss";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.experiment, r.pnr_db, r.regime, r.alpha_traffic, r.accuracy, r.loss);
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, metrics_csv(rows))?;
    Ok(())
}
