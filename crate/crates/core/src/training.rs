//! Multi-trial training: seeded minibatch epochs with ADAM, restarts, and
//! model selection.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultiViewDataset;
use crate::error::{check_dim, Error, Result};
use crate::evaluation;
use crate::expfam::Family;
use crate::model::{ModelConfig, Supervision, ViewSpec, WvaeModel};
use crate::network::AdamState;
use crate::seed;

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;
const STREAM_TRIAL: u64 = 13;
const STREAM_MASK: u64 = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Unsupervised,
    Supervised,
    Semisupervised,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Unsupervised => "unsupervised",
            Regime::Supervised => "supervised",
            Regime::Semisupervised => "semisupervised",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            Regime::Supervised => 25,
            Regime::Unsupervised | Regime::Semisupervised => 40,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(Regime::Unsupervised),
            "supervised" => Ok(Regime::Supervised),
            "semisupervised" => Ok(Regime::Semisupervised),
            _ => Err(Error::InvalidArgument(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Defaults to the regime's trial count when absent.
    pub trials: Option<usize>,
    /// Fraction of training samples whose labels are visible (semi-supervised).
    pub label_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Supervised,
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            trials: None,
            label_fraction: 0.1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn trials(&self) -> usize {
        self.trials.unwrap_or_else(|| self.regime.default_trials())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.trials() == 0 {
            return Err(Error::InvalidArgument("epochs, batch_size and trials must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(Error::InvalidArgument(format!("label fraction {} not in [0,1]", self.label_fraction)));
        }
        Ok(())
    }
}

/// Everything a trial needs besides data: model shape, view weights and
/// optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub alpha: Vec<f64>,
    /// Overrides the dataset's per-view families; `None` keeps them.
    pub families: Option<Vec<Family>>,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn view_specs(&self, data: &MultiViewDataset) -> Result<Vec<ViewSpec>> {
        let families = self.families.clone().unwrap_or_else(|| data.families.clone());
        check_dim("view families", data.views.len(), families.len())?;
        check_dim("view weights", data.views.len(), self.alpha.len())?;
        Ok(families
            .into_iter()
            .zip(data.dims())
            .zip(&self.alpha)
            .map(|((f, d), &a)| ViewSpec::new(f, d, a))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub trial: usize,
    pub seed: u64,
    /// Mean per-sample loss of every epoch.
    pub trajectory: Vec<f64>,
    pub model: WvaeModel,
    /// Matched accuracy on the held-out split, when one was given.
    pub heldout_accuracy: Option<f64>,
    /// The value model selection ranks by.
    pub metric: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.trajectory.last().unwrap_or(&f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub regime: Regime,
    pub reports: Vec<TrainReport>,
    pub selected: usize,
}

impl TrialSet {
    pub fn best(&self) -> &TrainReport {
        &self.reports[self.selected]
    }
}

/// Seeded class-stratified subset: `round(fraction * n_k)` labeled samples per
/// class `k`.
pub fn label_mask(data: &MultiViewDataset, fraction: f64, seed_value: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("label fraction {fraction} not in [0,1]")));
    }
    let labels = data.labels.as_ref().ok_or(Error::LabelsRequired("label mask"))?;
    let mut mask = vec![false; labels.len()];
    let mut rng = seed::rng(seed_value);
    for k in 0..data.classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&n| labels[n] as usize == k).collect();
        members.shuffle(&mut rng);
        let take = (fraction * members.len() as f64).round() as usize;
        for &n in &members[..take] {
            mask[n] = true;
        }
    }
    Ok(mask)
}

fn trial_labels(regime: Regime, data: &MultiViewDataset) -> Result<Option<&[u32]>> {
    match regime {
        Regime::Unsupervised => Ok(None),
        Regime::Supervised | Regime::Semisupervised => data
            .labels
            .as_deref()
            .map(Some)
            .ok_or(Error::LabelsRequired(regime.name())),
    }
}

/// One training run from a fresh initialization drawn from `trial_seed`.
pub fn run_trial(setup: &TrainSetup, data: &MultiViewDataset, trial_seed: u64) -> Result<TrainReport> {
    let cfg = &setup.train;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let labels = trial_labels(cfg.regime, data)?;
    let mask = match cfg.regime {
        Regime::Semisupervised => Some(label_mask(data, cfg.label_fraction, seed::derive(cfg.seed, STREAM_MASK, 0))?),
        _ => None,
    };
    let views = setup.view_specs(data)?;
    let mut model = WvaeModel::new(&setup.model, views, &mut seed::rng(seed::derive(trial_seed, STREAM_INIT, 0)))?;
    let mut adam = AdamState::new(model.param_count(), cfg.learning_rate);
    let mut grads = model.zero_grads();
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(trial_seed, STREAM_SHUFFLE, epoch as u64)));
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.batch(idx);
            let batch_labels: Option<Vec<u32>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let batch_mask: Option<Vec<bool>> = mask.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect());
            let sup = match (&batch_labels, &batch_mask) {
                (None, _) => Supervision::Unlabeled,
                (Some(l), None) => Supervision::Labeled(l),
                (Some(l), Some(m)) => Supervision::Partial { labels: l, mask: m },
            };
            let loss = model.loss_and_grad(&batch, sup, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            total += loss * idx.len() as f64;
            adam.step(&mut model.param_blocks_mut(), &grads.blocks())?;
        }
        trajectory.push(total / n as f64);
    }
    let final_loss = *trajectory.last().unwrap();
    Ok(TrainReport {
        trial: 0,
        seed: trial_seed,
        trajectory,
        model,
        heldout_accuracy: None,
        metric: final_loss,
    })
}

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    seed::derive(master, STREAM_TRIAL, trial as u64)
}

/// Index of the best metric: maximum when `maximize`, else minimum. NaN ranks
/// last and ties go to the lowest index.
pub fn select_index(metrics: &[f64], maximize: bool) -> usize {
    let key = |m: f64| {
        if m.is_nan() {
            f64::NEG_INFINITY
        } else if maximize {
            m
        } else {
            -m
        }
    };
    let mut best = 0;
    for (i, &m) in metrics.iter().enumerate() {
        if key(m) > key(metrics[best]) {
            best = i;
        }
    }
    best
}

/// Runs all trials and selects one: maximum held-out matched accuracy for the
/// supervised regime, minimum final training loss otherwise.
pub fn run_trials(setup: &TrainSetup, train: &MultiViewDataset, heldout: Option<&MultiViewDataset>) -> Result<TrialSet> {
    setup.train.validate()?;
    let regime = setup.train.regime;
    trial_labels(regime, train)?;
    if regime == Regime::Supervised && heldout.is_none() {
        return Err(Error::InvalidArgument("supervised selection needs a held-out split".into()));
    }
    let reports = (0..setup.train.trials())
        .into_par_iter()
        .map(|t| {
            let mut r = run_trial(setup, train, trial_seed(setup.train.seed, t))?;
            r.trial = t;
            if let Some(h) = heldout {
                if h.labels.is_some() && (regime == Regime::Supervised || r.model.z_card() == h.classes) {
                    r.heldout_accuracy = Some(evaluation::evaluate(&r.model, h)?.matched_accuracy);
                }
            }
            if regime == Regime::Supervised {
                r.metric = r.heldout_accuracy.ok_or(Error::LabelsRequired("held-out accuracy"))?;
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<f64> = reports.iter().map(|r| r.metric).collect();
    let selected = select_index(&metrics, regime == Regime::Supervised);
    Ok(TrialSet { regime, reports, selected })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub regime: Regime,
    pub trials: usize,
    pub selected: usize,
    /// Decimal string: TOML integers are signed 64-bit.
    #[serde(with = "u64_string")]
    pub selected_seed: u64,
    pub metric: f64,
    pub final_loss: f64,
    pub heldout_accuracy: Option<f64>,
    pub trial_metrics: Vec<f64>,
}

mod u64_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl TrialSet {
    pub fn summary(&self) -> SelectionSummary {
        let best = self.best();
        SelectionSummary {
            regime: self.regime,
            trials: self.reports.len(),
            selected: self.selected,
            selected_seed: best.seed,
            metric: best.metric,
            final_loss: best.final_loss(),
            heldout_accuracy: best.heldout_accuracy,
            trial_metrics: self.reports.iter().map(|r| r.metric).collect(),
        }
    }

    /// Writes `trajectory_<trial>.csv` per trial and `selection.toml`.
    pub fn write_reports(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for r in &self.reports {
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in r.trajectory.iter().enumerate() {
                csv.push_str(&format!("{},{l}\n", e + 1));
            }
            fs::write(dir.join(format!("trajectory_{}.csv", r.trial)), csv)?;
        }
        let text = toml::to_string(&self.summary()).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("selection.toml"), text)?;
        Ok(())
    }
}
