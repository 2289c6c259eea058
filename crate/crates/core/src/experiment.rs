//! End-to-end pipelines behind the CLI verbs. Each writes its artifacts plus
//! the effective `config.toml` into an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{self, MultiViewDataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{self, ClusterSweepResult, Evaluation, MetricsRow};
use crate::model::WvaeModel;
use crate::seed;
use crate::simdata::{self, SynthConfig, SyntheticData};
use crate::training::{self, SelectionSummary};

const KMEANS_STREAM: u64 = 21;

/// The dataset block with its perturbation variance set for `pnr_db`.
pub fn dataset_at_pnr(base: &SynthConfig, pnr_db: f64) -> Result<SynthConfig> {
    let mut cfg = base.clone();
    cfg.csi.perturb_var = simdata::pnr_from_db(pnr_db)? * cfg.csi.noise_var;
    cfg.validate()?;
    Ok(cfg)
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_toml(value)?)?;
    Ok(())
}

pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<SyntheticData> {
    cfg.echo(out)?;
    let data = simdata::assemble_dataset(&cfg.dataset)?;
    data::save_dataset(out, &data.train, &data.test, Some(data.record.clone()))?;
    Ok(data)
}

fn load_or_generate(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<(MultiViewDataset, MultiViewDataset)> {
    match data_dir {
        Some(dir) => Ok((data::load_split(dir, Split::Train)?, data::load_split(dir, Split::Test)?)),
        None => {
            let d = simdata::assemble_dataset(&cfg.dataset)?;
            Ok((d.train, d.test))
        }
    }
}

/// Runs the configured trials, keeps the selected model under `out/model`.
pub fn train(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: &Path) -> Result<SelectionSummary> {
    cfg.echo(out)?;
    let (train, test) = load_or_generate(cfg, data_dir)?;
    let set = training::run_trials(&cfg.setup(), &train, Some(&test))?;
    set.write_reports(out)?;
    set.best().model.save(&out.join("model"))?;
    Ok(set.summary())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub split: String,
    pub samples: usize,
    pub matched_accuracy: f64,
    pub direct_accuracy: f64,
    pub entropy: f64,
    pub loss: f64,
    pub permutation: Vec<usize>,
}

/// Scores a checkpoint on one split; writes `eval.toml` and `confusion.csv`.
pub fn eval(checkpoint: &Path, data_dir: &Path, split: Split, out: &Path) -> Result<Evaluation> {
    let model = WvaeModel::load(checkpoint)?;
    let ds = data::load_split(data_dir, split)?;
    let ev = evaluation::evaluate(&model, &ds)?;
    fs::create_dir_all(out)?;
    let summary = EvalSummary {
        split: split.name().to_string(),
        samples: ds.len(),
        matched_accuracy: ev.matched_accuracy,
        direct_accuracy: ev.direct_accuracy,
        entropy: ev.entropy,
        loss: ev.loss,
        permutation: ev.matching.permutation.clone(),
    };
    write_toml(&out.join("eval.toml"), &summary)?;
    fs::write(out.join("confusion.csv"), ev.confusion_csv())?;
    Ok(ev)
}

fn kmeans_seed(cfg: &ExperimentConfig) -> u64 {
    seed::derive(cfg.train.seed, KMEANS_STREAM, 0)
}

/// K-means on cascaded features; writes one `kmeans` row to `metrics.csv`.
pub fn baseline(cfg: &ExperimentConfig, data_dir: Option<&Path>, k: Option<usize>, out: &Path) -> Result<MetricsRow> {
    cfg.echo(out)?;
    let (train, test) = load_or_generate(cfg, data_dir)?;
    let k = k.unwrap_or(train.classes);
    let res = evaluation::kmeans_baseline(&train, &test, k, kmeans_seed(cfg))?;
    let pnr_db = match data_dir {
        Some(dir) => data::load_manifest(dir)?.generator.map_or(f64::NAN, |g| g.pnr_db),
        None => (simdata::pnr_to_db(cfg.dataset.csi.pnr())? * 1e9).round() / 1e9,
    };
    let row = MetricsRow {
        experiment: "baseline".into(),
        pnr_db,
        regime: "kmeans".into(),
        alpha_traffic: f64::NAN,
        accuracy: res.accuracy,
        loss: res.inertia,
    };
    evaluation::write_metrics(&out.join("metrics.csv"), std::slice::from_ref(&row))?;
    Ok(row)
}

/// Regenerates data at every PNR point, trains each configured regime and
/// writes one metrics row per point and regime, plus K-means rows when
/// `sweep.baseline` is set.
pub fn sweep_pnr(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MetricsRow>> {
    cfg.echo(out)?;
    let regimes = cfg.sweep_regimes();
    let mut rows = Vec::new();
    for &pnr_db in &cfg.sweep.pnr_db {
        let ds_cfg = dataset_at_pnr(&cfg.dataset, pnr_db)?;
        let data = simdata::assemble_dataset(&ds_cfg)?;
        for &regime in &regimes {
            let mut setup = cfg.setup();
            setup.train.regime = regime;
            let set = training::run_trials(&setup, &data.train, Some(&data.test))?;
            let ev = evaluation::evaluate(&set.best().model, &data.test)?;
            rows.push(MetricsRow {
                experiment: "sweep-pnr".into(),
                pnr_db,
                regime: regime.name().into(),
                alpha_traffic: set.best().model.weights()[0],
                accuracy: ev.matched_accuracy,
                loss: set.best().final_loss(),
            });
        }
        if cfg.sweep.baseline {
            let res = evaluation::kmeans_baseline(&data.train, &data.test, ds_cfg.classes, kmeans_seed(cfg))?;
            rows.push(MetricsRow {
                experiment: "sweep-pnr".into(),
                pnr_db,
                regime: "kmeans".into(),
                alpha_traffic: f64::NAN,
                accuracy: res.accuracy,
                loss: res.inertia,
            });
        }
    }
    evaluation::write_metrics(&out.join("metrics.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct DetectSummary {
    z_values: Vec<usize>,
    trials_per_z: usize,
    detected: bool,
    detected_k: Option<usize>,
}

/// Sweeps `|Z|` with unsupervised training; writes `loss_curve.csv` and
/// `detect.toml`.
pub fn detect_k(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: &Path) -> Result<ClusterSweepResult> {
    cfg.echo(out)?;
    let (train, _) = load_or_generate(cfg, data_dir)?;
    let mut setup = cfg.setup();
    setup.train.trials = Some(cfg.sweep.detect_trials);
    let res = evaluation::detect_clusters(&setup, &train, &cfg.z_values())?;
    fs::write(out.join("loss_curve.csv"), res.to_csv())?;
    let summary = DetectSummary {
        z_values: res.z_values.clone(),
        trials_per_z: cfg.sweep.detect_trials,
        detected: res.detected_k.is_some(),
        detected_k: res.detected_k,
    };
    write_toml(&out.join("detect.toml"), &summary)?;
    Ok(res)
}

/// Reliability-weight sweep over `sweep.alpha_grid`; writes `alpha.csv`.
pub fn sweep_alpha(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: &Path) -> Result<(Vec<evaluation::AlphaRow>, usize)> {
    cfg.echo(out)?;
    let (train, test) = load_or_generate(cfg, data_dir)?;
    let (rows, best) = evaluation::sweep_alpha(&cfg.setup(), &train, &test, &cfg.sweep.alpha_grid)?;
    let mut csv = String::from("alpha_traffic,accuracy,loss,best\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{},{}", r.alpha, r.accuracy, r.loss, u8::from(i == best));
    }
    fs::write(out.join("alpha.csv"), csv)?;
    Ok((rows, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Regime;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::default()
            .with_overrides(&[
                "dataset.classes=3",
                "dataset.n_train=30",
                "dataset.n_test=15",
                "dataset.csi.subcarriers=4",
                "dataset.traffic.uplink_len=10",
                "dataset.traffic.downlink_len=10",
                "dataset.traffic.band_len=4",
                "model.z_card=3",
                "model.hidden=[8]",
                "train.epochs=2",
                "train.trials=2",
                "sweep.pnr_db=[3, 6]",
                "sweep.z_min=2",
                "sweep.z_max=4",
                "sweep.detect_trials=1",
            ])
            .unwrap()
    }

    #[test]
    fn pnr_sets_perturbation() {
        let c = dataset_at_pnr(&SynthConfig::default(), 10.0).unwrap();
        assert!((c.csi.perturb_var - 10.0 * c.csi.noise_var).abs() < 1e-9);
        assert!(dataset_at_pnr(&SynthConfig::default(), f64::NAN).is_err());
    }

    #[test]
    fn pipelines_write_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let data_dir = dir.path().join("data");
        generate(&cfg, &data_dir).unwrap();
        let run = dir.path().join("run");
        let s = train(&cfg, Some(&data_dir), &run).unwrap();
        assert_eq!(s.trials, 2);
        let ev = eval(&run.join("model"), &data_dir, Split::Test, &dir.path().join("eval")).unwrap();
        assert!((0.0..=1.0).contains(&ev.matched_accuracy));
        assert!(dir.path().join("eval/confusion.csv").exists());
        let row = baseline(&cfg, Some(&data_dir), None, &dir.path().join("base")).unwrap();
        assert_eq!(row.regime, "kmeans");
        let rows = sweep_pnr(&cfg, &dir.path().join("sweep")).unwrap();
        assert_eq!(rows.len(), 2);
        let res = detect_k(&cfg, Some(&data_dir), &dir.path().join("detect")).unwrap();
        assert_eq!(res.z_values, vec![2, 3, 4]);
        for f in ["run/config.toml", "run/selection.toml", "sweep/metrics.csv", "detect/loss_curve.csv", "detect/detect.toml"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn eval_rejects_cardinality_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let data_dir = dir.path().join("data");
        generate(&cfg, &data_dir).unwrap();
        let other = cfg.with_overrides(&["model.z_card=4"]).unwrap();
        let mut setup = other.setup();
        setup.train.regime = Regime::Unsupervised;
        let train_ds = data::load_split(&data_dir, Split::Train).unwrap();
        let set = training::run_trials(&setup, &train_ds, None).unwrap();
        set.best().model.save(&dir.path().join("m")).unwrap();
        let err = eval(&dir.path().join("m"), &data_dir, Split::Test, &dir.path().join("e")).unwrap_err();
        assert_eq!(err.kind(), "cardinality_mismatch");
    }
}
