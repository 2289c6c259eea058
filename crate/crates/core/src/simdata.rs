//! Synthetic two-view fingerprint data: least-squares CSI estimates over a
//! perturbed Rayleigh channel and class-conditioned binary traffic states.

use nalgebra::{Complex, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Matrix, MultiViewDataset, Split};
use crate::error::{check_dim, Error, Result};
use crate::expfam::Family;
use crate::seed;

pub type C64 = Complex<f64>;

const STREAM_CHANNEL: u64 = 1;
const STREAM_PROFILE: u64 = 2;
const STREAM_PILOT: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_TEST: u64 = 5;
const STREAM_LABELS: u64 = 6;

pub fn pnr_from_db(db: f64) -> Result<f64> {
    if !db.is_finite() {
        return Err(Error::InvalidArgument(format!("PNR of {db} dB is not finite")));
    }
    Ok(10f64.powf(db / 10.0))
}

pub fn pnr_to_db(ratio: f64) -> Result<f64> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "PNR ratio must be positive and finite, got {ratio}"
        )));
    }
    Ok(10.0 * ratio.log10())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsiConfig {
    /// Pilot power over total complex noise power, in dB.
    pub pilot_snr_db: f64,
    /// Receiver noise variance per real component.
    pub noise_var: f64,
    /// Channel perturbation variance per real component.
    pub perturb_var: f64,
    pub subcarriers: usize,
}

impl Default for CsiConfig {
    fn default() -> Self {
        Self {
            pilot_snr_db: 10.0,
            noise_var: 16.0,
            perturb_var: 16.0 * 10f64.powf(0.3),
            subcarriers: 72,
        }
    }
}

impl CsiConfig {
    /// Sets `perturb_var = PNR * noise_var`.
    pub fn from_pnr_db(pnr_db: f64, noise_var: f64) -> Result<Self> {
        let cfg = Self {
            noise_var,
            perturb_var: pnr_from_db(pnr_db)? * noise_var,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pnr(&self) -> f64 {
        self.perturb_var / self.noise_var
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_var must be > 0, got {}", self.noise_var)));
        }
        if !(self.perturb_var >= 0.0 && self.perturb_var.is_finite()) {
            return Err(Error::InvalidArgument(format!("perturb_var must be >= 0, got {}", self.perturb_var)));
        }
        if self.subcarriers == 0 {
            return Err(Error::InvalidArgument("subcarriers must be >= 1".into()));
        }
        if !self.pilot_snr_db.is_finite() {
            return Err(Error::InvalidArgument("pilot_snr_db must be finite".into()));
        }
        if !self.pnr().is_finite() {
            return Err(Error::InvalidArgument("PNR is not finite".into()));
        }
        Ok(())
    }

    /// Squared pilot magnitude.
    fn pilot_power(&self) -> f64 {
        2.0 * self.noise_var * 10f64.powf(self.pilot_snr_db / 10.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelClass {
    pub class_id: u32,
    pub mean_channel: Vec<C64>,
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(std * re, std * im)
}

/// `m` complex values with i.i.d. standard normal real and imaginary parts.
pub fn gen_class_channel(seed: u64, m: usize) -> Vec<C64> {
    let mut r = seed::rng(seed);
    (0..m).map(|_| complex_normal(&mut r, 1.0)).collect()
}

/// `h + eps`, with the real and imaginary parts of `eps` each `N(0, var)`.
pub fn perturb_channel(h: &[C64], var: f64, seed: u64) -> Result<Vec<C64>> {
    if !(var >= 0.0 && var.is_finite()) {
        return Err(Error::InvalidArgument(format!("perturbation variance {var} must be >= 0")));
    }
    let mut r = seed::rng(seed);
    let std = var.sqrt();
    Ok(h.iter().map(|&v| v + complex_normal(&mut r, std)).collect())
}

/// Diagonal pilot matrix of QPSK-like symbols at the configured pilot power.
pub fn pilot_matrix(cfg: &CsiConfig, seed: u64) -> DMatrix<C64> {
    let mut r = seed::rng(seed);
    let amp = (cfg.pilot_power() / 2.0).sqrt();
    let diag: Vec<C64> = (0..cfg.subcarriers)
        .map(|_| {
            let re = if r.gen::<bool>() { amp } else { -amp };
            let im = if r.gen::<bool>() { amp } else { -amp };
            C64::new(re, im)
        })
        .collect();
    DMatrix::from_diagonal(&DVector::from_vec(diag))
}

/// `X h + w`, with the real and imaginary parts of `w` each `N(0, noise_var)`.
pub fn transmit(pilots: &DMatrix<C64>, h: &[C64], noise_var: f64, seed: u64) -> Result<DVector<C64>> {
    check_dim("channel length", pilots.ncols(), h.len())?;
    let mut r = seed::rng(seed);
    let std = noise_var.sqrt();
    let mut y = pilots * DVector::from_column_slice(h);
    y.iter_mut().for_each(|v| *v += complex_normal(&mut r, std));
    Ok(y)
}

/// Generalized least-squares channel estimator `argmin (y - Xh)^H C^-1 (y - Xh)`.
///
/// `C = L L^H` whitens the system to `L^-1 X h ~ L^-1 y`, which is then solved
/// through a QR factorization. Factorizations are computed once and reused
/// across observations.
#[derive(Clone, Debug)]
pub struct LsEstimator {
    chol_l: Option<DMatrix<C64>>,
    q: DMatrix<C64>,
    r: DMatrix<C64>,
}

impl LsEstimator {
    pub fn new(pilots: &DMatrix<C64>, noise_cov: Option<&DMatrix<C64>>) -> Result<Self> {
        let (rows, cols) = pilots.shape();
        if rows < cols || cols == 0 {
            return Err(Error::RankDeficient);
        }
        let (chol_l, whitened) = match noise_cov {
            None => (None, pilots.clone()),
            Some(c) => {
                if c.shape() != (rows, rows) {
                    return Err(Error::DimensionMismatch {
                        context: "noise covariance",
                        expected: rows,
                        got: c.nrows(),
                    });
                }
                let l = c
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::InvalidArgument("noise covariance is not positive definite".into()))?
                    .unpack();
                let w = l.solve_lower_triangular(pilots).ok_or(Error::RankDeficient)?;
                (Some(l), w)
            }
        };
        let qr = whitened.qr();
        let (q, r) = qr.unpack();
        let scale = r.diagonal().iter().map(|v| v.norm()).fold(0.0, f64::max);
        let tol = scale * (rows.max(cols) as f64) * 1e-12;
        if !(scale > 0.0) || r.diagonal().iter().any(|v| !(v.norm() > tol)) {
            return Err(Error::RankDeficient);
        }
        Ok(Self { chol_l, q, r })
    }

    pub fn estimate(&self, y: &DVector<C64>) -> Result<DVector<C64>> {
        check_dim("received signal", self.q.nrows(), y.len())?;
        let b = match &self.chol_l {
            None => y.clone(),
            Some(l) => l.solve_lower_triangular(y).ok_or(Error::RankDeficient)?,
        };
        let rhs = self.q.adjoint() * b;
        self.r.solve_upper_triangular(&rhs).ok_or(Error::RankDeficient)
    }
}

/// One-shot generalized least-squares estimate.
pub fn ls_estimate(pilots: &DMatrix<C64>, y: &DVector<C64>, noise_cov: &DMatrix<C64>) -> Result<DVector<C64>> {
    LsEstimator::new(pilots, Some(noise_cov))?.estimate(y)
}

/// Real parts followed by imaginary parts.
pub fn complex_to_features(h: &[C64]) -> Vec<f64> {
    h.iter().map(|v| v.re).chain(h.iter().map(|v| v.im)).collect()
}

pub const MIN_RATE: f64 = 0.02;
pub const MAX_RATE: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub uplink_len: usize,
    pub downlink_len: usize,
    /// Length of each class's contiguous high-rate band.
    pub band_len: usize,
    pub active_rate: f64,
    pub idle_rate: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            uplink_len: 200,
            downlink_len: 200,
            band_len: 40,
            active_rate: 0.8,
            idle_rate: 0.05,
        }
    }
}

impl TrafficConfig {
    pub fn seq_len(&self) -> usize {
        self.uplink_len + self.downlink_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len() == 0 || self.band_len > self.seq_len() {
            return Err(Error::InvalidArgument(format!(
                "traffic band of {} does not fit a sequence of {}",
                self.band_len,
                self.seq_len()
            )));
        }
        for r in [self.active_rate, self.idle_rate] {
            if !(MIN_RATE..=MAX_RATE).contains(&r) {
                return Err(Error::InvalidArgument(format!("traffic rate {r} outside [{MIN_RATE}, {MAX_RATE}]")));
            }
        }
        Ok(())
    }
}

/// Per-position activity probabilities of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficClassProfile {
    pub class_id: u32,
    rates: Vec<f64>,
}

impl TrafficClassProfile {
    pub fn new(class_id: u32, rates: Vec<f64>) -> Result<Self> {
        if let Some(&r) = rates.iter().find(|r| !(MIN_RATE..=MAX_RATE).contains(*r)) {
            return Err(Error::InvalidArgument(format!("traffic rate {r} outside [{MIN_RATE}, {MAX_RATE}]")));
        }
        Ok(Self { class_id, rates })
    }

    /// Rate `active` on `[start, start + len)`, `idle` elsewhere.
    pub fn banded(class_id: u32, seq_len: usize, start: usize, len: usize, active: f64, idle: f64) -> Result<Self> {
        if start + len > seq_len {
            return Err(Error::InvalidArgument(format!("band [{start}, {}) exceeds {seq_len}", start + len)));
        }
        let rates = (0..seq_len)
            .map(|p| if (start..start + len).contains(&p) { active } else { idle })
            .collect();
        Self::new(class_id, rates)
    }

    /// Banded profile with a band start drawn uniformly from `seed`.
    pub fn random(class_id: u32, cfg: &TrafficConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let start = seed::rng(seed).gen_range(0..=cfg.seq_len() - cfg.band_len);
        Self::banded(class_id, cfg.seq_len(), start, cfg.band_len, cfg.active_rate, cfg.idle_rate)
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }
}

/// Independent Bernoulli draws, one per position.
pub fn gen_traffic(profile: &TrafficClassProfile, seed: u64) -> Vec<f64> {
    let mut r = seed::rng(seed);
    profile
        .rates
        .iter()
        .map(|&p| if r.gen::<f64>() < p { 1.0 } else { 0.0 })
        .collect()
}

/// A class: frozen mean channel plus traffic profile.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassModel {
    pub channel: ChannelClass,
    pub traffic: TrafficClassProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub csi: CsiConfig,
    pub traffic: TrafficConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            n_train: 2557,
            n_test: 638,
            seed: 2024,
            csi: CsiConfig::default(),
            traffic: TrafficConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.csi.validate()?;
        self.traffic.validate()?;
        if self.classes == 0 || self.n_train < self.classes || self.n_test < self.classes {
            return Err(Error::InvalidArgument(format!(
                "need at least one sample per class: K={}, n_train={}, n_test={}",
                self.classes, self.n_train, self.n_test
            )));
        }
        Ok(())
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRecord {
    pub seed: u64,
    pub classes: usize,
    pub csi: CsiConfig,
    pub traffic: TrafficConfig,
    pub pnr_db: f64,
    pub pilot_diag_re: Vec<f64>,
    pub pilot_diag_im: Vec<f64>,
}

pub struct Synthesizer {
    pub config: SynthConfig,
    pub classes: Vec<ClassModel>,
    pub pilots: DMatrix<C64>,
    estimator: LsEstimator,
}

impl Synthesizer {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let m = config.csi.subcarriers;
        let classes = (0..config.classes as u64)
            .map(|k| {
                Ok(ClassModel {
                    channel: ChannelClass {
                        class_id: k as u32,
                        mean_channel: gen_class_channel(seed::derive(config.seed, STREAM_CHANNEL, k), m),
                    },
                    traffic: TrafficClassProfile::random(
                        k as u32,
                        &config.traffic,
                        seed::derive(config.seed, STREAM_PROFILE, k),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pilots = pilot_matrix(&config.csi, seed::derive(config.seed, STREAM_PILOT, 0));
        let estimator = LsEstimator::new(&pilots, None)?;
        Ok(Self {
            config,
            classes,
            pilots,
            estimator,
        })
    }

    /// One sample of class `class`: (traffic states, CSI features).
    pub fn sample(&self, class: &ClassModel, sample_seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let traffic = gen_traffic(&class.traffic, seed::derive(sample_seed, 0, 0));
        let h = perturb_channel(&class.channel.mean_channel, self.config.csi.perturb_var, seed::derive(sample_seed, 1, 0))?;
        let y = transmit(&self.pilots, &h, self.config.csi.noise_var, seed::derive(sample_seed, 2, 0))?;
        let est = self.estimator.estimate(&y)?;
        Ok((traffic, complex_to_features(est.as_slice())))
    }

    /// Generates a split with the given labels, indexing `classes` by label.
    pub fn split(&self, classes: &[ClassModel], labels: &[u32], split: Split) -> Result<MultiViewDataset> {
        let stream = match split {
            Split::Train => STREAM_TRAIN,
            Split::Test => STREAM_TEST,
        };
        let rows = labels
            .par_iter()
            .enumerate()
            .map(|(n, &y)| {
                let class = classes.get(y as usize).ok_or(Error::IndexOutOfRange {
                    context: "class",
                    index: y as usize,
                    bound: classes.len(),
                })?;
                self.sample(class, seed::derive(self.config.seed, stream, n as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let (traffic, csi): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        MultiViewDataset::new(
            vec![Family::Bernoulli, Family::GaussianDiag],
            vec![Matrix::from_rows(&traffic)?, Matrix::from_rows(&csi)?],
            Some(labels.to_vec()),
            classes.len(),
            split,
            self.config.seed,
        )
    }

    fn balanced_labels(&self, n: usize, split: Split) -> Vec<u32> {
        let k = self.config.classes;
        let mut labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
        let tag = split as u64;
        labels.shuffle(&mut seed::rng(seed::derive(self.config.seed, STREAM_LABELS, tag)));
        labels
    }

    pub fn record(&self) -> GeneratorRecord {
        let d = self.pilots.diagonal();
        GeneratorRecord {
            seed: self.config.seed,
            classes: self.config.classes,
            csi: self.config.csi.clone(),
            traffic: self.config.traffic.clone(),
            // Rounded to 1e-9 dB so configured grid values read back exactly.
            pnr_db: pnr_to_db(self.config.csi.pnr()).map_or(f64::NEG_INFINITY, |db| (db * 1e9).round() / 1e9),
            pilot_diag_re: d.iter().map(|v| v.re).collect(),
            pilot_diag_im: d.iter().map(|v| v.im).collect(),
        }
    }
}

/// A generated train/test pair with its generator record.
pub struct SyntheticData {
    pub train: MultiViewDataset,
    pub test: MultiViewDataset,
    pub record: GeneratorRecord,
}

/// Class-balanced train and test splits (view 0: traffic, view 1: CSI).
pub fn assemble_dataset(config: &SynthConfig) -> Result<SyntheticData> {
    let synth = Synthesizer::new(config.clone())?;
    let train_labels = synth.balanced_labels(config.n_train, Split::Train);
    let test_labels = synth.balanced_labels(config.n_test, Split::Test);
    Ok(SyntheticData {
        train: synth.split(&synth.classes, &train_labels, Split::Train)?,
        test: synth.split(&synth.classes, &test_labels, Split::Test)?,
        record: synth.record(),
    })
}

/// Pilot matrix reconstructed from a record.
pub fn pilots_from_record(record: &GeneratorRecord) -> Result<DMatrix<C64>> {
    check_dim("pilot imaginary parts", record.pilot_diag_re.len(), record.pilot_diag_im.len())?;
    let diag: Vec<C64> = record
        .pilot_diag_re
        .iter()
        .zip(&record.pilot_diag_im)
        .map(|(&re, &im)| C64::new(re, im))
        .collect();
    Ok(DMatrix::from_diagonal(&DVector::from_vec(diag)))
}

/// i.i.d. `N(mean, std^2)` samples, used for label-independent noise views.
pub fn gaussian_noise_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Result<Matrix> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut r = seed::rng(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut r)).collect())
}
