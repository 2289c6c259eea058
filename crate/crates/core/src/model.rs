//! The W-VAE: a shared probing stack evaluated on one-hot cluster probes,
//! one linear likelihood head per view, the common-information encoder and
//! the unsupervised / supervised / semi-supervised objectives.
//!
//! For a cluster index `z` the probe computes `f(onehot(z))`; head `i` maps
//! that hidden vector to the parameters of `P(X_i | z)`. The posterior over
//! clusters is a softmax of the weighted sum of per-view log-likelihoods,
//! `V * sum_i alpha_i log P(x_i | z)`, which with `alpha_i = 1/V` is exactly
//! Bayes' rule under the uniform prior `P(Z) = 1/|Z|`.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{check_dim, Error, Result};
use crate::expfam::{
    clamp_logvar, BernoulliParams, ExpFamily, Family, GaussianDiagParams,
    GaussianFullParams, HeadParams, LOGVAR_MAX, LOGVAR_MIN, LN_2PI,
};
use crate::network::{
    axpy, dot, log_sum_exp, softmax_in_place, Activation, Checkpoint, DenseLayer, DenseStack,
    LayerGrad, Tape, DEFAULT_LEAKY_SLOPE,
};

/// Per-view metadata.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub family: Family,
    pub dim: usize,
    /// Reliability weight `alpha_i`; normalized to sum to one by the model.
    pub weight: f64,
}

impl ViewSpec {
    pub fn new(family: Family, dim: usize, weight: f64) -> Self {
        Self { family, dim, weight }
    }

    pub fn head_len(&self) -> usize {
        self.family.param_len(self.dim)
    }
}

/// Normalizes `alpha` to sum to one; every entry must be positive and finite.
pub fn normalize_weights(alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "view weights must be positive and finite, got {alpha:?}"
        )));
    }
    let s: f64 = alpha.iter().sum();
    Ok(alpha.iter().map(|a| a / s).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub z_card: usize,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            z_card: 10,
            hidden: vec![64, 128],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WvaeModel {
    z_card: usize,
    leaky_slope: f64,
    views: Vec<ViewSpec>,
    probe: DenseStack,
    heads: Vec<DenseLayer>,
}

/// Gradient buffers for every model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub probe: Vec<LayerGrad>,
    pub heads: Vec<LayerGrad>,
}

impl ModelGrads {
    pub fn fill_zero(&mut self) {
        self.probe.iter_mut().chain(&mut self.heads).for_each(LayerGrad::fill_zero);
    }

    /// Blocks in declaration order, matching [`WvaeModel::param_blocks_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.probe
            .iter()
            .chain(&self.heads)
            .flat_map(|g| [g.weights.as_slice(), g.bias.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }
}

/// `values[(n * V + i) * Z + z] = log P(x_{n,i} | z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoglikTable {
    pub n: usize,
    pub views: usize,
    pub z_card: usize,
    pub values: Vec<f64>,
}

impl LoglikTable {
    pub fn zeros(n: usize, views: usize, z_card: usize) -> Self {
        Self {
            n,
            views,
            z_card,
            values: vec![0.0; n * views * z_card],
        }
    }

    #[inline]
    pub fn get(&self, n: usize, i: usize, z: usize) -> f64 {
        self.values[(n * self.views + i) * self.z_card + z]
    }

    #[inline]
    pub fn set(&mut self, n: usize, i: usize, z: usize, v: f64) {
        self.values[(n * self.views + i) * self.z_card + z] = v;
    }

    /// The `|Z|` entries of sample `n`, view `i`.
    pub fn cell(&self, n: usize, i: usize) -> &[f64] {
        let o = (n * self.views + i) * self.z_card;
        &self.values[o..o + self.z_card]
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut t = self.clone();
        t.values.iter_mut().for_each(|v| *v *= c);
        t
    }

    /// Row `n` of `V * sum_i alpha_i values[n][i][.]`.
    fn scores_into(&self, n: usize, weights: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let scale = self.views as f64;
        for (i, &a) in weights.iter().enumerate() {
            axpy(scale * a, self.cell(n, i), out);
        }
    }
}

/// Row-stochastic `N x |Z|` responsibilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub n: usize,
    pub z_card: usize,
    pub values: Vec<f64>,
}

impl Posterior {
    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.z_card..(n + 1) * self.z_card]
    }

    /// Most probable cluster per sample; ties resolve to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.n)
            .map(|n| {
                let row = self.row(n);
                let mut best = 0;
                for (z, &q) in row.iter().enumerate() {
                    if q > row[best] {
                        best = z;
                    }
                }
                best
            })
            .collect()
    }
}

/// Label information attached to a batch.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    Unlabeled,
    Labeled(&'a [u32]),
    /// Labels are consulted only where `mask` is true.
    Partial { labels: &'a [u32], mask: &'a [bool] },
}

impl<'a> Supervision<'a> {
    fn label_of(&self, n: usize) -> Option<u32> {
        match *self {
            Supervision::Unlabeled => None,
            Supervision::Labeled(l) => Some(l[n]),
            Supervision::Partial { labels, mask } => mask[n].then(|| labels[n]),
        }
    }

    fn validate(&self, n: usize, z_card: usize) -> Result<()> {
        let check = |labels: &[u32]| -> Result<()> {
            check_dim("labels", n, labels.len())?;
            Ok(())
        };
        match *self {
            Supervision::Unlabeled => {}
            Supervision::Labeled(l) => check(l)?,
            Supervision::Partial { labels, mask } => {
                check(labels)?;
                check_dim("label mask", n, mask.len())?;
            }
        }
        for i in 0..n {
            if let Some(y) = self.label_of(i) {
                if y as usize >= z_card {
                    return Err(Error::IndexOutOfRange {
                        context: "label",
                        index: y as usize,
                        bound: z_card,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Weighted common-information encoder: each row is
/// `softmax(V * sum_i alpha_i values[n][i][.])`.
pub fn common_encoder(table: &LoglikTable, weights: &[f64]) -> Result<Posterior> {
    check_dim("encoder weights", table.views, weights.len())?;
    let mut values = vec![0.0; table.n * table.z_card];
    for (n, row) in values.chunks_exact_mut(table.z_card.max(1)).enumerate().take(table.n) {
        table.scores_into(n, weights, row);
        softmax_in_place(row)?;
    }
    Ok(Posterior {
        n: table.n,
        z_card: table.z_card,
        values,
    })
}

/// Posterior by marginalization: `prior(z) prod_i P(x_i | z)` normalized over
/// `z`, evaluated in log space.
pub fn marginal_encoder(table: &LoglikTable, prior: &[f64]) -> Result<Posterior> {
    check_dim("prior", table.z_card, prior.len())?;
    if prior.iter().any(|&p| !(p >= 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("prior must be a probability vector".into()));
    }
    let log_prior: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    let mut values = Vec::with_capacity(table.n * table.z_card);
    let mut row = vec![0.0; table.z_card];
    for n in 0..table.n {
        row.copy_from_slice(&log_prior);
        for i in 0..table.views {
            for (r, l) in row.iter_mut().zip(table.cell(n, i)) {
                *r += l;
            }
        }
        let lse = log_sum_exp(&row);
        if lse == f64::NEG_INFINITY {
            return Err(Error::ZeroNormalizer);
        }
        values.extend(row.iter().map(|r| (r - lse).exp()));
    }
    Ok(Posterior {
        n: table.n,
        z_card: table.z_card,
        values,
    })
}

#[inline]
fn xlogx(q: f64) -> f64 {
    if q > 0.0 {
        q * q.ln()
    } else {
        0.0
    }
}

/// Batch mean of `-sum_z q ln q`.
pub fn conditional_entropy(posterior: &Posterior) -> f64 {
    if posterior.n == 0 {
        return 0.0;
    }
    let total: f64 = (0..posterior.n)
        .map(|n| -posterior.row(n).iter().map(|&q| xlogx(q)).sum::<f64>())
        .sum();
    total / posterior.n as f64
}

/// Objective value for a given table, plus `dL/d table` when requested.
///
/// Per sample `m` with target row `Q*_m` (the posterior for unlabeled rows, the
/// one-hot label for labeled rows):
/// `-sum_z Q*_mz s_mz + sum_z Q*_mz ln Q*_mz + [labeled] KL(Q*_m || Q_m)`
/// where `s = V sum_i alpha_i log P(x_i | z)` and `Q = softmax(s)`. Unlabeled
/// rows give the negative reward `-(h_Q + E_Q[s])`; labeled rows give the
/// label-assisted bound `CE(Q*, Q) - s_y`. The result is the batch mean.
pub fn objective_from_table(
    table: &LoglikTable,
    weights: &[f64],
    supervision: Supervision<'_>,
    mut d_table: Option<&mut LoglikTable>,
) -> Result<f64> {
    check_dim("objective weights", table.views, weights.len())?;
    if table.n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    supervision.validate(table.n, table.z_card)?;
    let zc = table.z_card;
    let inv_n = 1.0 / table.n as f64;
    let scale = table.views as f64;
    let mut s = vec![0.0; zc];
    let mut q = vec![0.0; zc];
    let mut g = vec![0.0; zc];
    let mut total = 0.0;
    for n in 0..table.n {
        table.scores_into(n, weights, &mut s);
        q.copy_from_slice(&s);
        softmax_in_place(&mut q)?;
        let loss = match supervision.label_of(n) {
            None => {
                let ent: f64 = q.iter().map(|&v| xlogx(v)).sum();
                let fit: f64 = q.iter().zip(&s).map(|(a, b)| a * b).sum();
                for z in 0..zc {
                    g[z] = -q[z];
                }
                ent - fit
            }
            Some(y) => {
                let y = y as usize;
                let cross_entropy = -(s[y] - log_sum_exp(&s));
                for z in 0..zc {
                    g[z] = q[z] - if z == y { 2.0 } else { 0.0 };
                }
                cross_entropy - s[y]
            }
        };
        total += loss;
        if let Some(dt) = d_table.as_deref_mut() {
            for (i, &a) in weights.iter().enumerate() {
                let o = (n * table.views + i) * zc;
                for z in 0..zc {
                    dt.values[o + z] = scale * a * g[z] * inv_n;
                }
            }
        }
    }
    Ok(total * inv_n)
}

/// Head parameters with the per-cluster quantities the batch kernels reuse.
enum Prepared<'a> {
    Bernoulli { logits: &'a [f64], probs: Vec<f64>, softplus_sum: f64 },
    GaussianDiag { mean: &'a [f64], logvar: Vec<f64>, prec: Vec<f64>, constant: f64 },
    GaussianFull(GaussianFullParams),
    Poisson { eta: &'a [f64], exp_sum: f64 },
    Exponential { rate: Vec<f64>, log_rate_sum: f64 },
}

impl<'a> Prepared<'a> {
    fn new(family: Family, dim: usize, raw: &'a [f64]) -> Result<Self> {
        Ok(match family {
            Family::Bernoulli => {
                let mut softplus_sum = 0.0;
                let probs = raw
                    .iter()
                    .map(|&v| {
                        let e = (-v.abs()).exp();
                        softplus_sum += v.max(0.0) + e.ln_1p();
                        if v >= 0.0 {
                            1.0 / (1.0 + e)
                        } else {
                            e / (1.0 + e)
                        }
                    })
                    .collect();
                Prepared::Bernoulli { logits: raw, probs, softplus_sum }
            }
            Family::GaussianDiag => {
                let (mean, lv) = raw.split_at(dim);
                let logvar: Vec<f64> = lv.iter().map(|&v| clamp_logvar(v)).collect();
                let prec = logvar.iter().map(|&v| (-v).exp()).collect();
                let constant = -0.5 * (dim as f64 * LN_2PI + logvar.iter().sum::<f64>());
                Prepared::GaussianDiag { mean, logvar, prec, constant }
            }
            Family::GaussianFull => {
                let (mean, f) = raw.split_at(dim);
                Prepared::GaussianFull(GaussianFullParams::new(mean.to_vec(), f.to_vec())?)
            }
            Family::Poisson => Prepared::Poisson {
                eta: raw,
                exp_sum: raw.iter().map(|v| v.exp()).sum(),
            },
            Family::Exponential => Prepared::Exponential {

                rate: raw.iter().map(|v| v.exp()).collect(),
                log_rate_sum: raw.iter().sum(),
            },
        })
    }

    /// Log-likelihood minus the parameter-free base measure.
    fn loglik(&self, x: &[f64]) -> Result<f64> {
        Ok(match self {
            Prepared::Bernoulli { logits, softplus_sum, .. } => dot(x, logits) - softplus_sum,
            Prepared::GaussianDiag { mean, prec, constant, .. } => {
                let mut acc = 0.0;
                for ((&xj, &mu), &p) in x.iter().zip(mean.iter()).zip(prec) {
                    let r = xj - mu;
                    acc += r * r * p;
                }
                constant - 0.5 * acc
            }
            Prepared::GaussianFull(p) => p.loglik(x)?,
            Prepared::Poisson { eta, exp_sum } => dot(x, eta) - exp_sum,
            Prepared::Exponential { rate, log_rate_sum, .. } => log_rate_sum - dot(x, rate),
        })
    }

    /// `d/d raw` of `sum_n coef[n] * loglik(x_n)`, written into `out`.
    fn accumulate_grad(
        &self,
        xs: &Matrix,
        coef: impl Iterator<Item = f64> + Clone,
        raw: &[f64],
        out: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> Result<()> {
        let d = xs.cols;
        let csum: f64 = coef.clone().sum();
        out.fill(0.0);
        match self {
            Prepared::Bernoulli { probs, .. } => {
                for (n, c) in coef.enumerate() {
                    if c != 0.0 {
                        axpy(c, xs.row(n), out);
                    }
                }
                axpy(-csum, probs, out);
            }
            Prepared::GaussianDiag { mean, prec, .. } => {
                let (dm, dv) = out.split_at_mut(d);
                scratch.clear();
                scratch.resize(d, 0.0);
                for (n, c) in coef.enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for (j, (&xj, &mu)) in xs.row(n).iter().zip(mean.iter()).enumerate() {
                        let r = xj - mu;
                        dm[j] += c * r;
                        scratch[j] += c * r * r;
                    }
                }
                for j in 0..d {
                    dm[j] *= prec[j];
                    let lv = raw[d + j];
                    dv[j] = if (LOGVAR_MIN..=LOGVAR_MAX).contains(&lv) {
                        0.5 * (scratch[j] * prec[j] - csum)
                    } else {
                        0.0
                    };
                }
            }
            Prepared::GaussianFull(p) => {
                for (n, c) in coef.enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    let g = p.loglik_grad(xs.row(n))?;
                    let (dm, df) = out.split_at_mut(d);
                    axpy(c, &g.mean, dm);
                    axpy(c, &g.factor_raw, df);
                }
            }
            Prepared::Poisson { eta, .. } => {
                for (n, c) in coef.enumerate() {
                    if c != 0.0 {
                        axpy(c, xs.row(n), out);
                    }
                }
                for (o, &e) in out.iter_mut().zip(eta.iter()) {
                    *o -= e.exp() * csum;
                }
            }
            Prepared::Exponential { rate, .. } => {
                for (n, c) in coef.enumerate() {
                    if c != 0.0 {
                        axpy(-c, xs.row(n), out);
                    }
                }
                for (o, &r) in out.iter_mut().zip(rate) {
                    *o = *o * r + csum;
                }
            }
        }
        Ok(())
    }

    fn to_head_params(&self) -> Result<HeadParams> {
        Ok(match self {
            Prepared::Bernoulli { logits, .. } => HeadParams::Bernoulli(BernoulliParams::new(logits.to_vec())?),
            Prepared::GaussianDiag { mean, logvar, .. } => {
                HeadParams::GaussianDiag(GaussianDiagParams::new(mean.to_vec(), logvar.clone())?)
            }
            Prepared::GaussianFull(p) => HeadParams::GaussianFull(p.clone()),
            Prepared::Poisson { eta, .. } => HeadParams::Natural {
                family: ExpFamily::Poisson,
                eta: eta.to_vec(),
            },
            Prepared::Exponential { rate, .. } => HeadParams::Natural {
                family: ExpFamily::Exponential,
                eta: rate.iter().map(|r| -r).collect(),
            },
        })
    }
}

/// Parameter-free part of a family's log-likelihood for one observation.
fn base_measure(family: Family, x: &[f64]) -> f64 {
    match family {
        Family::Poisson => x.iter().map(|&v| ExpFamily::Poisson.base_measure(v)).sum(),
        _ => 0.0,
    }
}

/// Everything recorded by one probe evaluation over all clusters.
struct ProbePass {
    tapes: Vec<Tape>,
    /// `|Z| x width`, row `z` is the probe output for cluster `z`.
    hidden: Vec<f64>,
    width: usize,
    /// `raw[i]`: `|Z| x head_len` outputs of head `i`.
    raw: Vec<Vec<f64>>,
}

impl ProbePass {
    fn raw(&self, head: usize, z: usize) -> &[f64] {
        let len = self.raw[head].len() / self.tapes.len();
        &self.raw[head][z * len..(z + 1) * len]
    }
}

impl WvaeModel {
    /// Builds a model with Glorot-initialized weights.
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, views: Vec<ViewSpec>, rng: &mut R) -> Result<Self> {
        let views = Self::normalized_views(views)?;
        if config.z_card == 0 {
            return Err(Error::InvalidArgument("|Z| must be at least 1".into()));
        }
        if !(config.leaky_slope > 0.0 && config.leaky_slope < 1.0) {
            return Err(Error::InvalidArgument(format!("leaky slope {} not in (0,1)", config.leaky_slope)));
        }
        let mut widths = vec![config.z_card];
        widths.extend(config.hidden.iter().copied());
        let layers: Vec<DenseLayer> = widths
            .windows(2)
            .map(|w| DenseLayer::glorot(w[0], w[1], rng))
            .collect();
        let activations = vec![Activation::LeakyRelu(config.leaky_slope); layers.len()];
        let probe = DenseStack::new(layers, activations)?;
        let hidden_out = *widths.last().unwrap();
        let heads = views
            .iter()
            .map(|v| DenseLayer::glorot(hidden_out, v.head_len(), rng))
            .collect();
        Ok(Self {
            z_card: config.z_card,
            leaky_slope: config.leaky_slope,
            views,
            probe,
            heads,
        })
    }

    /// Assembles a model from explicit layers (checkpoint loading, tests).
    pub fn from_layers(
        z_card: usize,
        leaky_slope: f64,
        views: Vec<ViewSpec>,
        probe_layers: Vec<DenseLayer>,
        heads: Vec<DenseLayer>,
    ) -> Result<Self> {
        let views = Self::normalized_views(views)?;
        check_dim("head count", views.len(), heads.len())?;
        let activations = vec![Activation::LeakyRelu(leaky_slope); probe_layers.len()];
        let probe = DenseStack::new(probe_layers, activations)?;
        let hidden_out = if probe.layers.is_empty() { z_card } else { probe.out_dim() };
        if !probe.layers.is_empty() {
            check_dim("probe input", z_card, probe.in_dim())?;
        }
        for (v, h) in views.iter().zip(&heads) {
            check_dim("head input", hidden_out, h.in_dim)?;
            check_dim("head output", v.head_len(), h.out_dim)?;
        }
        Ok(Self {
            z_card,
            leaky_slope,
            views,
            probe,
            heads,
        })
    }

    fn normalized_views(mut views: Vec<ViewSpec>) -> Result<Vec<ViewSpec>> {
        if views.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one view".into()));
        }
        if let Some(v) = views.iter().find(|v| v.dim == 0) {
            return Err(Error::InvalidArgument(format!("view of family {} has zero dimension", v.family)));
        }
        let w = normalize_weights(&views.iter().map(|v| v.weight).collect::<Vec<_>>())?;
        for (v, a) in views.iter_mut().zip(w) {
            v.weight = a;
        }
        Ok(views)
    }

    pub fn z_card(&self) -> usize {
        self.z_card
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn views(&self) -> &[ViewSpec] {
        &self.views
    }

    pub fn weights(&self) -> Vec<f64> {
        self.views.iter().map(|v| v.weight).collect()
    }

    pub fn probe(&self) -> &DenseStack {
        &self.probe
    }

    pub fn probe_mut(&mut self) -> &mut DenseStack {
        &mut self.probe
    }

    pub fn heads(&self) -> &[DenseLayer] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.heads
    }

    /// Replaces the view weights (normalized).
    pub fn set_weights(&mut self, alpha: &[f64]) -> Result<()> {
        check_dim("view weights", self.views.len(), alpha.len())?;
        for (v, a) in self.views.iter_mut().zip(normalize_weights(alpha)?) {
            v.weight = a;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.probe.param_count() + self.heads.iter().map(DenseLayer::param_count).sum::<usize>()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            probe: self.probe.zero_grads(),
            heads: self.heads.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    /// Mutable parameter blocks in declaration order: probe layers then
    /// heads, each as weights then bias.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.probe
            .layers
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        self.probe
            .layers
            .iter()
            .chain(&self.heads)
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameters", self.param_count(), flat.len())?;
        let mut off = 0;
        for block in self.param_blocks_mut() {
            block.copy_from_slice(&flat[off..off + block.len()]);
            off += block.len();
        }
        Ok(())
    }

    fn onehot(&self, z: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.z_card];
        w[z] = 1.0;
        w
    }

    fn probe_pass(&self) -> Result<ProbePass> {
        let mut tapes = Vec::with_capacity(self.z_card);
        let mut hidden = Vec::new();
        for z in 0..self.z_card {
            let (h, tape) = self.probe.forward_tape(&self.onehot(z))?;
            tapes.push(tape);
            hidden.extend_from_slice(&h);
        }
        let width = hidden.len() / self.z_card;
        let raw = self
            .heads
            .iter()
            .map(|head| {
                let mut outs = vec![0.0; self.z_card * head.out_dim];
                head.forward_many(&hidden, self.z_card, &mut outs);
                outs
            })
            .collect();
        Ok(ProbePass { tapes, hidden, width, raw })
    }

    fn prepare<'p>(&self, pass: &'p ProbePass) -> Result<Vec<Vec<Prepared<'p>>>> {
        self.views
            .iter()
            .enumerate()
            .map(|(i, v)| (0..self.z_card).map(|z| Prepared::new(v.family, v.dim, pass.raw(i, z))).collect())
            .collect()
    }

    fn check_batch(&self, views: &[Matrix]) -> Result<usize> {
        check_dim("batch views", self.views.len(), views.len())?;
        let n = views[0].rows;
        for (spec, m) in self.views.iter().zip(views) {
            check_dim("batch view width", spec.dim, m.cols)?;
            check_dim("batch rows", n, m.rows)?;
        }
        Ok(n)
    }

    /// Deterministic head parameters for cluster `z`, one entry per view.
    pub fn head_params(&self, z: usize) -> Result<Vec<HeadParams>> {
        if z >= self.z_card {
            return Err(Error::IndexOutOfRange {
                context: "cluster",
                index: z,
                bound: self.z_card,
            });
        }
        let pass = self.probe_pass()?;
        self.views
            .iter()
            .enumerate()
            .map(|(i, v)| Prepared::new(v.family, v.dim, pass.raw(i, z))?.to_head_params())
            .collect()
    }

    fn table_with(&self, prepared: &[Vec<Prepared<'_>>], views: &[Matrix], n: usize) -> Result<LoglikTable> {
        let mut table = LoglikTable::zeros(n, self.views.len(), self.z_card);
        for (i, (spec, m)) in self.views.iter().zip(views).enumerate() {
            for s in 0..n {
                let x = m.row(s);
                spec.family.check_support(x)?;
                let h = base_measure(spec.family, x);
                for (z, p) in prepared[i].iter().enumerate() {
                    table.set(s, i, z, h + p.loglik(x)?);
                }
            }
        }
        Ok(table)
    }

    /// `values[n][i][z] = log P_theta(x_{n,i} | z)`.
    pub fn loglik_table(&self, views: &[Matrix]) -> Result<LoglikTable> {
        let n = self.check_batch(views)?;
        let pass = self.probe_pass()?;
        let prepared = self.prepare(&pass)?;
        self.table_with(&prepared, views, n)
    }

    /// Weighted common-information posterior for a batch.
    pub fn posterior(&self, views: &[Matrix]) -> Result<Posterior> {
        common_encoder(&self.loglik_table(views)?, &self.weights())
    }

    pub fn loss(&self, views: &[Matrix], supervision: Supervision<'_>) -> Result<f64> {
        let table = self.loglik_table(views)?;
        objective_from_table(&table, &self.weights(), supervision, None)
    }

    pub fn unsupervised_loss(&self, views: &[Matrix]) -> Result<f64> {
        self.loss(views, Supervision::Unlabeled)
    }

    pub fn supervised_loss(&self, views: &[Matrix], labels: &[u32]) -> Result<f64> {
        self.loss(views, Supervision::Labeled(labels))
    }

    pub fn semisup_loss(&self, views: &[Matrix], labels: &[u32], mask: &[bool]) -> Result<f64> {
        self.loss(views, Supervision::Partial { labels, mask })
    }

    /// Loss value; gradients are written (not accumulated) into `grads`.
    pub fn loss_and_grad(
        &self,
        views: &[Matrix],
        supervision: Supervision<'_>,
        grads: &mut ModelGrads,
    ) -> Result<f64> {
        let n = self.check_batch(views)?;
        let pass = self.probe_pass()?;
        let prepared = self.prepare(&pass)?;
        let table = self.table_with(&prepared, views, n)?;
        let mut d_table = LoglikTable::zeros(n, self.views.len(), self.z_card);
        let loss = objective_from_table(&table, &self.weights(), supervision, Some(&mut d_table))?;

        grads.fill_zero();
        let width = pass.width;
        let mut d_hidden = vec![0.0; self.z_card * width];
        let mut scratch = Vec::new();
        for (i, head) in self.heads.iter().enumerate() {
            let len = head.out_dim;
            let mut d_raw = vec![0.0; self.z_card * len];
            for (z, dr) in d_raw.chunks_exact_mut(len).enumerate() {
                let coef = (0..n).map(|s| d_table.get(s, i, z));
                prepared[i][z].accumulate_grad(&views[i], coef, pass.raw(i, z), dr, &mut scratch)?;
            }
            head.backward_many(&pass.hidden, &d_raw, self.z_card, &mut grads.heads[i], &mut d_hidden);
        }
        if !self.probe.layers.is_empty() {
            for (tape, dh) in pass.tapes.iter().zip(d_hidden.chunks_exact(width)) {
                self.probe.backward(tape, dh, &mut grads.probe)?;
            }
        }
        Ok(loss)
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            format_version: 1,
            z_card: self.z_card,
            leaky_slope: self.leaky_slope,
            hidden: self.probe.layers.iter().map(|l| l.out_dim).collect(),
            views: self.views.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            z_card: self.z_card as u32,
            views: self.views.len() as u32,
            layers: self.probe.layers.iter().chain(&self.heads).cloned().collect(),
        }
    }

    /// Writes `model.toml` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string(&self.manifest()).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("model.toml"), text)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("params.bin"))?);
        self.checkpoint().write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("model.toml");
        let manifest: ModelManifest = toml::from_str(&fs::read_to_string(&mpath)?).map_err(|e| Error::Format {
            path: mpath.display().to_string(),
            reason: e.to_string(),
        })?;
        let ppath = dir.join("params.bin");
        let ck = Checkpoint::read_from(
            &mut BufReader::new(fs::File::open(&ppath)?),
            &ppath.display().to_string(),
        )?;
        let bad = |reason: String| Error::Format {
            path: ppath.display().to_string(),
            reason,
        };
        if ck.z_card as usize != manifest.z_card || ck.views as usize != manifest.views.len() {
            return Err(bad("checkpoint header disagrees with model.toml".into()));
        }
        let n_probe = manifest.hidden.len();
        if ck.layers.len() != n_probe + manifest.views.len() {
            return Err(bad(format!("unexpected layer count {}", ck.layers.len())));
        }
        let mut layers = ck.layers;
        let heads = layers.split_off(n_probe);
        Self::from_layers(manifest.z_card, manifest.leaky_slope, manifest.views, layers, heads)
    }
}

/// Structured-text record stored next to the parameter blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub z_card: usize,
    pub leaky_slope: f64,
    pub hidden: Vec<usize>,
    pub views: Vec<ViewSpec>,
}
