//! Training losses and their gradients.
//!
//! For one image `v` with cosine logits `z_i = cos(v, c_i') / tau` over the
//! transformed bank:
//! - positive loss: `-log softmax(z)_y`
//! - negative loss: `log Σ_{i<N} e^{z_i} - log Σ_i e^{z_i}`
//! - knowledge regularization, one of
//!   - feature: `mean_i (1 - c_i · c_i')`
//!   - logits: `mean_i (cos(v, c_i) - cos(v, c_i'))²`
//!   - prob: cross-entropy of `softmax(cos(v, c'))` against `softmax(cos(v, c))`
//!
//! The batch objective is `l_pos + lambda1 · l_neg + lambda2 · l_kr`, each term a
//! mean over its samples. Gradients are derived by hand; [`finite_diff_grad`]
//! is the independent check.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureBank, GradientSet, ModelState};
use crate::numerics::{dot, logsumexp_unchecked, norm, softmax_unchecked, Mat, EPS_NORM};
use crate::trainer::TrainConfig;

/// Knowledge-regularization target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KrVariant {
    #[default]
    Feature,
    Logits,
    Prob,
}

impl KrVariant {
    pub const ALL: [KrVariant; 3] = [KrVariant::Feature, KrVariant::Logits, KrVariant::Prob];
}

impl std::str::FromStr for KrVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(KrVariant::Feature),
            "logits" => Ok(KrVariant::Logits),
            "prob" => Ok(KrVariant::Prob),
            other => Err(Error::InvalidConfig(format!("unknown kr variant `{other}`"))),
        }
    }
}

/// Which batch images contribute to the regularization average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KrScope {
    Pos,
    #[default]
    Both,
}

impl std::str::FromStr for KrScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" => Ok(KrScope::Pos),
            "both" => Ok(KrScope::Both),
            other => Err(Error::InvalidConfig(format!("unknown kr scope `{other}`"))),
        }
    }
}

/// Positive samples carry a 0-based class index into the bank's positive rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub pos: Vec<(Vec<f64>, usize)>,
    pub neg: Vec<Vec<f64>>,
}

impl Batch {
    pub fn is_empty(&self) -> bool {
        self.pos.is_empty() && self.neg.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_kr: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(tau))
    }
}

fn check_image(v: &[f64], dim: usize) -> Result<f64> {
    if v.len() != dim {
        return Err(Error::dim(dim, v.len()));
    }
    let n = norm(v);
    if !(n > EPS_NORM) || !n.is_finite() {
        return Err(Error::ZeroNorm { norm: n, eps: EPS_NORM });
    }
    Ok(n)
}

fn check_transformed(bank: &FeatureBank, transformed: &Mat) -> Result<()> {
    if transformed.rows() != bank.n_rows() {
        return Err(Error::dim(bank.n_rows(), transformed.rows()));
    }
    if transformed.cols() != bank.dim() {
        return Err(Error::dim(bank.dim(), transformed.cols()));
    }
    Ok(())
}

/// Cosines of `v` against unit rows.
fn cosines(rows: &Mat, v: &[f64], v_norm: f64) -> Vec<f64> {
    rows.iter_rows().map(|r| dot(r, v) / v_norm).collect()
}

fn bank_cosines(bank: &FeatureBank, v: &[f64], v_norm: f64) -> Vec<f64> {
    (0..bank.n_rows()).map(|i| dot(bank.row(i), v) / v_norm).collect()
}

/// Cross-entropy of class `y` over every row of the transformed bank.
pub fn loss_positive(state: &ModelState, bank: &FeatureBank, v: &[f64], y: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if y >= bank.n_pos() {
        return Err(Error::BadClassIndex { index: y, n_classes: bank.n_pos() });
    }
    let vn = check_image(v, bank.dim())?;
    let rows = state.forward_bank(bank, v)?.rows;
    let z: Vec<f64> = cosines(&rows, v, vn).iter().map(|s| s / tau).collect();
    Ok(logsumexp_unchecked(&z) - z[y])
}

/// Log of the probability mass on ID rows; minimized for outlier images.
pub fn loss_negative(state: &ModelState, bank: &FeatureBank, v: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if bank.n_neg() == 0 {
        return Err(Error::NoNegativeLabels);
    }
    let vn = check_image(v, bank.dim())?;
    let rows = state.forward_bank(bank, v)?.rows;
    let z: Vec<f64> = cosines(&rows, v, vn).iter().map(|s| s / tau).collect();
    Ok(logsumexp_unchecked(&z[..bank.n_pos()]) - logsumexp_unchecked(&z))
}

pub fn loss_kr_feature(bank: &FeatureBank, transformed: &Mat) -> Result<f64> {
    check_transformed(bank, transformed)?;
    let k = bank.n_rows() as f64;
    let mut s = 0.0;
    for i in 0..bank.n_rows() {
        s += 1.0 - dot(bank.row(i), transformed.row(i));
    }
    Ok(s / k)
}

pub fn loss_kr_logits(bank: &FeatureBank, transformed: &Mat, v: &[f64]) -> Result<f64> {
    check_transformed(bank, transformed)?;
    let vn = check_image(v, bank.dim())?;
    let before = bank_cosines(bank, v, vn);
    let after = cosines(transformed, v, vn);
    let mut s = 0.0;
    for (a, b) in before.iter().zip(&after) {
        s += (a - b) * (a - b);
    }
    Ok(s / bank.n_rows() as f64)
}

pub fn loss_kr_prob(bank: &FeatureBank, transformed: &Mat, v: &[f64]) -> Result<f64> {
    check_transformed(bank, transformed)?;
    let vn = check_image(v, bank.dim())?;
    let before = bank_cosines(bank, v, vn);
    let after = cosines(transformed, v, vn);
    let p = softmax_unchecked(&before);
    let lse = logsumexp_unchecked(&after);
    let mut s = 0.0;
    for (pi, si) in p.iter().zip(&after) {
        s -= pi * (si - lse);
    }
    Ok(s)
}

/// Loss weights applied to one image's terms.
#[derive(Clone, Copy)]
struct ImageWeights {
    pos: f64,
    neg: f64,
    kr: f64,
}

struct ImageJob<'a> {
    v: &'a [f64],
    class: Option<usize>,
    is_neg: bool,
    kr: bool,
}

struct ImageResult {
    term: f64,
    kr: f64,
    grads: Option<GradientSet>,
}

fn image_terms(
    state: &ModelState,
    bank: &FeatureBank,
    job: &ImageJob<'_>,
    w: ImageWeights,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<ImageResult> {
    let v = job.v;
    let vn = check_image(v, bank.dim())?;
    let fwd = state.forward_bank(bank, v)?;
    let n = bank.n_rows();
    let n_pos = bank.n_pos();
    let tau = cfg.tau_loss;
    let sims = cosines(&fwd.rows, v, vn);
    // Gradient of the image's weighted loss w.r.t. each similarity s_i = cos(v, c_i').
    let mut g_sim = vec![0.0; n];
    // Gradient w.r.t. each transformed row, for terms not expressed through s_i.
    let mut g_rows_direct: Option<Vec<(usize, f64)>> = None;

    let z: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let mut term = 0.0;
    if let Some(y) = job.class {
        let lse = logsumexp_unchecked(&z);
        term = lse - z[y];
        if want_grad {
            let p = softmax_unchecked(&z);
            for (i, g) in g_sim.iter_mut().enumerate() {
                let d = p[i] - if i == y { 1.0 } else { 0.0 };
                *g += w.pos * d / tau;
            }
        }
    } else if job.is_neg {
        term = logsumexp_unchecked(&z[..n_pos]) - logsumexp_unchecked(&z);
        if want_grad {
            let p = softmax_unchecked(&z);
            let q = softmax_unchecked(&z[..n_pos]);
            for (i, g) in g_sim.iter_mut().enumerate() {
                let qi = if i < n_pos { q[i] } else { 0.0 };
                *g += w.neg * (qi - p[i]) / tau;
            }
        }
    }

    let mut kr = 0.0;
    if job.kr {
        let k = n as f64;
        match cfg.kr_variant {
            KrVariant::Feature => {
                for i in 0..n {
                    kr += 1.0 - dot(bank.row(i), fwd.rows.row(i));
                }
                kr /= k;
                if want_grad {
                    g_rows_direct = Some((0..n).map(|i| (i, -w.kr / k)).collect());
                }
            }
            KrVariant::Logits => {
                let before = bank_cosines(bank, v, vn);
                for (a, b) in before.iter().zip(&sims) {
                    kr += (a - b) * (a - b);
                }
                kr /= k;
                if want_grad {
                    for (i, g) in g_sim.iter_mut().enumerate() {
                        *g += w.kr * 2.0 * (sims[i] - before[i]) / k;
                    }
                }
            }
            KrVariant::Prob => {
                let before = bank_cosines(bank, v, vn);
                let p = softmax_unchecked(&before);
                let lse = logsumexp_unchecked(&sims);
                for (pi, si) in p.iter().zip(&sims) {
                    kr -= pi * (si - lse);
                }
                if want_grad {
                    let q = softmax_unchecked(&sims);
                    for (i, g) in g_sim.iter_mut().enumerate() {
                        *g += w.kr * (q[i] - p[i]);
                    }
                }
            }
        }
    }

    let grads = if want_grad {
        // d s_i / d c_i' = v / |v|; the feature term contributes -c_i / K directly.
        let d = bank.dim();
        let mut g_rows = Mat::zeros(n, d);
        for i in 0..n {
            let gs = g_sim[i] / vn;
            for (o, x) in g_rows.row_mut(i).iter_mut().zip(v) {
                *o = gs * x;
            }
        }
        if let Some(direct) = &g_rows_direct {
            for &(i, coef) in direct {
                for (o, c) in g_rows.row_mut(i).iter_mut().zip(bank.row(i)) {
                    *o += coef * c;
                }
            }
        }
        let mut grads = state.params.zeros_like();
        state.backward_bank(bank, v, &fwd, &g_rows, &mut grads)?;
        Some(grads)
    } else {
        None
    };
    Ok(ImageResult { term, kr, grads })
}

fn evaluate(
    state: &ModelState,
    bank: &FeatureBank,
    batch: &Batch,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(LossReport, Option<GradientSet>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_tau(cfg.tau_loss)?;
    if !batch.neg.is_empty() && bank.n_neg() == 0 {
        return Err(Error::NoNegativeLabels);
    }
    for &(_, y) in &batch.pos {
        if y >= bank.n_pos() {
            return Err(Error::BadClassIndex { index: y, n_classes: bank.n_pos() });
        }
    }
    let kr_neg = cfg.kr_scope == KrScope::Both;
    let n_kr = batch.pos.len() + if kr_neg { batch.neg.len() } else { 0 };
    let w = ImageWeights {
        pos: if batch.pos.is_empty() { 0.0 } else { 1.0 / batch.pos.len() as f64 },
        neg: if batch.neg.is_empty() { 0.0 } else { cfg.lambda1 / batch.neg.len() as f64 },
        kr: if n_kr == 0 { 0.0 } else { cfg.lambda2 / n_kr as f64 },
    };
    let jobs: Vec<ImageJob<'_>> = batch
        .pos
        .iter()
        .map(|(v, y)| ImageJob { v, class: Some(*y), is_neg: false, kr: true })
        .chain(batch.neg.iter().map(|v| ImageJob { v, class: None, is_neg: true, kr: kr_neg }))
        .collect();

    let results: Vec<Result<ImageResult>> = jobs
        .par_iter()
        .map(|job| image_terms(state, bank, job, w, cfg, want_grad))
        .collect();

    // Fixed-order reduction.
    let mut sum_pos = 0.0;
    let mut sum_neg = 0.0;
    let mut sum_kr = 0.0;
    let mut grads = want_grad.then(|| state.params.zeros_like());
    for (job, r) in jobs.iter().zip(results) {
        let r = r?;
        if job.is_neg {
            sum_neg += r.term;
        } else {
            sum_pos += r.term;
        }
        if job.kr {
            sum_kr += r.kr;
        }
        if let (Some(acc), Some(g)) = (grads.as_mut(), r.grads.as_ref()) {
            acc.add_scaled(g, 1.0)?;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let l_pos = mean(sum_pos, batch.pos.len());
    let l_neg = mean(sum_neg, batch.neg.len());
    let l_kr = mean(sum_kr, n_kr);
    let report = LossReport {
        l_pos,
        l_neg,
        l_kr,
        total: l_pos + cfg.lambda1 * l_neg + cfg.lambda2 * l_kr,
        n_pos: batch.pos.len(),
        n_neg: batch.neg.len(),
    };
    Ok((report, grads))
}

/// Batch objective `l_pos + lambda1·l_neg + lambda2·l_kr`.
pub fn total_loss(state: &ModelState, bank: &FeatureBank, batch: &Batch, cfg: &TrainConfig) -> Result<LossReport> {
    Ok(evaluate(state, bank, batch, cfg, false)?.0)
}

/// Batch objective together with its analytic gradient.
pub fn backward(
    state: &ModelState,
    bank: &FeatureBank,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(LossReport, GradientSet)> {
    let (r, g) = evaluate(state, bank, batch, cfg, true)?;
    Ok((r, g.expect("gradient requested")))
}

/// Central differences of [`total_loss`] for every scalar parameter.
pub fn finite_diff_grad(
    state: &ModelState,
    bank: &FeatureBank,
    batch: &Batch,
    cfg: &TrainConfig,
    eps: f64,
) -> Result<GradientSet> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {eps}")));
    }
    let base = state.params.flatten();
    let mut probe = state.clone();
    let mut out = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let mut flat = base.clone();
        flat[k] = base[k] + eps;
        probe.params.assign_flat(&flat)?;
        let plus = total_loss(&probe, bank, batch, cfg)?.total;
        flat[k] = base[k] - eps;
        probe.params.assign_flat(&flat)?;
        let minus = total_loss(&probe, bank, batch, cfg)?.total;
        out.push((plus - minus) / (2.0 * eps));
    }
    let mut g = state.params.zeros_like();
    g.assign_flat(&out)?;
    Ok(g)
}

/// Largest `|a - n| / max(1e-8, |a| + |n|)` over all scalars, with the name of
/// the array where it occurs.
pub fn max_relative_error(analytic: &GradientSet, numeric: &GradientSet) -> Result<(f64, &'static str)> {
    let a = analytic.views();
    let n = numeric.views();
    if a.len() != n.len() {
        return Err(Error::ShapeMismatch("gradient set".into()));
    }
    let mut worst = (0.0, "");
    for ((name, _, x), (_, _, y)) in a.iter().zip(&n) {
        if x.len() != y.len() {
            return Err(Error::ShapeMismatch((*name).to_string()));
        }
        for (p, q) in x.iter().zip(y.iter()) {
            let rel = (p - q).abs() / (p.abs() + q.abs()).max(1e-8);
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel, name);
            }
        }
    }
    Ok(worst)
}
