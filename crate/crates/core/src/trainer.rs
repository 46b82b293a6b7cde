//! AdamW, batch construction and the few-shot training loop.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, CheckpointMeta, Decay, FeatureBank, GradientSet, ModelState, Params};
use crate::objectives::{backward, Batch, KrScope, KrVariant, LossReport};
use crate::rng::{streams, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau_loss: f64,
    pub seed: u64,
    pub kr_variant: KrVariant,
    pub kr_scope: KrScope,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.3,
            lambda2: 100.0,
            lr: 1e-5,
            epochs: 3,
            batch_size: 32,
            tau_loss: 0.01,
            seed: 0,
            kr_variant: KrVariant::Feature,
            kr_scope: KrScope::Both,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, x) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(x >= 0.0 && x.is_finite()) {
                return bad(format!("{name} must be non-negative, got {x}"));
            }
        }
        if !(self.tau_loss > 0.0 && self.tau_loss.is_finite()) {
            return bad(format!("tau_loss must be positive, got {}", self.tau_loss));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("adamw betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad("adamw eps must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// First/second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// Decay pulls scale parameters (`alpha`) toward 1 and everything else toward 0.
pub fn adamw_step(
    params: &mut Params,
    grads: &GradientSet,
    opt: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    let g_views = grads.views();
    let mut p_views = params.views_mut();
    let mut m_views = opt.m.views_mut();
    let mut v_views = opt.v.views_mut();
    if g_views.len() != p_views.len() || m_views.len() != p_views.len() || v_views.len() != p_views.len() {
        return Err(Error::ShapeMismatch("parameter set".into()));
    }
    for (((p, g), m), v) in p_views.iter().zip(&g_views).zip(&m_views).zip(&v_views) {
        if p.2.len() != g.2.len() || p.2.len() != m.2.len() || p.2.len() != v.2.len() {
            return Err(Error::ShapeMismatch(p.0.to_string()));
        }
    }
    let t = opt.step + 1;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for (((p, g), m), v) in p_views
        .iter_mut()
        .zip(&g_views)
        .zip(m_views.iter_mut())
        .zip(v_views.iter_mut())
    {
        let anchor = match p.1 {
            Decay::TowardOne => 1.0,
            Decay::TowardZero => 0.0,
        };
        for (((theta, &gi), mi), vi) in p.2.iter_mut().zip(g.2.iter()).zip(m.2.iter_mut()).zip(v.2.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * (*theta - anchor));
        }
    }
    opt.step = t;
    Ok(())
}

/// Positive samples `(feature, class)` and outlier samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub pos: Vec<(Vec<f64>, usize)>,
    pub neg: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn is_empty(&self) -> bool {
        self.pos.is_empty() && self.neg.is_empty()
    }
}

/// Batches for one epoch.
///
/// Each side is shuffled with a generator keyed by `(seed, epoch)`. When both
/// sides are present a batch takes `ceil(b/2)` positives and `floor(b/2)`
/// negatives until both are exhausted; a single-sided set fills whole batches.
pub fn make_batches(train: &TrainingSet, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let both = !train.pos.is_empty() && !train.neg.is_empty();
    if batch_size == 0 || (both && batch_size < 2) {
        return Err(Error::InvalidConfig(format!(
            "batch_size {batch_size} too small for this training set"
        )));
    }
    let (per_pos, per_neg) = match (train.pos.is_empty(), train.neg.is_empty()) {
        (false, false) => (batch_size.div_ceil(2), batch_size / 2),
        (false, true) => (batch_size, 0),
        _ => (0, batch_size),
    };
    let mut rng = SeededRng::new(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), streams::BATCHES);
    let mut pos_idx: Vec<usize> = (0..train.pos.len()).collect();
    let mut neg_idx: Vec<usize> = (0..train.neg.len()).collect();
    rng.shuffle(&mut pos_idx);
    rng.shuffle(&mut neg_idx);

    let chunks = |n: usize, per: usize| if per == 0 { 0 } else { n.div_ceil(per) };
    let n_batches = chunks(pos_idx.len(), per_pos).max(chunks(neg_idx.len(), per_neg));
    let mut out = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let take = |idx: &[usize], per: usize| -> Vec<usize> {
            let lo = (b * per).min(idx.len());
            let hi = ((b + 1) * per).min(idx.len());
            idx[lo..hi].to_vec()
        };
        out.push(Batch {
            pos: take(&pos_idx, per_pos).into_iter().map(|i| train.pos[i].clone()).collect(),
            neg: take(&neg_idx, per_neg).into_iter().map(|i| train.neg[i].clone()).collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
}

/// Per-step losses, recorded before each optimizer update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,l_pos,l_neg,l_kr,total\n");
        for r in &self.records {
            let l = &r.report;
            writeln!(s, "{},{},{},{},{},{}", r.epoch, r.step, l.l_pos, l.l_neg, l.l_kr, l.total).unwrap();
        }
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    /// Mean total loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let n_epochs = self.records.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        let mut sums = vec![(0.0, 0usize); n_epochs];
        for r in &self.records {
            sums[r.epoch].0 += r.report.total;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

/// Runs `epochs × batches` of backward + AdamW from `state`.
pub fn train(
    mut state: ModelState,
    bank: &FeatureBank,
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, LossTrace)> {
    cfg.validate()?;
    if bank.dim() != state.dim() {
        return Err(Error::dim(state.dim(), bank.dim()));
    }
    for v in data.pos.iter().map(|(v, _)| v).chain(&data.neg) {
        if v.len() != state.dim() {
            return Err(Error::dim(state.dim(), v.len()));
        }
    }
    let mut opt = OptimizerState::new(&state.params);
    let mut trace = LossTrace::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in make_batches(data, cfg.batch_size, cfg.seed, epoch)? {
            let (report, grads) = backward(&state, bank, &batch, cfg)?;
            adamw_step(&mut state.params, &grads, &mut opt, &cfg.adamw, cfg.lr)?;
            trace.records.push(TraceRecord { epoch, step, report });
            step += 1;
        }
        log::debug!("epoch {epoch}: mean loss {:.6}", trace.epoch_means()[epoch]);
    }
    let meta = CheckpointMeta {
        config: cfg.clone(),
        seed: cfg.seed,
        trace_digest: trace.digest(),
    };
    Ok((Checkpoint { model: state, meta }, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, TransformMode};
    use crate::numerics::{l2_normalize, Mat};

    fn scalar_setup(theta: f64) -> (Params, OptimizerState) {
        let mut p = init_model(1, 1, TransformMode::ConstShift, 0).unwrap().params;
        p.pos_head.shift = theta;
        let opt = OptimizerState::new(&p);
        (p, opt)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut p, mut opt) = scalar_setup(0.4);
        let before = p.clone();
        let g = p.zeros_like();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        adamw_step(&mut p, &g, &mut opt, &cfg, 1e-2).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let (theta, g, lr) = (0.5, 0.2, 1e-2);
        let cfg = AdamWConfig::default();
        let (mut p, mut opt) = scalar_setup(theta);
        let mut grads = p.zeros_like();
        grads.pos_head.shift = g;
        adamw_step(&mut p, &grads, &mut opt, &cfg, lr).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction.
        let m_hat = (1.0 - 0.9) * g / (1.0 - 0.9);
        let v_hat = (1.0 - 0.999) * g * g / (1.0 - 0.999);
        let expect = theta - lr * (m_hat / (v_hat.sqrt() + 1e-8) + 1e-2 * theta);
        assert!((p.pos_head.shift - expect).abs() < 1e-15);
    }

    #[test]
    fn three_adam_steps_match_hand_computation() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let lr = 0.1;
        let gs = [0.3, -0.1, 0.25];
        let (mut p, mut opt) = scalar_setup(1.0);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let mut grads = p.zeros_like();
            grads.pos_head.shift = g;
            adamw_step(&mut p, &grads, &mut opt, &cfg, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            theta -= lr * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        assert!((p.pos_head.shift - theta).abs() < 1e-14, "{} vs {theta}", p.pos_head.shift);
    }

    #[test]
    fn alpha_decays_toward_one() {
        let mut p = init_model(2, 1, TransformMode::ScaleShift, 0).unwrap().params;
        p.pos_head.alpha = vec![3.0, 1.0];
        let mut opt = OptimizerState::new(&p);
        let g = p.zeros_like();
        let cfg = AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() };
        adamw_step(&mut p, &g, &mut opt, &cfg, 0.1).unwrap();
        assert!((p.pos_head.alpha[0] - (3.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(p.pos_head.alpha[1], 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut p, mut opt) = scalar_setup(0.0);
        let other = init_model(2, 1, TransformMode::ConstShift, 0).unwrap().params;
        let r = adamw_step(&mut p, &other, &mut opt, &AdamWConfig::default(), 0.1);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    fn toy_set(n_pos: usize, n_neg: usize) -> TrainingSet {
        let mut rng = SeededRng::new(5, 0);
        TrainingSet {
            pos: (0..n_pos).map(|i| (l2_normalize(&rng.gaussian_vec(4)).unwrap(), i % 2)).collect(),
            neg: (0..n_neg).map(|_| l2_normalize(&rng.gaussian_vec(4)).unwrap()).collect(),
        }
    }

    #[test]
    fn batching_counts_and_determinism() {
        let set = toy_set(10, 10);
        let a = make_batches(&set, 4, 1, 0).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|b| b.pos.len() == 2 && b.neg.len() == 2));
        assert_eq!(a, make_batches(&set, 4, 1, 0).unwrap());
        assert_ne!(a, make_batches(&set, 4, 1, 1).unwrap());

        // Partial last batch is kept; uneven sides run until both are exhausted.
        let uneven = toy_set(7, 3);
        let b = make_batches(&uneven, 5, 2, 0).unwrap();
        assert_eq!(b.iter().map(|x| x.pos.len()).collect::<Vec<_>>(), vec![3, 3, 1]);
        assert_eq!(b.iter().map(|x| x.neg.len()).collect::<Vec<_>>(), vec![2, 1, 0]);

        let pos_only = toy_set(5, 0);
        let c = make_batches(&pos_only, 2, 0, 0).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|x| x.neg.is_empty()));

        assert!(matches!(make_batches(&TrainingSet::default(), 4, 0, 0), Err(Error::EmptyTrainingSet)));
        assert!(make_batches(&set, 1, 0, 0).is_err());
    }

    #[test]
    fn epochs_without_replacement() {
        let set = toy_set(9, 6);
        let batches = make_batches(&set, 4, 3, 2).unwrap();
        let mut seen: Vec<Vec<f64>> = batches.iter().flat_map(|b| b.pos.iter().map(|(v, _)| v.clone())).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut all: Vec<Vec<f64>> = set.pos.iter().map(|(v, _)| v.clone()).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen, all);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lambda2: -1.0, ..TrainConfig::default() },
            TrainConfig { tau_loss: 0.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn training_is_deterministic_and_traced() {
        let mut rng = SeededRng::new(9, 0);
        let bank = FeatureBank::unlabeled(
            Mat::from_vec(2, 4, rng.gaussian_vec(8)).unwrap(),
            Mat::from_vec(3, 4, rng.gaussian_vec(12)).unwrap(),
        )
        .unwrap();
        let set = toy_set(6, 6);
        let cfg = TrainConfig { batch_size: 4, lr: 1e-3, ..TrainConfig::default() };
        let s = init_model(4, 8, TransformMode::ScaleShift, 1).unwrap();
        let (c1, t1) = train(s.clone(), &bank, &set, &cfg).unwrap();
        let (c2, t2) = train(s.clone(), &bank, &set, &cfg).unwrap();
        assert_eq!(c1.encode(), c2.encode());
        assert_eq!(t1, t2);
        assert_eq!(t1.records.len(), 9);
        assert!(t1.records.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert_eq!(c1.meta.trace_digest, t1.digest());
        assert!(t1.to_csv().starts_with("epoch,step,l_pos,l_neg,l_kr,total\n"));
        assert_eq!(t1.epoch_means().len(), 3);
        let shapes: Vec<usize> = s.params.views().iter().map(|v| v.2.len()).collect();
        let after: Vec<usize> = c1.model.params.views().iter().map(|v| v.2.len()).collect();
        assert_eq!(shapes, after);

        let bad = TrainConfig { epochs: 0, ..cfg };
        assert!(matches!(train(s, &bank, &set, &bad), Err(Error::InvalidConfig(_))));
    }
}
