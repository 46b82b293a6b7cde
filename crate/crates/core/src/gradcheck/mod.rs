//! Seeded gradient-check instances and a pass/fail report, shared by the CLI
//! and the test suites.
//!
//! The numeric side is a central difference of [`reference::total_loss`], an
//! extended-precision re-implementation of the objective. In plain f64 the
//! difference quotient carries round-off of roughly `1e-16 · |L| / eps`, which
//! for `eps = 1e-5` exceeds the per-entry tolerance on gradient entries near
//! `1e-7`.

pub mod dd;
pub mod reference;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{init_model, FeatureBank, ModelState, TransformMode};
use crate::numerics::{l2_normalize, Mat};
use crate::objectives::{backward, max_relative_error, Batch, KrVariant};
use crate::rng::{streams, SeededRng};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub dim: usize,
    pub hidden: usize,
    pub batch_pos: usize,
    pub batch_neg: usize,
    /// Half-width of the uniform noise added to the initial parameters.
    pub perturb: f64,
    /// Instances with a ReLU pre-activation closer than this to zero are redrawn.
    pub relu_margin: f64,
    pub eps: f64,
    pub tolerance: f64,
    pub tau_loss: f64,
    pub lambda2: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            n_pos: 5,
            n_neg: 7,
            dim: 16,
            hidden: 8,
            batch_pos: 3,
            batch_neg: 3,
            perturb: 0.3,
            relu_margin: 1e-3,
            eps: 1e-5,
            tolerance: 1e-4,
            tau_loss: 0.01,
            lambda2: 100.0,
            seed: 0,
        }
    }
}

pub struct Instance {
    pub state: ModelState,
    pub bank: FeatureBank,
    pub batch: Batch,
    pub train: TrainConfig,
}

fn unit(rng: &mut SeededRng, d: usize) -> Result<Vec<f64>> {
    l2_normalize(&rng.gaussian_vec(d))
}

/// Instance `index` for one mode and KR variant. Every combination draws from
/// its own generator, so instances do not depend on iteration order. Draws
/// that put a ReLU input within `relu_margin` of zero are rejected, since
/// central differences straddling a kink do not estimate a derivative.
pub fn instance(cfg: &GradcheckConfig, mode: TransformMode, variant: KrVariant, index: usize) -> Result<Instance> {
    let key = (mode.tag() as u64) << 40 | (variant as u64) << 32 | index as u64;
    let mut rng = SeededRng::new(cfg.seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15), streams::GRADCHECK);
    loop {
        let inst = draw(cfg, mode, variant, &mut rng)?;
        let images = inst.batch.pos.iter().map(|(v, _)| v).chain(&inst.batch.neg);
        let mut ok = true;
        for v in images {
            let fwd = inst.state.forward_bank(&inst.bank, v)?;
            if fwd.min_relu_margin().is_some_and(|m| m < cfg.relu_margin) {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(inst);
        }
    }
}

fn draw(cfg: &GradcheckConfig, mode: TransformMode, variant: KrVariant, rng: &mut SeededRng) -> Result<Instance> {
    let d = cfg.dim;
    let pos = Mat::from_vec(cfg.n_pos, d, rng.gaussian_vec(cfg.n_pos * d))?;
    let neg = Mat::from_vec(cfg.n_neg, d, rng.gaussian_vec(cfg.n_neg * d))?;
    let bank = FeatureBank::unlabeled(pos, neg)?;
    let batch = Batch {
        pos: (0..cfg.batch_pos)
            .map(|_| Ok((unit(rng, d)?, rng.below(cfg.n_pos))))
            .collect::<Result<_>>()?,
        neg: (0..cfg.batch_neg).map(|_| unit(rng, d)).collect::<Result<_>>()?,
    };
    let mut state = init_model(d, cfg.hidden, mode, rng.next_u64())?;
    state.perturb(rng, cfg.perturb);
    let train = TrainConfig {
        kr_variant: variant,
        tau_loss: cfg.tau_loss,
        lambda2: cfg.lambda2,
        ..TrainConfig::default()
    };
    Ok(Instance { state, bank, batch, train })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub mode: TransformMode,
    pub variant: KrVariant,
    pub instance: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub passed: bool,
}

/// Checks every mode × variant × instance. With `corrupt`, analytic
/// gradients of the positive shift vector are scaled by 1.5 before the
/// comparison, which the check must catch.
pub fn run(cfg: &GradcheckConfig, corrupt: bool) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for mode in TransformMode::ALL {
        for variant in KrVariant::ALL {
            for i in 0..cfg.instances {
                let inst = instance(cfg, mode, variant, i)?;
                let (_, mut analytic) = backward(&inst.state, &inst.bank, &inst.batch, &inst.train)?;
                if corrupt {
                    corrupt_gradient(&mut analytic, mode);
                }
                let numeric = reference::finite_diff_grad(&inst.state, &inst.bank, &inst.batch, &inst.train, cfg.eps)?;
                let (err, name) = max_relative_error(&analytic, &numeric)?;
                out.push(CaseResult {
                    mode,
                    variant,
                    instance: i,
                    max_rel_error: err,
                    worst_param: name.to_string(),
                    passed: err < cfg.tolerance,
                });
            }
        }
    }
    Ok(out)
}

fn corrupt_gradient(g: &mut crate::model::GradientSet, mode: TransformMode) {
    match mode {
        TransformMode::ConstShift => g.pos_head.shift *= 1.5,
        TransformMode::Mlp => g.pos_mlp.b2.iter_mut().for_each(|x| *x *= 1.5),
        TransformMode::VecShift | TransformMode::ScaleShift => g.pos_head.beta.iter_mut().for_each(|x| *x *= 1.5),
    }
}
