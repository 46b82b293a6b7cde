//! Independent double-double evaluation of the training objective, written
//! from the loss definitions rather than from the production forward pass.
//! Central differences of this evaluator keep round-off near 1e-27, far below
//! the gradients being checked.

use std::collections::HashMap;
use std::ops::Range;

use super::dd::Dd;
use crate::error::{Error, Result};
use crate::model::{FeatureBank, GradientSet, ModelState, Role, TransformMode};
use crate::objectives::{Batch, KrScope, KrVariant};
use crate::trainer::TrainConfig;

/// Offsets of every parameter array in the canonical flat layout.
struct Layout {
    arrays: HashMap<&'static str, Range<usize>>,
    dim: usize,
    hidden: usize,
}

impl Layout {
    fn new(state: &ModelState) -> Layout {
        let mut arrays = HashMap::new();
        let mut off = 0;
        for (name, _, v) in state.params.views() {
            arrays.insert(name, off..off + v.len());
            off += v.len();
        }
        Layout {
            arrays,
            dim: state.dim(),
            hidden: state.hidden(),
        }
    }

    fn range(&self, name: &str) -> Range<usize> {
        self.arrays[name].clone()
    }
}

/// Resolved parameter ranges for one role.
struct RoleRanges {
    alpha: Range<usize>,
    beta: Range<usize>,
    shift: usize,
    net: [Range<usize>; 6],
    mlp: [Range<usize>; 4],
}

impl RoleRanges {
    fn new(layout: &Layout, head: &str, net: &str, mlp: &str) -> RoleRanges {
        let r = |a: &str, b: &str| layout.range(&format!("{a}.{b}"));
        RoleRanges {
            alpha: r(head, "alpha"),
            beta: r(head, "beta"),
            shift: r(head, "shift").start,
            net: ["w1", "b1", "w_alpha", "b_alpha", "w_beta", "b_beta"].map(|f| r(net, f)),
            mlp: ["w1", "b1", "w2", "b2"].map(|f| r(mlp, f)),
        }
    }
}

fn matvec(w: &[Dd], rows: usize, cols: usize, x: &[Dd]) -> Vec<Dd> {
    (0..rows)
        .map(|r| {
            let mut s = Dd::ZERO;
            for c in 0..cols {
                s = s + w[r * cols + c] * x[c];
            }
            s
        })
        .collect()
}

fn relu(x: Dd) -> Dd {
    if x.hi > 0.0 {
        x
    } else {
        Dd::ZERO
    }
}

fn lse(z: &[Dd]) -> Dd {
    let m = z.iter().copied().reduce(Dd::max).expect("non-empty");
    let mut s = Dd::ZERO;
    for &x in z {
        s = s + (x - m).exp();
    }
    m + s.ln()
}

fn dotdd(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).fold(Dd::ZERO, |s, (x, y)| s + *x * *y)
}

struct Image {
    v: Vec<Dd>,
    inv_vn: Dd,
    class: Option<usize>,
    /// Cosines against the untransformed rows.
    before: Vec<Dd>,
    /// Softmax of `before`.
    p_before: Vec<Dd>,
}

struct Evaluator<'a> {
    layout: Layout,
    roles: [RoleRanges; 2],
    mode: TransformMode,
    shared_net: bool,
    bank: Vec<(Role, Vec<Dd>)>,
    n_pos: usize,
    images: Vec<Image>,
    /// Transformed rows per image at the unperturbed parameters.
    base_rows: Vec<Vec<Vec<Dd>>>,
    batch: &'a Batch,
    cfg: &'a TrainConfig,
}

/// Roles whose rows depend on the parameter being varied.
#[derive(Clone, Copy)]
struct Dirty {
    pos: bool,
    neg: bool,
}

impl Dirty {
    const ALL: Dirty = Dirty { pos: true, neg: true };

    fn has(self, role: Role) -> bool {
        match role {
            Role::Positive => self.pos,
            Role::Negative => self.neg,
        }
    }
}

fn role_index(role: Role) -> usize {
    match role {
        Role::Positive => 0,
        Role::Negative => 1,
    }
}

impl Evaluator<'_> {
    /// `(alpha_res, beta_res)` of the meta-net serving `role`.
    fn meta(&self, p: &[Dd], role: Role, v: &[Dd]) -> (Vec<Dd>, Vec<Dd>) {
        let (d, h) = (self.layout.dim, self.layout.hidden);
        let net_role = if self.shared_net { Role::Positive } else { role };
        let [w1, b1, wa, ba, wb, bb] = &self.roles[role_index(net_role)].net;
        let pre = matvec(&p[w1.clone()], h, d, v);
        let hid: Vec<Dd> = pre.iter().zip(&p[b1.clone()]).map(|(x, b)| relu(*x + *b)).collect();
        let add = |w: &Range<usize>, b: &Range<usize>| -> Vec<Dd> {
            matvec(&p[w.clone()], d, h, &hid).into_iter().zip(&p[b.clone()]).map(|(x, b)| x + *b).collect()
        };
        (add(wa, ba), add(wb, bb))
    }

    /// Transformed, normalized rows. Rows whose role is not in `dirty` are
    /// copied from `cached`, which must hold the rows for the same image.
    fn transformed(&self, p: &[Dd], v: &[Dd], dirty: Dirty, cached: Option<&[Vec<Dd>]>) -> Vec<Vec<Dd>> {
        let (d, h) = (self.layout.dim, self.layout.hidden);
        let conds: Vec<Option<(Vec<Dd>, Vec<Dd>)>> = [Role::Positive, Role::Negative]
            .into_iter()
            .map(|r| {
                (dirty.has(r) && matches!(self.mode, TransformMode::ScaleShift | TransformMode::VecShift))
                    .then(|| self.meta(p, r, v))
            })
            .collect();
        self.bank
            .iter()
            .enumerate()
            .map(|(i, (role, c))| {
                if let (false, Some(rows)) = (dirty.has(*role), cached) {
                    return rows[i].clone();
                }
                let ri = role_index(*role);
                let rr = &self.roles[ri];
                let cond = &conds[ri];
                let u: Vec<Dd> = match self.mode {
                    TransformMode::ScaleShift => {
                        let (ar, br) = cond.as_ref().unwrap();
                        let (alpha, beta) = (&p[rr.alpha.clone()], &p[rr.beta.clone()]);
                        (0..d).map(|j| (alpha[j] + ar[j]) * c[j] + beta[j] + br[j]).collect()
                    }
                    TransformMode::VecShift => {
                        let (_, br) = cond.as_ref().unwrap();
                        let beta = &p[rr.beta.clone()];
                        (0..d).map(|j| c[j] + beta[j] + br[j]).collect()
                    }
                    TransformMode::ConstShift => c.iter().map(|x| *x + p[rr.shift]).collect(),
                    TransformMode::Mlp => {
                        let [w1, b1, w2, b2] = &rr.mlp;
                        let pre = matvec(&p[w1.clone()], h, d, c);
                        let hid: Vec<Dd> = pre.iter().zip(&p[b1.clone()]).map(|(x, b)| relu(*x + *b)).collect();
                        let out = matvec(&p[w2.clone()], d, h, &hid);
                        let b2 = &p[b2.clone()];
                        (0..d).map(|j| c[j] + out[j] + b2[j]).collect()
                    }
                };
                let inv = Dd::ONE / dotdd(&u, &u).sqrt();
                u.into_iter().map(|x| x * inv).collect()
            })
            .collect()
    }

    fn total(&self, p: &[Dd], dirty: Dirty) -> Dd {
        let cfg = self.cfg;
        let inv_tau = Dd::ONE / Dd::new(cfg.tau_loss);
        let k = Dd::new(self.bank.len() as f64);
        let mut sum_pos = Dd::ZERO;
        let mut sum_neg = Dd::ZERO;
        let mut sum_kr = Dd::ZERO;
        let mut n_kr = 0usize;
        for (img, cached) in self.images.iter().zip(&self.base_rows) {
            let (v, inv_vn, class) = (&img.v, img.inv_vn, img.class);
            let rows = self.transformed(p, v, dirty, Some(cached));
            let s: Vec<Dd> = rows.iter().map(|r| dotdd(r, v) * inv_vn).collect();
            let z: Vec<Dd> = s.iter().map(|&x| x * inv_tau).collect();
            match class {
                Some(y) => sum_pos = sum_pos + lse(&z) - z[y],
                None => sum_neg = sum_neg + lse(&z[..self.n_pos]) - lse(&z),
            }
            if class.is_none() && cfg.kr_scope == KrScope::Pos {
                continue;
            }
            n_kr += 1;
            let before = &img.before;
            sum_kr = sum_kr
                + match cfg.kr_variant {
                    KrVariant::Feature => {
                        let mut acc = Dd::ZERO;
                        for ((_, c), r) in self.bank.iter().zip(&rows) {
                            acc = acc + Dd::ONE - dotdd(c, r);
                        }
                        acc / k
                    }
                    KrVariant::Logits => {
                        let mut acc = Dd::ZERO;
                        for (a, b) in before.iter().zip(&s) {
                            let e = *a - *b;
                            acc = acc + e * e;
                        }
                        acc / k
                    }
                    KrVariant::Prob => {
                        let lq = lse(&s);
                        let mut acc = Dd::ZERO;
                        for (pi, b) in img.p_before.iter().zip(&s) {
                            acc = acc - *pi * (*b - lq);
                        }
                        acc
                    }
                };
        }
        let mean = |s: Dd, n: usize| if n == 0 { Dd::ZERO } else { s / Dd::new(n as f64) };
        mean(sum_pos, self.batch.pos.len())
            + Dd::new(cfg.lambda1) * mean(sum_neg, self.batch.neg.len())
            + Dd::new(cfg.lambda2) * mean(sum_kr, n_kr)
    }

    /// Rows affected by the array `name`.
    fn dirty(&self, name: &str) -> Dirty {
        if name.starts_with("pos_net") && self.shared_net {
            return Dirty::ALL;
        }
        let pos = name.starts_with("pos_");
        Dirty { pos, neg: !pos }
    }

    /// Arrays the transform reads in this mode; all others have zero derivative.
    fn is_read(&self, name: &str) -> bool {
        let (group, field) = name.split_once('.').expect("qualified name");
        if group == "neg_net" && self.shared_net {
            return false;
        }
        match self.mode {
            TransformMode::ConstShift => field == "shift",
            TransformMode::VecShift => {
                matches!(group, "pos_head" | "neg_head") && field == "beta"
                    || matches!(group, "pos_net" | "neg_net") && matches!(field, "w1" | "b1" | "w_beta" | "b_beta")
            }
            TransformMode::ScaleShift => {
                matches!(group, "pos_head" | "neg_head") && field != "shift" || matches!(group, "pos_net" | "neg_net")
            }
            TransformMode::Mlp => matches!(group, "pos_mlp" | "neg_mlp"),
        }
    }
}

fn evaluator<'a>(state: &ModelState, bank: &FeatureBank, batch: &'a Batch, cfg: &'a TrainConfig) -> Result<Evaluator<'a>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let layout = Layout::new(state);
    let roles = [
        RoleRanges::new(&layout, "pos_head", "pos_net", "pos_mlp"),
        RoleRanges::new(&layout, "neg_head", "neg_net", "neg_mlp"),
    ];
    let bank_rows: Vec<(Role, Vec<Dd>)> = (0..bank.n_rows())
        .map(|i| (bank.role(i), bank.row(i).iter().map(|&x| Dd::new(x)).collect()))
        .collect();
    let images = batch
        .pos
        .iter()
        .map(|(v, y)| (v, Some(*y)))
        .chain(batch.neg.iter().map(|v| (v, None)))
        .map(|(v, class)| {
            let v: Vec<Dd> = v.iter().map(|&x| Dd::new(x)).collect();
            let vn = dotdd(&v, &v).sqrt();
            let before: Vec<Dd> = bank_rows.iter().map(|(_, c)| dotdd(c, &v) / vn).collect();
            let lp = lse(&before);
            let p_before = before.iter().map(|&a| (a - lp).exp()).collect();
            Image { v, inv_vn: Dd::ONE / vn, class, before, p_before }
        })
        .collect();
    let mut ev = Evaluator {
        layout,
        roles,
        mode: state.mode,
        shared_net: state.shared_net,
        bank: bank_rows,
        n_pos: bank.n_pos(),
        images,
        base_rows: Vec::new(),
        batch,
        cfg,
    };
    let p = base_params(state);
    ev.base_rows = ev.images.iter().map(|img| ev.transformed(&p, &img.v, Dirty::ALL, None)).collect();
    Ok(ev)
}

fn base_params(state: &ModelState) -> Vec<Dd> {
    state.params.flatten().into_iter().map(Dd::new).collect()
}

/// Total loss in double-double precision, rounded to f64.
pub fn total_loss(state: &ModelState, bank: &FeatureBank, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    let ev = evaluator(state, bank, batch, cfg)?;
    Ok(ev.total(&base_params(state), Dirty::ALL).to_f64())
}

/// Central differences `(L(θ + eps) - L(θ - eps)) / 2 eps` for every scalar,
/// evaluated in double-double.
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
    let ev = evaluator(state, bank, batch, cfg)?;
    let base = base_params(state);
    let mut out = vec![0.0; base.len()];
    let mut offset = 0;
    let step = Dd::new(eps);
    for (name, _, v) in state.params.views() {
        if ev.is_read(name) {
            let dirty = ev.dirty(name);
            let mut p = base.clone();
            for k in offset..offset + v.len() {
                p[k] = base[k] + step;
                let plus = ev.total(&p, dirty);
                p[k] = base[k] - step;
                let minus = ev.total(&p, dirty);
                p[k] = base[k];
                out[k] = ((plus - minus) / step.scale(2.0)).to_f64();
            }
        }
        offset += v.len();
    }
    let mut g = state.params.zeros_like();
    g.assign_flat(&out)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{instance, GradcheckConfig};
    use crate::objectives;

    #[test]
    fn matches_production_loss() {
        let cfg = GradcheckConfig::default();
        for mode in TransformMode::ALL {
            for variant in KrVariant::ALL {
                for scope in [KrScope::Pos, KrScope::Both] {
                    let mut inst = instance(&cfg, mode, variant, 0).unwrap();
                    inst.train.kr_scope = scope;
                    let a = objectives::total_loss(&inst.state, &inst.bank, &inst.batch, &inst.train).unwrap().total;
                    let b = total_loss(&inst.state, &inst.bank, &inst.batch, &inst.train).unwrap();
                    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{mode:?}/{variant:?}/{scope:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn shared_net_reads_only_the_positive_net() {
        let cfg = GradcheckConfig::default();
        let mut inst = instance(&cfg, TransformMode::ScaleShift, KrVariant::Feature, 1).unwrap();
        inst.state = inst.state.with_shared_net(true);
        let a = objectives::total_loss(&inst.state, &inst.bank, &inst.batch, &inst.train).unwrap().total;
        let b = total_loss(&inst.state, &inst.bank, &inst.batch, &inst.train).unwrap();
        assert!((a - b).abs() <= 1e-12 * b.abs());
        let g = finite_diff_grad(&inst.state, &inst.bank, &inst.batch, &inst.train, 1e-5).unwrap();
        for (name, _, v) in g.views() {
            if name.starts_with("neg_net") {
                assert!(v.iter().all(|&x| x == 0.0), "{name}");
            }
        }
    }
}
