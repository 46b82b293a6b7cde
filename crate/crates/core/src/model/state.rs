use serde::{Deserialize, Serialize};

use super::{FeatureBank, Role, TransformMode};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Mat, EPS_NORM};
use crate::rng::{streams, SeededRng};

/// Default meta-net width: `max(D / 16, 8)`.
pub fn default_hidden(dim: usize) -> usize {
    (dim / 16).max(8)
}

/// Element-wise scale/shift for one distribution. `shift` is the scalar used
/// only by [`TransformMode::ConstShift`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformHead {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub shift: f64,
}

impl TransformHead {
    fn identity(dim: usize) -> Self {
        TransformHead {
            alpha: vec![1.0; dim],
            beta: vec![0.0; dim],
            shift: 0.0,
        }
    }

    fn zeros(dim: usize) -> Self {
        TransformHead {
            alpha: vec![0.0; dim],
            beta: vec![0.0; dim],
            shift: 0.0,
        }
    }
}

/// Image-conditional residual generator: a shared rectified trunk followed by
/// two linear heads producing `alpha` and `beta` residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaNet {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w_alpha: Mat,
    pub b_alpha: Vec<f64>,
    pub w_beta: Mat,
    pub b_beta: Vec<f64>,
}

struct NetCache {
    h_pre: Vec<f64>,
    h: Vec<f64>,
    alpha_res: Vec<f64>,
    beta_res: Vec<f64>,
}

impl MetaNet {
    fn zeros(dim: usize, hidden: usize) -> Self {
        MetaNet {
            w1: Mat::zeros(hidden, dim),
            b1: vec![0.0; hidden],
            w_alpha: Mat::zeros(dim, hidden),
            b_alpha: vec![0.0; dim],
            w_beta: Mat::zeros(dim, hidden),
            b_beta: vec![0.0; dim],
        }
    }

    fn init(dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let mut net = MetaNet::zeros(dim, hidden);
        fill_trunk(&mut net.w1, &mut net.b1, dim, rng);
        net
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    fn forward(&self, v: &[f64]) -> NetCache {
        let mut h_pre = self.w1.matvec(v);
        for (x, b) in h_pre.iter_mut().zip(&self.b1) {
            *x += b;
        }
        let h: Vec<f64> = h_pre.iter().map(|&x| x.max(0.0)).collect();
        let mut alpha_res = self.w_alpha.matvec(&h);
        for (x, b) in alpha_res.iter_mut().zip(&self.b_alpha) {
            *x += b;
        }
        let mut beta_res = self.w_beta.matvec(&h);
        for (x, b) in beta_res.iter_mut().zip(&self.b_beta) {
            *x += b;
        }
        NetCache {
            h_pre,
            h,
            alpha_res,
            beta_res,
        }
    }

    /// Accumulates into `grad` given upstream gradients w.r.t. the two residual outputs.
    fn backward(
        &self,
        cache: &NetCache,
        v: &[f64],
        g_alpha: Option<&[f64]>,
        g_beta: &[f64],
        grad: &mut MetaNet,
    ) {
        let mut gh = self.w_beta.matvec_t(g_beta);
        grad.w_beta.add_outer(g_beta, &cache.h);
        add_into(&mut grad.b_beta, g_beta);
        if let Some(ga) = g_alpha {
            grad.w_alpha.add_outer(ga, &cache.h);
            add_into(&mut grad.b_alpha, ga);
            add_into(&mut gh, &self.w_alpha.matvec_t(ga));
        }
        for (g, &pre) in gh.iter_mut().zip(&cache.h_pre) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        grad.w1.add_outer(&gh, v);
        add_into(&mut grad.b1, &gh);
    }
}

/// Residual two-layer MLP on the text feature itself: `c + W2·relu(W1·c + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualMlp {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl ResidualMlp {
    fn zeros(dim: usize, hidden: usize) -> Self {
        ResidualMlp {
            w1: Mat::zeros(hidden, dim),
            b1: vec![0.0; hidden],
            w2: Mat::zeros(dim, hidden),
            b2: vec![0.0; dim],
        }
    }

    fn init(dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let mut mlp = ResidualMlp::zeros(dim, hidden);
        fill_trunk(&mut mlp.w1, &mut mlp.b1, dim, rng);
        mlp
    }

    fn pre_activation(&self, c: &[f64]) -> Vec<f64> {
        let mut pre = self.w1.matvec(c);
        add_into(&mut pre, &self.b1);
        pre
    }
}

fn fill_trunk(w: &mut Mat, b: &mut [f64], dim: usize, rng: &mut SeededRng) {
    let bound = 1.0 / (dim as f64).sqrt();
    for x in w.as_mut_slice() {
        *x = rng.uniform_range(-bound, bound);
    }
    for x in b {
        *x = rng.uniform_range(-bound, bound);
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// How weight decay treats a parameter array: pulled toward 0, or toward 1 for scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    TowardZero,
    TowardOne,
}

/// Every learnable array. Field order here is the checkpoint payload order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub pos_head: TransformHead,
    pub neg_head: TransformHead,
    pub pos_net: MetaNet,
    pub neg_net: MetaNet,
    pub pos_mlp: ResidualMlp,
    pub neg_mlp: ResidualMlp,
}

/// Gradients share the parameter layout.
pub type GradientSet = Params;

impl Params {
    fn zeros(dim: usize, hidden: usize) -> Self {
        Params {
            pos_head: TransformHead::zeros(dim),
            neg_head: TransformHead::zeros(dim),
            pos_net: MetaNet::zeros(dim, hidden),
            neg_net: MetaNet::zeros(dim, hidden),
            pos_mlp: ResidualMlp::zeros(dim, hidden),
            neg_mlp: ResidualMlp::zeros(dim, hidden),
        }
    }

    /// All-zero arrays with the same shapes.
    pub fn zeros_like(&self) -> Self {
        Params::zeros(self.dim(), self.hidden())
    }

    pub fn dim(&self) -> usize {
        self.pos_head.alpha.len()
    }

    pub fn hidden(&self) -> usize {
        self.pos_net.hidden()
    }

    /// Named read-only views in canonical order.
    pub fn views(&self) -> Vec<(&'static str, Decay, &[f64])> {
        let mut out: Vec<(&'static str, Decay, &[f64])> = vec![
            ("pos_head.alpha", Decay::TowardOne, &self.pos_head.alpha[..]),
            ("pos_head.beta", Decay::TowardZero, &self.pos_head.beta[..]),
            ("pos_head.shift", Decay::TowardZero, std::slice::from_ref(&self.pos_head.shift)),
            ("neg_head.alpha", Decay::TowardOne, &self.neg_head.alpha[..]),
            ("neg_head.beta", Decay::TowardZero, &self.neg_head.beta[..]),
            ("neg_head.shift", Decay::TowardZero, std::slice::from_ref(&self.neg_head.shift)),
        ];
        for (p, n) in [("pos_net", &self.pos_net), ("neg_net", &self.neg_net)] {
            let names = net_names(p);
            out.push((names[0], Decay::TowardZero, n.w1.as_slice()));
            out.push((names[1], Decay::TowardZero, &n.b1[..]));
            out.push((names[2], Decay::TowardZero, n.w_alpha.as_slice()));
            out.push((names[3], Decay::TowardZero, &n.b_alpha[..]));
            out.push((names[4], Decay::TowardZero, n.w_beta.as_slice()));
            out.push((names[5], Decay::TowardZero, &n.b_beta[..]));
        }
        for (p, m) in [("pos_mlp", &self.pos_mlp), ("neg_mlp", &self.neg_mlp)] {
            let names = mlp_names(p);
            out.push((names[0], Decay::TowardZero, m.w1.as_slice()));
            out.push((names[1], Decay::TowardZero, &m.b1[..]));
            out.push((names[2], Decay::TowardZero, m.w2.as_slice()));
            out.push((names[3], Decay::TowardZero, &m.b2[..]));
        }
        out
    }

    /// Named mutable views in canonical order.
    pub fn views_mut(&mut self) -> Vec<(&'static str, Decay, &mut [f64])> {
        let Params {
            pos_head,
            neg_head,
            pos_net,
            neg_net,
            pos_mlp,
            neg_mlp,
        } = self;
        let mut out: Vec<(&'static str, Decay, &mut [f64])> = vec![
            ("pos_head.alpha", Decay::TowardOne, &mut pos_head.alpha[..]),
            ("pos_head.beta", Decay::TowardZero, &mut pos_head.beta[..]),
            ("pos_head.shift", Decay::TowardZero, std::slice::from_mut(&mut pos_head.shift)),
            ("neg_head.alpha", Decay::TowardOne, &mut neg_head.alpha[..]),
            ("neg_head.beta", Decay::TowardZero, &mut neg_head.beta[..]),
            ("neg_head.shift", Decay::TowardZero, std::slice::from_mut(&mut neg_head.shift)),
        ];
        for (p, n) in [("pos_net", pos_net), ("neg_net", neg_net)] {
            let names = net_names(p);
            out.push((names[0], Decay::TowardZero, n.w1.as_mut_slice()));
            out.push((names[1], Decay::TowardZero, &mut n.b1[..]));
            out.push((names[2], Decay::TowardZero, n.w_alpha.as_mut_slice()));
            out.push((names[3], Decay::TowardZero, &mut n.b_alpha[..]));
            out.push((names[4], Decay::TowardZero, n.w_beta.as_mut_slice()));
            out.push((names[5], Decay::TowardZero, &mut n.b_beta[..]));
        }
        for (p, m) in [("pos_mlp", pos_mlp), ("neg_mlp", neg_mlp)] {
            let names = mlp_names(p);
            out.push((names[0], Decay::TowardZero, m.w1.as_mut_slice()));
            out.push((names[1], Decay::TowardZero, &mut m.b1[..]));
            out.push((names[2], Decay::TowardZero, m.w2.as_mut_slice()));
            out.push((names[3], Decay::TowardZero, &mut m.b2[..]));
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.views().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// Concatenation of all arrays in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, _, v) in self.views() {
            out.extend_from_slice(v);
        }
        out
    }

    /// Inverse of [`Params::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_scalars();
        if flat.len() != n {
            return Err(Error::dim(n, flat.len()));
        }
        let mut off = 0;
        for (_, _, v) in self.views_mut() {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.views()
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// `self += other * k`, array by array.
    pub fn add_scaled(&mut self, other: &Params, k: f64) -> Result<()> {
        let src = other.views();
        let mut dst = self.views_mut();
        if src.len() != dst.len() {
            return Err(Error::ShapeMismatch("parameter set".into()));
        }
        for ((name, _, d), (_, _, s)) in dst.iter_mut().zip(&src) {
            if d.len() != s.len() {
                return Err(Error::ShapeMismatch((*name).to_string()));
            }
            for (a, b) in d.iter_mut().zip(s.iter()) {
                *a += k * b;
            }
        }
        Ok(())
    }

    fn head(&self, role: Role) -> &TransformHead {
        match role {
            Role::Positive => &self.pos_head,
            Role::Negative => &self.neg_head,
        }
    }

    fn head_mut(&mut self, role: Role) -> &mut TransformHead {
        match role {
            Role::Positive => &mut self.pos_head,
            Role::Negative => &mut self.neg_head,
        }
    }

    fn mlp(&self, role: Role) -> &ResidualMlp {
        match role {
            Role::Positive => &self.pos_mlp,
            Role::Negative => &self.neg_mlp,
        }
    }

    fn mlp_mut(&mut self, role: Role) -> &mut ResidualMlp {
        match role {
            Role::Positive => &mut self.pos_mlp,
            Role::Negative => &mut self.neg_mlp,
        }
    }
}

fn net_names(prefix: &str) -> [&'static str; 6] {
    if prefix == "pos_net" {
        ["pos_net.w1", "pos_net.b1", "pos_net.w_alpha", "pos_net.b_alpha", "pos_net.w_beta", "pos_net.b_beta"]
    } else {
        ["neg_net.w1", "neg_net.b1", "neg_net.w_alpha", "neg_net.b_alpha", "neg_net.w_beta", "neg_net.b_beta"]
    }
}

fn mlp_names(prefix: &str) -> [&'static str; 4] {
    if prefix == "pos_mlp" {
        ["pos_mlp.w1", "pos_mlp.b1", "pos_mlp.w2", "pos_mlp.b2"]
    } else {
        ["neg_mlp.w1", "neg_mlp.b1", "neg_mlp.w2", "neg_mlp.b2"]
    }
}

/// Learnable state for positive and negative transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub mode: TransformMode,
    /// When set, negative rows are conditioned by `pos_net` and `neg_net` is unused.
    pub shared_net: bool,
    pub params: Params,
}

/// Conditioning for one role and one image.
struct RoleCond {
    net: Option<NetCache>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    shift: f64,
}

/// Transformed bank for one image plus the intermediates needed for backward.
pub struct BankForward {
    pub rows: Mat,
    norms: Vec<f64>,
    pos: RoleCond,
    neg: RoleCond,
    mlp_pre: Option<Mat>,
}

impl BankForward {
    /// Smallest `|pre-activation|` over every ReLU used for this image, or
    /// `None` when the transform has no ReLU. Values near zero mark points
    /// where the loss is not differentiable.
    pub fn min_relu_margin(&self) -> Option<f64> {
        let nets = [&self.pos, &self.neg].into_iter().filter_map(|c| c.net.as_ref());
        let pre = nets
            .flat_map(|n| n.h_pre.iter())
            .chain(self.mlp_pre.iter().flat_map(|m| m.as_slice().iter()));
        pre.map(|x| x.abs()).reduce(f64::min)
    }

    fn cond(&self, role: Role) -> &RoleCond {
        match role {
            Role::Positive => &self.pos,
            Role::Negative => &self.neg,
        }
    }
}

/// Fresh state whose transform is the identity for every input.
pub fn init_model(dim: usize, hidden: usize, mode: TransformMode, seed: u64) -> Result<ModelState> {
    ModelState::init(dim, hidden, mode, seed)
}

impl ModelState {
    pub fn init(dim: usize, hidden: usize, mode: TransformMode, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDim("dim must be at least 1".into()));
        }
        if hidden == 0 {
            return Err(Error::InvalidDim("hidden must be at least 1".into()));
        }
        let mut rng = SeededRng::new(seed, streams::INIT);
        let pos_net = MetaNet::init(dim, hidden, &mut rng);
        let neg_net = MetaNet::init(dim, hidden, &mut rng);
        let pos_mlp = ResidualMlp::init(dim, hidden, &mut rng);
        let neg_mlp = ResidualMlp::init(dim, hidden, &mut rng);
        Ok(ModelState {
            mode,
            shared_net: false,
            params: Params {
                pos_head: TransformHead::identity(dim),
                neg_head: TransformHead::identity(dim),
                pos_net,
                neg_net,
                pos_mlp,
                neg_mlp,
            },
        })
    }

    pub fn with_shared_net(mut self, shared: bool) -> Self {
        self.shared_net = shared;
        self
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn hidden(&self) -> usize {
        self.params.hidden()
    }

    /// Adds uniform noise in `[-scale, scale]` to every parameter. Used to move
    /// away from the identity point in tests and gradient checks.
    pub fn perturb(&mut self, rng: &mut SeededRng, scale: f64) {
        for (_, _, v) in self.params.views_mut() {
            for x in v {
                *x += rng.uniform_range(-scale, scale);
            }
        }
    }

    fn net(&self, role: Role) -> &MetaNet {
        match (role, self.shared_net) {
            (Role::Negative, false) => &self.params.neg_net,
            _ => &self.params.pos_net,
        }
    }

    fn net_grad<'a>(&self, role: Role, grads: &'a mut Params) -> &'a mut MetaNet {
        match (role, self.shared_net) {
            (Role::Negative, false) => &mut grads.neg_net,
            _ => &mut grads.pos_net,
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::dim(self.dim(), len));
        }
        Ok(())
    }

    fn condition(&self, role: Role, v: &[f64]) -> RoleCond {
        let head = self.params.head(role);
        match self.mode {
            TransformMode::ScaleShift => {
                let cache = self.net(role).forward(v);
                let alpha = head.alpha.iter().zip(&cache.alpha_res).map(|(a, r)| a + r).collect();
                let beta = head.beta.iter().zip(&cache.beta_res).map(|(b, r)| b + r).collect();
                RoleCond { net: Some(cache), alpha, beta, shift: 0.0 }
            }
            TransformMode::VecShift => {
                let cache = self.net(role).forward(v);
                let beta = head.beta.iter().zip(&cache.beta_res).map(|(b, r)| b + r).collect();
                RoleCond { net: Some(cache), alpha: Vec::new(), beta, shift: 0.0 }
            }
            TransformMode::ConstShift => RoleCond {
                net: None,
                alpha: Vec::new(),
                beta: Vec::new(),
                shift: head.shift,
            },
            TransformMode::Mlp => RoleCond {
                net: None,
                alpha: Vec::new(),
                beta: Vec::new(),
                shift: 0.0,
            },
        }
    }

    /// Pre-normalization output for one row. `mlp_pre` receives the hidden
    /// pre-activation in Mlp mode.
    fn apply_row(&self, role: Role, cond: &RoleCond, c: &[f64], mlp_pre: Option<&mut [f64]>) -> Vec<f64> {
        match self.mode {
            TransformMode::ScaleShift => c
                .iter()
                .zip(&cond.alpha)
                .zip(&cond.beta)
                .map(|((x, a), b)| a * x + b)
                .collect(),
            TransformMode::VecShift => c.iter().zip(&cond.beta).map(|(x, b)| x + b).collect(),
            TransformMode::ConstShift => c.iter().map(|x| x + cond.shift).collect(),
            TransformMode::Mlp => {
                let mlp = self.params.mlp(role);
                let pre = mlp.pre_activation(c);
                let h: Vec<f64> = pre.iter().map(|&x| x.max(0.0)).collect();
                let mut u = mlp.w2.matvec(&h);
                for ((o, x), b) in u.iter_mut().zip(c).zip(&mlp.b2) {
                    *o = x + (*o + b);
                }
                if let Some(buf) = mlp_pre {
                    buf.copy_from_slice(&pre);
                }
                u
            }
        }
    }

    /// Transforms every bank row for image `v` and keeps the intermediates.
    pub fn forward_bank(&self, bank: &FeatureBank, v: &[f64]) -> Result<BankForward> {
        self.check_dim(bank.dim())?;
        self.check_dim(v.len())?;
        let pos = self.condition(Role::Positive, v);
        let neg = self.condition(Role::Negative, v);
        let n = bank.n_rows();
        let d = self.dim();
        let mut rows = Mat::zeros(n, d);
        let mut norms = Vec::with_capacity(n);
        let mut mlp_pre = (self.mode == TransformMode::Mlp).then(|| Mat::zeros(n, self.hidden()));
        for i in 0..n {
            let role = bank.role(i);
            let cond = if role == Role::Positive { &pos } else { &neg };
            let u = self.apply_row(role, cond, bank.row(i), mlp_pre.as_mut().map(|m| m.row_mut(i)));
            let nu = norm(&u);
            if !(nu > EPS_NORM) {
                return Err(Error::ZeroNorm { norm: nu, eps: EPS_NORM });
            }
            for (o, x) in rows.row_mut(i).iter_mut().zip(&u) {
                *o = x / nu;
            }
            norms.push(nu);
        }
        Ok(BankForward { rows, norms, pos, neg, mlp_pre })
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the transformed rows is `grad_rows`.
    pub fn backward_bank(
        &self,
        bank: &FeatureBank,
        v: &[f64],
        fwd: &BankForward,
        grad_rows: &Mat,
        grads: &mut Params,
    ) -> Result<()> {
        self.check_dim(v.len())?;
        if grad_rows.rows() != bank.n_rows() || grad_rows.cols() != self.dim() {
            return Err(Error::ShapeMismatch("row gradients".into()));
        }
        let d = self.dim();
        let mut g_alpha = [vec![0.0; d], vec![0.0; d]];
        let mut g_beta = [vec![0.0; d], vec![0.0; d]];
        let mut g_shift = [0.0; 2];
        let mut du = vec![0.0; d];
        for i in 0..bank.n_rows() {
            let g = grad_rows.row(i);
            let out = fwd.rows.row(i);
            let proj = dot(g, out);
            let inv = 1.0 / fwd.norms[i];
            for ((o, gi), ci) in du.iter_mut().zip(g).zip(out) {
                *o = (gi - proj * ci) * inv;
            }
            let role = bank.role(i);
            let r = role as usize;
            let c = bank.row(i);
            match self.mode {
                TransformMode::ScaleShift => {
                    for ((ga, x), u) in g_alpha[r].iter_mut().zip(c).zip(&du) {
                        *ga += u * x;
                    }
                    add_into(&mut g_beta[r], &du);
                }
                TransformMode::VecShift => add_into(&mut g_beta[r], &du),
                TransformMode::ConstShift => {
                    for u in &du {
                        g_shift[r] += u;
                    }
                }
                TransformMode::Mlp => {
                    let pre = fwd.mlp_pre.as_ref().expect("mlp forward cache").row(i);
                    let h: Vec<f64> = pre.iter().map(|&x| x.max(0.0)).collect();
                    let mlp = self.params.mlp(role);
                    let mut gh = mlp.w2.matvec_t(&du);
                    for (gv, &p) in gh.iter_mut().zip(pre) {
                        if p <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    let gm = grads.mlp_mut(role);
                    gm.w2.add_outer(&du, &h);
                    add_into(&mut gm.b2, &du);
                    gm.w1.add_outer(&gh, c);
                    add_into(&mut gm.b1, &gh);
                }
            }
        }
        for role in [Role::Positive, Role::Negative] {
            let r = role as usize;
            match self.mode {
                TransformMode::ScaleShift | TransformMode::VecShift => {
                    let scale = self.mode == TransformMode::ScaleShift;
                    let head = grads.head_mut(role);
                    if scale {
                        add_into(&mut head.alpha, &g_alpha[r]);
                    }
                    add_into(&mut head.beta, &g_beta[r]);
                    let cache = fwd.cond(role).net.as_ref().expect("net forward cache");
                    let ga = scale.then_some(&g_alpha[r][..]);
                    self.net(role).backward(cache, v, ga, &g_beta[r], self.net_grad(role, grads));
                }
                TransformMode::ConstShift => grads.head_mut(role).shift += g_shift[r],
                TransformMode::Mlp => {}
            }
        }
        Ok(())
    }
}

/// Residual outputs `(alpha_res, beta_res)` of a meta-net for image `v`.
pub fn metanet_forward(net: &MetaNet, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if v.len() != net.dim() {
        return Err(Error::dim(net.dim(), v.len()));
    }
    let c = net.forward(v);
    Ok((c.alpha_res, c.beta_res))
}

/// Transforms a single feature `c` for image `v` with the head selected by `role`.
pub fn transform(state: &ModelState, c: &[f64], v: &[f64], role: Role) -> Result<Vec<f64>> {
    state.check_dim(c.len())?;
    state.check_dim(v.len())?;
    let cond = state.condition(role, v);
    let u = state.apply_row(role, &cond, c, None);
    let n = norm(&u);
    if !(n > EPS_NORM) {
        return Err(Error::ZeroNorm { norm: n, eps: EPS_NORM });
    }
    Ok(u.into_iter().map(|x| x / n).collect())
}

/// Transformed `[pos; neg]` matrix for image `v`.
pub fn transform_bank(state: &ModelState, bank: &FeatureBank, v: &[f64]) -> Result<Mat> {
    Ok(state.forward_bank(bank, v)?.rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;

    fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        l2_normalize(&rng.gaussian_vec(d)).unwrap()
    }

    fn random_bank(rng: &mut SeededRng, n: usize, m: usize, d: usize) -> FeatureBank {
        let pos = Mat::from_vec(n, d, rng.gaussian_vec(n * d)).unwrap();
        let neg = Mat::from_vec(m, d, rng.gaussian_vec(m * d)).unwrap();
        FeatureBank::unlabeled(pos, neg).unwrap()
    }

    #[test]
    fn init_rejects_zero_sizes_and_is_deterministic() {
        assert!(matches!(init_model(0, 8, TransformMode::ScaleShift, 1), Err(Error::InvalidDim(_))));
        assert!(matches!(init_model(4, 0, TransformMode::ScaleShift, 1), Err(Error::InvalidDim(_))));
        let a = init_model(16, 8, TransformMode::ScaleShift, 42).unwrap();
        let b = init_model(16, 8, TransformMode::ScaleShift, 42).unwrap();
        let c = init_model(16, 8, TransformMode::ScaleShift, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params.pos_net.w1.as_slice().iter().any(|&x| x != 0.0));
        let bound = 1.0 / 4.0;
        assert!(a.params.pos_net.w1.as_slice().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn fresh_metanet_outputs_zero() {
        let s = init_model(8, 4, TransformMode::ScaleShift, 3).unwrap();
        let mut rng = SeededRng::new(9, 0);
        let v = unit(&mut rng, 8);
        let (a, b) = metanet_forward(&s.params.pos_net, &v).unwrap();
        assert_eq!(a, vec![0.0; 8]);
        assert_eq!(b, vec![0.0; 8]);
        assert!(matches!(metanet_forward(&s.params.pos_net, &v[..7]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn metanet_matches_hand_product() {
        // D = 2, hidden = 2; trunk is the identity and the alpha head is the identity block.
        let net = MetaNet {
            w1: Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            b1: vec![0.0, -0.5],
            w_alpha: Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            b_alpha: vec![0.1, 0.0],
            w_beta: Mat::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap(),
            b_beta: vec![0.0, 0.0],
        };
        let v = [0.6, 0.8];
        // relu([0.6, 0.3]) = [0.6, 0.3]
        let (a, b) = metanet_forward(&net, &v).unwrap();
        assert!((a[0] - 0.7).abs() < 1e-15 && (a[1] - 0.3).abs() < 1e-15);
        assert!((b[0] - 1.2).abs() < 1e-15 && (b[1] - 0.9).abs() < 1e-15);
        // Negative pre-activation is clipped.
        let (a, _) = metanet_forward(&net, &[1.0, 0.0]).unwrap();
        assert_eq!(a, vec![1.1, 0.0]);
    }

    #[test]
    fn identity_at_init_for_all_modes() {
        let mut rng = SeededRng::new(5, 0);
        for mode in TransformMode::ALL {
            let s = init_model(12, 8, mode, 11).unwrap();
            let bank = random_bank(&mut rng, 3, 4, 12);
            for _ in 0..5 {
                let v = unit(&mut rng, 12);
                let out = transform_bank(&s, &bank, &v).unwrap();
                let raw = bank.stacked();
                for (a, b) in out.as_slice().iter().zip(raw.as_slice()) {
                    assert!((a - b).abs() < 1e-12, "{mode:?}");
                }
                for role in [Role::Positive, Role::Negative] {
                    let t = transform(&s, bank.row(0), &v, role).unwrap();
                    for (a, b) in t.iter().zip(bank.row(0)) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_scale_is_removed_by_normalization() {
        let mut s = init_model(3, 8, TransformMode::ScaleShift, 1).unwrap();
        s.params.pos_head.alpha = vec![2.0; 3];
        let c = l2_normalize(&[1.0, 2.0, 2.0]).unwrap();
        let v = [1.0, 0.0, 0.0];
        let out = transform(&s, &c, &v, Role::Positive).unwrap();
        for (a, b) in out.iter().zip(&c) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_by_basis_vector() {
        let mut s = init_model(3, 8, TransformMode::ScaleShift, 1).unwrap();
        s.params.pos_head.beta = vec![1.0, 0.0, 0.0];
        let out = transform(&s, &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], Role::Positive).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] - h).abs() < 1e-15 && (out[1] - h).abs() < 1e-15 && out[2] == 0.0);
        // The negative head is untouched.
        let neg = transform(&s, &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], Role::Negative).unwrap();
        assert_eq!(neg, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn vanishing_output_is_an_error() {
        let mut s = init_model(2, 8, TransformMode::ScaleShift, 1).unwrap();
        s.params.pos_head.alpha = vec![1.0, 1.0];
        s.params.pos_head.beta = vec![-1.0, 0.0];
        let r = transform(&s, &[1.0, 0.0], &[0.0, 1.0], Role::Positive);
        assert!(matches!(r, Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn bank_matches_row_by_row_calls() {
        let mut rng = SeededRng::new(21, 0);
        for mode in TransformMode::ALL {
            let mut s = init_model(10, 8, mode, 4).unwrap();
            s.perturb(&mut rng, 0.3);
            let bank = random_bank(&mut rng, 2, 3, 10);
            let v = unit(&mut rng, 10);
            let out = transform_bank(&s, &bank, &v).unwrap();
            for i in 0..bank.n_rows() {
                let t = transform(&s, bank.row(i), &v, bank.role(i)).unwrap();
                assert_eq!(out.row(i), &t[..], "{mode:?} row {i}");
                assert!((norm(out.row(i)) - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let s = init_model(16, 8, TransformMode::ScaleShift, 1).unwrap();
        let mut rng = SeededRng::new(2, 0);
        let bank = random_bank(&mut rng, 2, 2, 32);
        let v = unit(&mut rng, 32);
        assert!(matches!(transform_bank(&s, &bank, &v), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn roles_are_independent() {
        let mut rng = SeededRng::new(8, 0);
        let bank = random_bank(&mut rng, 3, 4, 8);
        let v = unit(&mut rng, 8);
        let mut s = init_model(8, 8, TransformMode::ScaleShift, 2).unwrap();
        s.perturb(&mut rng, 0.2);
        let base = transform_bank(&s, &bank, &v).unwrap();

        let mut t = s.clone();
        t.params.neg_head.beta[0] += 0.5;
        t.params.neg_net.w_alpha.set(1, 1, 0.7);
        let out = transform_bank(&t, &bank, &v).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), base.row(i));
        }
        assert_ne!(out.row(3), base.row(3));

        let mut t = s.clone();
        t.params.pos_head.alpha[2] *= 3.0;
        t.params.pos_net.b_beta[0] += 0.3;
        let out = transform_bank(&t, &bank, &v).unwrap();
        for i in 3..7 {
            assert_eq!(out.row(i), base.row(i));
        }
    }

    #[test]
    fn shared_net_routes_negative_rows_through_positive_net() {
        let mut rng = SeededRng::new(13, 0);
        let bank = random_bank(&mut rng, 2, 2, 8);
        let v = unit(&mut rng, 8);
        let mut s = init_model(8, 8, TransformMode::ScaleShift, 2).unwrap().with_shared_net(true);
        s.perturb(&mut rng, 0.2);
        let base = transform_bank(&s, &bank, &v).unwrap();
        let mut t = s.clone();
        t.params.neg_net.w_beta.set(0, 0, 5.0);
        assert_eq!(transform_bank(&t, &bank, &v).unwrap(), base);
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = SeededRng::new(1, 0);
        let mut s = init_model(6, 8, TransformMode::Mlp, 2).unwrap();
        s.perturb(&mut rng, 1.0);
        let flat = s.params.flatten();
        assert_eq!(flat.len(), s.params.num_scalars());
        let mut z = s.params.zeros_like();
        z.assign_flat(&flat).unwrap();
        assert_eq!(z, s.params);
        assert!(z.assign_flat(&flat[1..]).is_err());
        let names: Vec<_> = s.params.views().iter().map(|(n, _, _)| *n).collect();
        let names_mut: Vec<_> = z.views_mut().iter().map(|(n, _, _)| *n).collect();
        assert_eq!(names, names_mut);
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn joint_rescale_invariance(seed in 0u64..10_000, k in 0.05f64..20.0) {
            let mut rng = SeededRng::new(seed, 0);
            let mut s = init_model(6, 8, TransformMode::ScaleShift, seed).unwrap();
            s.perturb(&mut rng, 0.5);
            // Zero the nets so (alpha, beta) are the totals.
            let z = s.params.zeros_like();
            s.params.pos_net = z.pos_net.clone();
            let c = unit(&mut rng, 6);
            let v = unit(&mut rng, 6);
            let a = transform(&s, &c, &v, Role::Positive).unwrap();
            for x in s.params.pos_head.alpha.iter_mut().chain(s.params.pos_head.beta.iter_mut()) {
                *x *= k;
            }
            let b = transform(&s, &c, &v, Role::Positive).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
