//! Learnable feature transforms over a bank of pre-trained text features.
//!
//! A bank holds `N` positive (ID label) rows followed by `M` negative-label rows.
//! For an image feature `v`, each row `c` is mapped to
//! `L2((alpha + a(v)) ⊙ c + beta + b(v))`, where `(alpha, beta)` is a learned
//! head and `(a, b)` is the output of a small meta-network on `v`. Positive and
//! negative rows use separate heads and nets.

mod checkpoint;
mod state;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Mat};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, MAGIC};
pub use state::{
    default_hidden, init_model, metanet_forward, transform, transform_bank, BankForward,
    Decay, GradientSet, MetaNet, ModelState, Params, ResidualMlp, TransformHead,
};

/// Which instantiation of the transform `T(c)` is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformMode {
    /// `L2(c + s·1)` with a learned scalar `s`.
    ConstShift,
    /// `L2(c + beta + b(v))`.
    VecShift,
    /// `L2((alpha + a(v)) ⊙ c + beta + b(v))`.
    ScaleShift,
    /// `L2(c + W2·relu(W1·c + b1) + b2)`.
    Mlp,
}

impl TransformMode {
    pub const ALL: [TransformMode; 4] = [
        TransformMode::ConstShift,
        TransformMode::VecShift,
        TransformMode::ScaleShift,
        TransformMode::Mlp,
    ];

    pub(crate) fn tag(self) -> u8 {
        match self {
            TransformMode::ConstShift => 0,
            TransformMode::VecShift => 1,
            TransformMode::ScaleShift => 2,
            TransformMode::Mlp => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl std::str::FromStr for TransformMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "const-shift" => Ok(TransformMode::ConstShift),
            "vec-shift" => Ok(TransformMode::VecShift),
            "scale-shift" => Ok(TransformMode::ScaleShift),
            "mlp" => Ok(TransformMode::Mlp),
            other => Err(Error::InvalidConfig(format!("unknown transform mode `{other}`"))),
        }
    }
}

/// Whether a bank row is an ID label or a negative label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Positive,
    Negative,
}

/// Immutable set of unit-norm text features: `N` positive rows, then `M` negative rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pos: Mat,
    neg: Mat,
    labels: Vec<String>,
}

impl FeatureBank {
    /// Rows are re-normalized on ingest. `labels` names the positive rows
    /// first, then the negative rows, and must be unique.
    pub fn new(pos: Mat, neg: Mat, labels: Vec<String>) -> Result<Self> {
        if pos.rows() == 0 {
            return Err(Error::EmptyBank);
        }
        if pos.cols() == 0 {
            return Err(Error::InvalidDim("feature dimension must be at least 1".into()));
        }
        if neg.cols() != pos.cols() {
            return Err(Error::dim(pos.cols(), neg.cols()));
        }
        if labels.len() != pos.rows() + neg.rows() {
            return Err(Error::InvalidReference(format!(
                "{} labels for {} rows",
                labels.len(),
                pos.rows() + neg.rows()
            )));
        }
        let mut seen = HashSet::with_capacity(labels.len());
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidReference(format!("duplicate label id `{l}`")));
            }
        }
        Ok(FeatureBank {
            pos: normalize_rows(pos)?,
            neg: normalize_rows(neg)?,
            labels,
        })
    }

    /// Bank with generated identifiers `pos{i}` / `neg{j}`.
    pub fn unlabeled(pos: Mat, neg: Mat) -> Result<Self> {
        let labels = (0..pos.rows())
            .map(|i| format!("pos{i}"))
            .chain((0..neg.rows()).map(|j| format!("neg{j}")))
            .collect();
        FeatureBank::new(pos, neg, labels)
    }

    pub fn dim(&self) -> usize {
        self.pos.cols()
    }

    pub fn n_pos(&self) -> usize {
        self.pos.rows()
    }

    pub fn n_neg(&self) -> usize {
        self.neg.rows()
    }

    pub fn n_rows(&self) -> usize {
        self.n_pos() + self.n_neg()
    }

    pub fn pos(&self) -> &Mat {
        &self.pos
    }

    pub fn neg(&self) -> &Mat {
        &self.neg
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Row `i` of the stacked `[pos; neg]` matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        if i < self.n_pos() {
            self.pos.row(i)
        } else {
            self.neg.row(i - self.n_pos())
        }
    }

    pub fn role(&self, i: usize) -> Role {
        if i < self.n_pos() {
            Role::Positive
        } else {
            Role::Negative
        }
    }

    /// The stacked `[pos; neg]` matrix.
    pub fn stacked(&self) -> Mat {
        self.pos.vstack(&self.neg).expect("bank halves share a dimension")
    }
}

pub(crate) fn normalize_rows(mut m: Mat) -> Result<Mat> {
    for i in 0..m.rows() {
        let r = l2_normalize(m.row(i))?;
        m.row_mut(i).copy_from_slice(&r);
    }
    Ok(m)
}
