//! OOD scores, the threshold detector and ROC summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{transform_bank, FeatureBank, ModelState};
use crate::numerics::{cosine, logsumexp_unchecked, sigmoid, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Truth {
    Id,
    Ood,
}

impl Truth {
    pub fn as_str(self) -> &'static str {
        match self {
            Truth::Id => "ID",
            Truth::Ood => "OOD",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
    pub truth: Option<Truth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Mcm,
    Neglabel,
    Krnft,
}

impl std::str::FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcm" => Ok(ScoreMethod::Mcm),
            "neglabel" => Ok(ScoreMethod::Neglabel),
            "krnft" => Ok(ScoreMethod::Krnft),
            other => Err(Error::InvalidConfig(format!("unknown score method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub threshold: f64,
}

fn cos_logits(v: &[f64], rows: &Mat, tau: f64) -> Result<Vec<f64>> {
    rows.iter_rows().map(|r| Ok(cosine(v, r)? / tau)).collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(tau))
    }
}

/// Share of `exp(cos/tau)` mass on the first `n_pos` rows, as
/// `sigmoid(lse(pos) - lse(neg))`.
pub fn score_neglabel(v: &[f64], rows: &Mat, n_pos: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if n_pos == 0 {
        return Err(Error::EmptyBank);
    }
    if rows.rows() <= n_pos {
        return Err(Error::NoNegativeLabels);
    }
    if v.len() != rows.cols() {
        return Err(Error::dim(rows.cols(), v.len()));
    }
    let z = cos_logits(v, rows, tau)?;
    Ok(sigmoid(logsumexp_unchecked(&z[..n_pos]) - logsumexp_unchecked(&z[n_pos..])))
}

/// Maximum softmax probability over the ID rows.
pub fn score_mcm(v: &[f64], pos_rows: &Mat, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if pos_rows.rows() == 0 {
        return Err(Error::EmptyBank);
    }
    if v.len() != pos_rows.cols() {
        return Err(Error::dim(pos_rows.cols(), v.len()));
    }
    let z = cos_logits(v, pos_rows, tau)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((max - logsumexp_unchecked(&z)).exp())
}

/// NegLabel score on the bank transformed for this image.
pub fn score_krnft(state: &ModelState, v: &[f64], bank: &FeatureBank, tau: f64) -> Result<f64> {
    let rows = transform_bank(state, bank, v)?;
    score_neglabel(v, &rows, bank.n_pos(), tau)
}

/// Scores one image with the chosen method. `state` is required for `Krnft`.
pub fn score_with(
    method: ScoreMethod,
    state: Option<&ModelState>,
    v: &[f64],
    bank: &FeatureBank,
    tau: f64,
) -> Result<f64> {
    match method {
        ScoreMethod::Mcm => score_mcm(v, bank.pos(), tau),
        ScoreMethod::Neglabel => score_neglabel(v, &bank.stacked(), bank.n_pos(), tau),
        ScoreMethod::Krnft => {
            let s = state.ok_or_else(|| Error::InvalidConfig("krnft scoring needs a checkpoint".into()))?;
            score_krnft(s, v, bank, tau)
        }
    }
}

/// Scores every row of `images` in parallel. Output order follows input order.
pub fn score_rows(
    method: ScoreMethod,
    state: Option<&ModelState>,
    images: &Mat,
    bank: &FeatureBank,
    tau: f64,
) -> Result<Vec<f64>> {
    if method == ScoreMethod::Krnft && state.is_none() {
        return Err(Error::InvalidConfig("krnft scoring needs a checkpoint".into()));
    }
    let stacked = bank.stacked();
    (0..images.rows())
        .into_par_iter()
        .map(|i| {
            let v = images.row(i);
            match method {
                ScoreMethod::Neglabel => score_neglabel(v, &stacked, bank.n_pos(), tau),
                _ => score_with(method, state, v, bank, tau),
            }
        })
        .collect()
}

/// ID iff `score >= gamma`.
pub fn decide(score: f64, gamma: f64) -> Truth {
    if score >= gamma {
        Truth::Id
    } else {
        Truth::Ood
    }
}

fn check_scores(xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Probability that an ID score exceeds an OOD score, ties counting one half,
/// from the Mann-Whitney rank sum with mid-ranks.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores)?;
    check_scores(ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share their mean.
        let mid = (i + 1 + j) as f64 / 2.0;
        let n_id = all[i..j].iter().filter(|x| x.1).count();
        rank_sum_id += mid * n_id as f64;
        i = j;
    }
    let n1 = id_scores.len() as f64;
    let n2 = ood_scores.len() as f64;
    let u = rank_sum_id - n1 * (n1 + 1.0) / 2.0;
    Ok(u / (n1 * n2))
}

/// Smallest number of ID samples `c` with `c / n >= tpr`.
fn required_hits(n: usize, tpr: f64) -> usize {
    let mut c = ((tpr * n as f64).ceil() as usize).min(n);
    while c > 0 && (c - 1) as f64 / n as f64 >= tpr {
        c -= 1;
    }
    while c < n && (c as f64 / n as f64) < tpr {
        c += 1;
    }
    c
}

/// FPR at the largest threshold keeping TPR >= `tpr`. Scores equal to the
/// threshold count as ID. Returns `(fpr, threshold)`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<(f64, f64)> {
    check_scores(id_scores)?;
    check_scores(ood_scores)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::InvalidConfig(format!("tpr must be in (0, 1], got {tpr}")));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let k = n - required_hits(n, tpr);
    let threshold = sorted[k];
    let fp = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok((fp as f64 / ood_scores.len() as f64, threshold))
}

/// Harmonic mean `2ab / (a + b)`.
pub fn hmean(a: f64, b: f64) -> Result<f64> {
    for x in [a, b] {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::NonPositiveInput(x));
        }
    }
    Ok(2.0 * a * b / (a + b))
}

pub fn evaluate(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<MetricReport> {
    let auroc = auroc(id_scores, ood_scores)?;
    let (fpr95, threshold) = fpr_at_tpr(id_scores, ood_scores, tpr)?;
    Ok(MetricReport {
        auroc,
        fpr95,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
        threshold,
    })
}

impl MetricReport {
    /// JSON object with every real printed to four decimals.
    pub fn to_json(&self, hmean: Option<f64>) -> String {
        let mut s = format!(
            "{{\"auroc\": {:.4}, \"fpr95\": {:.4}, \"n_id\": {}, \"n_ood\": {}, \"threshold\": {:.4}",
            self.auroc, self.fpr95, self.n_id, self.n_ood, self.threshold
        );
        if let Some(h) = hmean {
            s.push_str(&format!(", \"hmean\": {h:.4}"));
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, TransformMode};
    use crate::numerics::l2_normalize;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn axis_rows(n: usize, d: usize) -> Mat {
        let mut m = Mat::zeros(n, d);
        for i in 0..n {
            m.set(i, i + 1, 1.0);
        }
        m
    }

    #[test]
    fn neglabel_symmetric_case() {
        let rows = axis_rows(4, 5);
        let v = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert!((score_neglabel(&v, &rows, 2, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(score_neglabel(&v, &rows, 4, 1.0), Err(Error::NoNegativeLabels)));
        assert!(matches!(score_neglabel(&v, &rows, 0, 1.0), Err(Error::EmptyBank)));
    }

    #[test]
    fn neglabel_matches_direct_ratio() {
        let rows = Mat::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let v = [1.0, 0.0];
        let direct = 1f64.exp() / (1f64.exp() + (-1f64).exp());
        let s = score_neglabel(&v, &rows, 1, 1.0).unwrap();
        assert!((s - direct).abs() < 1e-15);
        assert!((s - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn neglabel_increases_with_positive_cosine() {
        let v = [1.0, 0.0, 0.0];
        let low = Mat::from_vec(2, 3, vec![0.2, 0.9, 0.0, 0.1, 0.0, 1.0]).unwrap();
        let high = Mat::from_vec(2, 3, vec![0.6, 0.7, 0.0, 0.1, 0.0, 1.0]).unwrap();
        assert!(score_neglabel(&v, &high, 1, 1.0).unwrap() > score_neglabel(&v, &low, 1, 1.0).unwrap());
    }

    #[test]
    fn mcm_cases() {
        let v = [1.0, 0.0, 0.0];
        assert_eq!(score_mcm(&v, &axis_rows(1, 3), 0.01).unwrap(), 1.0);
        assert!((score_mcm(&v, &axis_rows(2, 3), 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(score_mcm(&v, &Mat::zeros(0, 3), 1.0), Err(Error::EmptyBank)));

        let mut rng = SeededRng::new(3, 0);
        let rows = Mat::from_vec(5, 6, rng.gaussian_vec(30)).unwrap();
        let v = l2_normalize(&rng.gaussian_vec(6)).unwrap();
        let tau = 0.2;
        let e: Vec<f64> = rows.iter_rows().map(|r| (cosine(&v, r).unwrap() / tau).exp()).collect();
        let total: f64 = e.iter().sum();
        let naive = e.iter().map(|x| x / total).fold(0.0, f64::max);
        assert!((score_mcm(&v, &rows, tau).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn krnft_at_init_equals_neglabel() {
        let mut rng = SeededRng::new(5, 0);
        let bank = FeatureBank::unlabeled(
            Mat::from_vec(3, 8, rng.gaussian_vec(24)).unwrap(),
            Mat::from_vec(5, 8, rng.gaussian_vec(40)).unwrap(),
        )
        .unwrap();
        let s = init_model(8, 8, TransformMode::ScaleShift, 0).unwrap();
        for _ in 0..10 {
            let v = l2_normalize(&rng.gaussian_vec(8)).unwrap();
            let a = score_krnft(&s, &v, &bank, 1.0).unwrap();
            let b = score_neglabel(&v, &bank.stacked(), 3, 1.0).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
        let wrong = init_model(4, 8, TransformMode::ScaleShift, 0).unwrap();
        let v = l2_normalize(&rng.gaussian_vec(8)).unwrap();
        assert!(matches!(score_krnft(&wrong, &v, &bank, 1.0), Err(Error::DimMismatch { .. })));
        assert!(score_with(ScoreMethod::Krnft, None, &v, &bank, 1.0).is_err());
    }

    #[test]
    fn batch_scores_keep_input_order() {
        let mut rng = SeededRng::new(6, 0);
        let bank = FeatureBank::unlabeled(
            Mat::from_vec(3, 8, rng.gaussian_vec(24)).unwrap(),
            Mat::from_vec(5, 8, rng.gaussian_vec(40)).unwrap(),
        )
        .unwrap();
        let mut s = init_model(8, 4, TransformMode::ScaleShift, 0).unwrap();
        s.perturb(&mut rng, 0.2);
        let images = Mat::from_vec(40, 8, rng.gaussian_vec(320)).unwrap();
        for method in [ScoreMethod::Mcm, ScoreMethod::Neglabel, ScoreMethod::Krnft] {
            let got = score_rows(method, Some(&s), &images, &bank, 0.5).unwrap();
            for (i, g) in got.iter().enumerate() {
                let want = score_with(method, Some(&s), images.row(i), &bank, 0.5).unwrap();
                assert_eq!(*g, want);
            }
        }
        assert!(score_rows(ScoreMethod::Krnft, None, &images, &bank, 0.5).is_err());
    }

    #[test]
    fn decide_is_inclusive() {
        assert_eq!(decide(0.9, 0.5), Truth::Id);
        assert_eq!(decide(0.5, 0.5), Truth::Id);
        assert_eq!(decide(0.1, 0.5), Truth::Ood);
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.2], &[0.9, 0.8]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 3], &[0.5; 4]).unwrap(), 0.5);
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::EmptyInput)));
    }

    #[test]
    fn fpr_cases() {
        assert_eq!(fpr_at_tpr(&[1.0; 20], &[0.0; 20], 0.95).unwrap(), (0.0, 1.0));
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let (fpr, thr) = fpr_at_tpr(&xs, &xs, 0.95).unwrap();
        assert_eq!(thr, 1.0);
        assert!(fpr >= 0.95 - 1.0 / 20.0);
        assert!(fpr_at_tpr(&xs, &xs, 0.0).is_err());
        assert!(fpr_at_tpr(&xs, &[], 0.95).is_err());
        assert_eq!(required_hits(10, 0.9), 9);
        assert_eq!(required_hits(20, 0.95), 19);
        assert_eq!(required_hits(7, 1.0), 7);
    }

    #[test]
    fn hmean_cases() {
        assert!((hmean(22.79, 11.41).unwrap() - 15.21).abs() <= 0.01);
        // 2ab/(a+b) worked by hand: 617.22 / 37.55.
        assert!((hmean(25.40, 12.15).unwrap() - 16.437_283_6).abs() < 1e-6);
        assert!((hmean(3.5, 3.5).unwrap() - 3.5).abs() < 1e-15);
        assert!(matches!(hmean(0.0, 1.0), Err(Error::NonPositiveInput(_))));
        assert!(matches!(hmean(1.0, -2.0), Err(Error::NonPositiveInput(_))));
    }

    #[test]
    fn json_has_fixed_precision() {
        let r = MetricReport { auroc: 1.0, fpr95: 0.05, n_id: 3, n_ood: 4, threshold: 0.123456 };
        assert_eq!(
            r.to_json(Some(15.2066)),
            "{\"auroc\": 1.0000, \"fpr95\": 0.0500, \"n_id\": 3, \"n_ood\": 4, \"threshold\": 0.1235, \"hmean\": 15.2066}\n"
        );
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0u8..20).prop_map(|x| x as f64 / 4.0), 1..40)
    }

    proptest! {
        #[test]
        fn auroc_antisymmetry(a in scores(), b in scores()) {
            let s = auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn metrics_are_rank_invariant(a in scores(), b in scores()) {
            let f = |x: &f64| (3.0 * x).exp() - 7.0;
            let a2: Vec<f64> = a.iter().map(f).collect();
            let b2: Vec<f64> = b.iter().map(f).collect();
            prop_assert_eq!(auroc(&a, &b).unwrap(), auroc(&a2, &b2).unwrap());
            prop_assert_eq!(fpr_at_tpr(&a, &b, 0.95).unwrap().0, fpr_at_tpr(&a2, &b2, 0.95).unwrap().0);
        }

        #[test]
        fn neglabel_shift_invariance(seed in 0u64..1000, shift in -3.0f64..3.0) {
            // A common shift of all logits is a common scaling of exp masses.
            let mut rng = SeededRng::new(seed, 0);
            let rows = Mat::from_vec(6, 5, rng.gaussian_vec(30)).unwrap();
            let v = l2_normalize(&rng.gaussian_vec(5)).unwrap();
            let z = cos_logits(&v, &rows, 0.5).unwrap();
            let base = sigmoid(logsumexp_unchecked(&z[..2]) - logsumexp_unchecked(&z[2..]));
            let zs: Vec<f64> = z.iter().map(|x| x + shift).collect();
            let moved = sigmoid(logsumexp_unchecked(&zs[..2]) - logsumexp_unchecked(&zs[2..]));
            prop_assert!((base - moved).abs() < 1e-10);
            prop_assert!((base - score_neglabel(&v, &rows, 2, 0.5).unwrap()).abs() < 1e-15);
        }
    }
}
