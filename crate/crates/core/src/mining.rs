//! Negative-label mining and outlier selection from crop features.
//!
//! All selections break ties by ascending original index.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, Mat};
use crate::trainer::TrainingSet;

/// Candidate negative labels as features with unique names.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateLexicon {
    pub features: Mat,
    pub names: Vec<String>,
}

impl CandidateLexicon {
    pub fn new(features: Mat, names: Vec<String>) -> Result<Self> {
        if names.len() != features.rows() {
            return Err(Error::InvalidReference(format!(
                "{} names for {} lexicon rows",
                names.len(),
                features.rows()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidReference(format!("duplicate lexicon name `{n}`")));
            }
        }
        Ok(CandidateLexicon {
            features: crate::model::normalize_rows(features)?,
            names,
        })
    }
}

/// Similarity statistic of a candidate against all ID features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningStat {
    Max,
    /// Linear-interpolated quantile, `q` in [0, 1].
    Quantile(f64),
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Statistic per lexicon row.
pub fn candidate_stats(lexicon: &CandidateLexicon, id_bank_pos: &Mat, stat: MiningStat) -> Result<Vec<f64>> {
    if lexicon.features.cols() != id_bank_pos.cols() {
        return Err(Error::dim(id_bank_pos.cols(), lexicon.features.cols()));
    }
    if id_bank_pos.rows() == 0 {
        return Err(Error::EmptyBank);
    }
    if let MiningStat::Quantile(q) = stat {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidConfig(format!("quantile must be in [0, 1], got {q}")));
        }
    }
    lexicon
        .features
        .iter_rows()
        .map(|cand| {
            let mut sims = id_bank_pos
                .iter_rows()
                .map(|id| cosine(cand, id))
                .collect::<Result<Vec<f64>>>()?;
            Ok(match stat {
                MiningStat::Max => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                MiningStat::Quantile(q) => {
                    sims.sort_by(|a, b| a.total_cmp(b));
                    quantile_sorted(&sims, q)
                }
            })
        })
        .collect()
}

/// Indices of the `m` candidates least similar to the ID labels.
pub fn mine_negative_labels(
    lexicon: &CandidateLexicon,
    id_bank_pos: &Mat,
    m: usize,
    stat: MiningStat,
) -> Result<Vec<usize>> {
    if m > lexicon.features.rows() {
        return Err(Error::TooFewCandidates {
            requested: m,
            available: lexicon.features.rows(),
        });
    }
    let stats = candidate_stats(lexicon, id_bank_pos, stat)?;
    let mut idx: Vec<usize> = (0..stats.len()).collect();
    idx.sort_by(|&a, &b| stats[a].total_cmp(&stats[b]).then(a.cmp(&b)));
    idx.truncate(m);
    Ok(idx)
}

/// Crop (or local) features of one training image.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSet {
    pub parent: String,
    pub label: usize,
    pub features: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub top_indices: Vec<usize>,
    pub bottom_indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

/// `q` crops most similar to the label feature and `q` least similar, disjoint.
pub fn select_outliers(crops: &CropSet, label_feature: &[f64], q: usize) -> Result<SelectionResult> {
    let p = crops.features.rows();
    if 2 * q > p {
        return Err(Error::QTooLarge { q, rows: p });
    }
    if label_feature.len() != crops.features.cols() {
        return Err(Error::dim(crops.features.cols(), label_feature.len()));
    }
    let sims = crops
        .features
        .iter_rows()
        .map(|r| cosine(r, label_feature))
        .collect::<Result<Vec<f64>>>()?;
    let by = |desc: bool| {
        let sims = &sims;
        move |&a: &usize, &b: &usize| -> Ordering {
            let o = sims[a].total_cmp(&sims[b]);
            (if desc { o.reverse() } else { o }).then(a.cmp(&b))
        }
    };
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(by(true));
    let top: Vec<usize> = order[..q].to_vec();
    let taken: HashSet<usize> = top.iter().copied().collect();
    let mut rest: Vec<usize> = (0..p).filter(|i| !taken.contains(i)).collect();
    rest.sort_by(by(false));
    rest.truncate(q);
    Ok(SelectionResult {
        top_indices: top,
        bottom_indices: rest,
        similarities: sims,
    })
}

/// Top crops become positives with their parent's label; bottom crops become outliers.
/// `selections[k]` must refer to `crop_sets[k]`.
pub fn build_training_set(selections: &[SelectionResult], crop_sets: &[CropSet]) -> Result<TrainingSet> {
    if selections.len() != crop_sets.len() {
        return Err(Error::InvalidReference(format!(
            "{} selections for {} crop sets",
            selections.len(),
            crop_sets.len()
        )));
    }
    let mut out = TrainingSet::default();
    for (sel, crops) in selections.iter().zip(crop_sets) {
        let p = crops.features.rows();
        for &i in sel.top_indices.iter().chain(&sel.bottom_indices) {
            if i >= p {
                return Err(Error::InvalidReference(format!(
                    "crop index {i} out of range for `{}` ({p} crops)",
                    crops.parent
                )));
            }
        }
        out.pos
            .extend(sel.top_indices.iter().map(|&i| (crops.features.row(i).to_vec(), crops.label)));
        out.neg.extend(sel.bottom_indices.iter().map(|&i| crops.features.row(i).to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;
    use crate::rng::SeededRng;

    fn lex(rows: Vec<Vec<f64>>) -> CandidateLexicon {
        let d = rows[0].len();
        let names = (0..rows.len()).map(|i| format!("w{i}")).collect();
        CandidateLexicon::new(Mat::from_rows(&rows, d).unwrap(), names).unwrap()
    }

    #[test]
    fn exact_match_is_excluded() {
        let id = Mat::from_rows(&[vec![1.0, 0.0, 0.0]], 3).unwrap();
        let l = lex(vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(mine_negative_labels(&l, &id, 2, MiningStat::Max).unwrap(), vec![0, 2]);
    }

    #[test]
    fn ties_break_by_index() {
        let id = Mat::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]], 4).unwrap();
        let l = lex(vec![
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, -1.0, 0.0, 0.0],
        ]);
        assert_eq!(mine_negative_labels(&l, &id, 3, MiningStat::Max).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            mine_negative_labels(&l, &id, 5, MiningStat::Max),
            Err(Error::TooFewCandidates { requested: 5, available: 4 })
        ));
    }

    #[test]
    fn quantile_statistic() {
        let id = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], 2).unwrap();
        let l = lex(vec![vec![1.0, 0.0]]);
        // Cosines {1, 0, -1}: median 0, max 1, 0.25-quantile -0.5.
        let s = |q| candidate_stats(&l, &id, MiningStat::Quantile(q)).unwrap()[0];
        assert_eq!(s(0.5), 0.0);
        assert_eq!(s(1.0), 1.0);
        assert_eq!(s(0.25), -0.5);
        assert!(candidate_stats(&l, &id, MiningStat::Quantile(1.5)).is_err());
    }

    #[test]
    fn mining_matches_sort_oracle() {
        let mut rng = SeededRng::new(11, 0);
        let d = 8;
        let rows: Vec<Vec<f64>> = (0..50).map(|_| rng.gaussian_vec(d)).collect();
        let l = lex(rows);
        let id = Mat::from_vec(4, d, rng.gaussian_vec(4 * d)).unwrap();
        let got = mine_negative_labels(&l, &id, 10, MiningStat::Max).unwrap();
        // Brute force: stable sort on the max cosine, computed directly.
        let mut scored: Vec<(f64, usize)> = (0..50)
            .map(|i| {
                let c = l.features.row(i);
                let mut best = f64::NEG_INFINITY;
                for r in id.iter_rows() {
                    let dot: f64 = c.iter().zip(r).map(|(a, b)| a * b).sum();
                    let n: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    best = best.max(dot / n);
                }
                (best, i)
            })
            .collect();
        scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<usize> = scored[..10].iter().map(|x| x.1).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn lexicon_names_must_be_unique() {
        let m = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        assert!(CandidateLexicon::new(m.clone(), vec!["a".into(), "a".into()]).is_err());
        assert!(CandidateLexicon::new(m, vec!["a".into()]).is_err());
    }

    fn crop_set(rows: Vec<Vec<f64>>) -> CropSet {
        let d = rows[0].len();
        CropSet {
            parent: "img0".into(),
            label: 1,
            features: Mat::from_rows(&rows, d).unwrap(),
        }
    }

    #[test]
    fn extremes_are_selected() {
        let c = crop_set(vec![
            vec![0.0, 1.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let r = select_outliers(&c, &[1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(r.top_indices, vec![2]);
        assert_eq!(r.bottom_indices, vec![1]);
        assert_eq!(r.similarities, vec![0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn identical_crops_stay_disjoint() {
        let c = crop_set(vec![vec![0.6, 0.8]; 4]);
        let r = select_outliers(&c, &[1.0, 0.0], 2).unwrap();
        assert_eq!(r.top_indices, vec![0, 1]);
        assert_eq!(r.bottom_indices, vec![2, 3]);
        assert!(matches!(select_outliers(&c, &[1.0, 0.0], 3), Err(Error::QTooLarge { q: 3, rows: 4 })));
    }

    #[test]
    fn training_set_counts() {
        let c = crop_set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = select_outliers(&c, &[1.0, 0.0], 1).unwrap();
        let t = build_training_set(&[r.clone()], &[c.clone()]).unwrap();
        assert_eq!(t.pos, vec![(vec![1.0, 0.0], 1)]);
        assert_eq!(t.neg, vec![vec![0.0, 1.0]]);

        // S = 4 shots, N = 2 classes, Q = 2 -> K·Q = 16 positives.
        let mut rng = SeededRng::new(2, 0);
        let mut sets = Vec::new();
        let mut sels = Vec::new();
        for k in 0..8 {
            let rows: Vec<Vec<f64>> = (0..6).map(|_| l2_normalize(&rng.gaussian_vec(4)).unwrap()).collect();
            let cs = CropSet { parent: format!("s{k}"), label: k % 2, features: Mat::from_rows(&rows, 4).unwrap() };
            let label = l2_normalize(&rng.gaussian_vec(4)).unwrap();
            sels.push(select_outliers(&cs, &label, 2).unwrap());
            sets.push(cs);
        }
        let t = build_training_set(&sels, &sets).unwrap();
        assert_eq!(t.pos.len(), 16);
        assert_eq!(t.neg.len(), 16);

        let mut broken = r;
        broken.top_indices = vec![7];
        assert!(matches!(build_training_set(&[broken], &[c.clone()]), Err(Error::InvalidReference(_))));
        assert!(build_training_set(&[], &[c]).is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn selection_separates_and_is_disjoint(seed in 0u64..5000, q in 1usize..5) {
            let mut rng = SeededRng::new(seed, 0);
            let p = 2 * q + (seed % 5) as usize;
            let rows: Vec<Vec<f64>> = (0..p).map(|_| l2_normalize(&rng.gaussian_vec(5)).unwrap()).collect();
            let c = CropSet { parent: "x".into(), label: 0, features: Mat::from_rows(&rows, 5).unwrap() };
            let label = l2_normalize(&rng.gaussian_vec(5)).unwrap();
            let r = select_outliers(&c, &label, q).unwrap();
            let top: HashSet<_> = r.top_indices.iter().collect();
            prop_assert!(r.bottom_indices.iter().all(|i| !top.contains(i)));
            let min_top = r.top_indices.iter().map(|&i| r.similarities[i]).fold(f64::INFINITY, f64::min);
            let max_bot = r.bottom_indices.iter().map(|&i| r.similarities[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_top >= max_bot);
        }

        #[test]
        fn mining_is_permutation_invariant(seed in 0u64..2000) {
            let mut rng = SeededRng::new(seed, 0);
            let rows: Vec<Vec<f64>> = (0..12).map(|_| rng.gaussian_vec(4)).collect();
            let names: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
            let id = Mat::from_vec(2, 4, rng.gaussian_vec(8)).unwrap();
            let a = CandidateLexicon::new(Mat::from_rows(&rows, 4).unwrap(), names.clone()).unwrap();
            let mut perm: Vec<usize> = (0..12).collect();
            rng.shuffle(&mut perm);
            let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let pname: Vec<String> = perm.iter().map(|&i| names[i].clone()).collect();
            let b = CandidateLexicon::new(Mat::from_rows(&prow, 4).unwrap(), pname).unwrap();
            let mut na: Vec<String> = mine_negative_labels(&a, &id, 5, MiningStat::Max).unwrap().into_iter().map(|i| a.names[i].clone()).collect();
            let mut nb: Vec<String> = mine_negative_labels(&b, &id, 5, MiningStat::Max).unwrap().into_iter().map(|i| b.names[i].clone()).collect();
            na.sort();
            nb.sort();
            prop_assert_eq!(na, nb);
        }
    }
}
