use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{top_k, Explanation, XaiError};

/// Pairwise agreement between explanations of the same image and class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub methods: Vec<String>,
    pub k: usize,
    pub target_class: usize,
    /// Top-k segment sets per explanation.
    pub top_k: Vec<Vec<usize>>,
    pub jaccard: Vec<Vec<f64>>,
    /// Spearman correlation of `|score|` over all segments.
    pub rank_correlation: Vec<Vec<f64>>,
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets agree fully.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn compare_explanations(explanations: &[Explanation], k: usize) -> Result<AgreementReport, XaiError> {
    let [first, rest @ ..] = explanations else {
        return Err(XaiError::Invalid("nothing to compare".into()));
    };
    if rest.is_empty() {
        return Err(XaiError::Invalid("comparison needs at least two explanations".into()));
    }
    for e in rest {
        if e.mask != first.mask {
            return Err(XaiError::Mismatch(format!("masks {:?} and {:?} differ", first.mask, e.mask)));
        }
        if e.target_class != first.target_class {
            return Err(XaiError::Mismatch(format!(
                "target classes {} and {} differ",
                first.target_class, e.target_class
            )));
        }
    }
    if explanations.iter().any(|e| e.segment_scores.len() != first.mask.segments) {
        return Err(XaiError::Mismatch("segment score count does not match the mask".into()));
    }
    if k == 0 || k > first.mask.segments {
        return Err(XaiError::Invalid(format!("k = {k} must be in 1..={}", first.mask.segments)));
    }
    let tops: Vec<Vec<usize>> = explanations.iter().map(|e| top_k(&e.segment_scores, k)).collect();
    let mags: Vec<Vec<f64>> = explanations
        .iter()
        .map(|e| e.segment_scores.iter().map(|s| s.abs()).collect())
        .collect();
    let n = explanations.len();
    let mut jac = vec![vec![1.0; n]; n];
    let mut rho = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            jac[i][j] = jaccard(&tops[i], &tops[j]);
            jac[j][i] = jac[i][j];
            rho[i][j] = spearman(&mags[i], &mags[j]);
            rho[j][i] = rho[i][j];
        }
    }
    Ok(AgreementReport {
        methods: explanations.iter().map(|e| e.method.to_string()).collect(),
        k,
        target_class: first.target_class,
        top_k: tops,
        jaccard: jac,
        rank_correlation: rho,
    })
}
