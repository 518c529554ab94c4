use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U / (n_pos n_neg)).
///
/// Pairs are counted exactly in integers over score groups after an
/// `O(N log N)` sort; NaN scores sort above everything.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidConfig("labels must be 0 or 1".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    // -0.0 and 0.0 must tie
    let keys: Vec<f64> = scores.iter().map(|&s| if s == 0.0 { 0.0 } else { s }).collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));

    // twice_u = sum over positives of (2 * negatives below + negatives tied)
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && keys[order[j]].total_cmp(&keys[order[i]]).is_eq() {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}
