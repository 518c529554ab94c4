use crate::error::{Error, Result};
use crate::rng::Rng;

/// Shuffled partition of `0..n` into `k` folds whose sizes differ by at most
/// one (the first `n % k` folds get the extra index). Indices within a fold
/// are sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::InvalidConfig(format!("cannot split {n} samples into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}
