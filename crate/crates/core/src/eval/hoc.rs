use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decorre::CorrelationRecord;
use crate::error::{Error, Result};

/// Records of one training condition, e.g. `("biased", records)`.
pub type HocInput = (String, Vec<CorrelationRecord>);

/// Histogram of Correlations for one DecorreLayer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HocData {
    pub layer_id: usize,
    /// `bins + 1` edges spanning `[-1, 1]`.
    pub bin_edges: Vec<f64>,
    /// Per condition, bin counts divided by that condition's total number of
    /// values at this layer.
    pub normalized_counts: Vec<(String, Vec<f64>)>,
}

fn bin_of(v: f64, bins: usize) -> usize {
    let pos = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize;
    pos.min(bins - 1)
}

/// Per-layer histograms over `[-1, 1]` (last bin closed), one normalized
/// count vector per condition. With `epoch = Some(e)` only records of that
/// epoch are used; otherwise every snapshot is pooled.
pub fn histogram_of_correlations(conditions: &[HocInput], bins: usize, epoch: Option<usize>) -> Result<Vec<HocData>> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 bins, got {bins}")));
    }
    let selected = |r: &&CorrelationRecord| epoch.is_none_or(|e| r.epoch == e) && !r.correlations.is_empty();
    let layers: BTreeSet<usize> = conditions
        .iter()
        .flat_map(|(_, recs)| recs.iter().filter(selected).map(|r| r.layer_id))
        .collect();
    if layers.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let edges: Vec<f64> = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
    Ok(layers
        .into_iter()
        .map(|layer_id| {
            let normalized_counts = conditions
                .iter()
                .filter_map(|(name, recs)| {
                    let mut counts = vec![0u64; bins];
                    let mut total = 0u64;
                    for r in recs.iter().filter(selected).filter(|r| r.layer_id == layer_id) {
                        for &v in &r.correlations {
                            counts[bin_of(v, bins)] += 1;
                            total += 1;
                        }
                    }
                    (total > 0).then(|| (name.clone(), counts.iter().map(|&c| c as f64 / total as f64).collect()))
                })
                .collect();
            HocData {
                layer_id,
                bin_edges: edges.clone(),
                normalized_counts,
            }
        })
        .collect())
}

/// `layer_id,bin_left,bin_right,condition,normalized_count`, grouped by layer
/// then condition.
pub fn hoc_to_csv(data: &[HocData]) -> String {
    let mut out = String::from("layer_id,bin_left,bin_right,condition,normalized_count\n");
    for h in data {
        for (cond, counts) in &h.normalized_counts {
            for (i, c) in counts.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    h.layer_id,
                    h.bin_edges[i],
                    h.bin_edges[i + 1],
                    cond,
                    c
                );
            }
        }
    }
    out
}
