use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::train::{EvalReport, TestSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: String,
    pub test_set: TestSet,
    pub mean_auc: f64,
    /// Sample standard deviation over folds (0 for a single fold).
    pub std_auc: f64,
    pub folds: usize,
}

/// Table of mean AUC +- std per (training condition, test set).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

/// One row per report and test set, using the checkpoint AUCs of the folds
/// that did not diverge. Reports without any usable fold are skipped.
pub fn summarize(reports: &[EvalReport]) -> SummaryTable {
    let mut rows = Vec::new();
    for r in reports {
        for set in TestSet::ALL {
            let values: Vec<f64> = r
                .folds
                .iter()
                .filter_map(|f| f.checkpoint.map(|a| a.get(set)))
                .collect();
            if let Some((mean, std)) = mean_std(&values) {
                rows.push(SummaryRow {
                    condition: r.condition.clone(),
                    test_set: set,
                    mean_auc: mean,
                    std_auc: std,
                    folds: values.len(),
                });
            }
        }
    }
    SummaryTable { rows }
}

pub(crate) fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,test_set,mean_auc,std_auc,folds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.condition,
                r.test_set.as_str(),
                r.mean_auc,
                r.std_auc,
                r.folds
            );
        }
        out
    }

    pub fn get(&self, condition: &str, set: TestSet) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.condition == condition && r.test_set == set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basic() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[0.7]), Some((0.7, 0.0)));
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
