//! DecorreLayer: per-feature ROI/control-region dependence estimation
//! (Correlation Unit) and suppression of dependent ROI features (Filter Unit).
//!
//! In the forward pass each ROI feature is compared with its control-region
//! counterpart over the batch dimension using the Pearson correlation
//! coefficient. Spatial feature maps are first reduced to one value per
//! channel by global average pooling, so the estimate does not depend on where
//! in the map a pattern appears. The Filter Unit then scales or drops ROI
//! features according to that estimate. The backward pass treats the layer as
//! the identity, and at inference the layer is inactive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::global_avg_pool;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterMode {
    /// Multiply by `constant` when the correlation reaches `threshold`.
    Factor { threshold: f64, constant: f64 },
    /// `(1 - minimum) / (1 + exp(steepness (d - middle))) + minimum`.
    Sigmoid { middle: f64, minimum: f64, steepness: f64 },
    /// Bernoulli keep mask with keep probability falling linearly from 1 at
    /// `d = 0` to 0 at `d = guarantee`.
    Dropout { guarantee: f64 },
}

/// What the layer does to the control-region stream it forwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrPolicy {
    /// Forward the control-region features untouched.
    #[default]
    Unfiltered,
    /// Apply the ROI filter decision to the control-region features as well.
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecorreConfig {
    pub mode: FilterMode,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub cr_policy: CrPolicy,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl Default for DecorreConfig {
    fn default() -> Self {
        Self::dropout(0.3)
    }
}

impl DecorreConfig {
    pub fn factor(threshold: f64, constant: f64) -> Self {
        Self::with_mode(FilterMode::Factor { threshold, constant })
    }

    pub fn sigmoid(middle: f64, minimum: f64, steepness: f64) -> Self {
        Self::with_mode(FilterMode::Sigmoid {
            middle,
            minimum,
            steepness,
        })
    }

    pub fn dropout(guarantee: f64) -> Self {
        Self::with_mode(FilterMode::Dropout { guarantee })
    }

    fn with_mode(mode: FilterMode) -> Self {
        Self {
            mode,
            eps: DEFAULT_EPS,
            cr_policy: CrPolicy::Unfiltered,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        match self.mode {
            FilterMode::Factor { threshold, constant } => {
                if !threshold.is_finite() {
                    return bad("factor threshold must be finite");
                }
                if !(0.0..=1.0).contains(&constant) {
                    return bad("factor constant must lie in [0, 1]");
                }
            }
            FilterMode::Sigmoid {
                middle,
                minimum,
                steepness,
            } => {
                if !middle.is_finite() {
                    return bad("sigmoid middle must be finite");
                }
                if !(0.0..=1.0).contains(&minimum) {
                    return bad("sigmoid minimum must lie in [0, 1]");
                }
                if !(steepness > 0.0) || !steepness.is_finite() {
                    return bad("sigmoid steepness must be positive");
                }
            }
            FilterMode::Dropout { guarantee } => {
                if !(guarantee > 0.0) || !guarantee.is_finite() {
                    return bad("dropout guarantee point must be positive");
                }
            }
        }
        Ok(())
    }
}

/// Correlation Unit output for one layer at one point of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub layer_id: usize,
    pub epoch: usize,
    /// One entry per feature: per channel for spatial inputs, per scalar for
    /// flat inputs. Records pooled over several batches simply concatenate.
    pub correlations: Vec<f64>,
}

impl CorrelationRecord {
    pub fn new(layer_id: usize, epoch: usize, correlations: Vec<f64>) -> Self {
        Self {
            layer_id,
            epoch,
            correlations,
        }
    }

    pub fn empty(layer_id: usize) -> Self {
        Self::new(layer_id, 0, Vec::new())
    }

    pub fn is_empty(&self) -> bool {
        self.correlations.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.correlations.is_empty()).then(|| self.correlations.iter().sum::<f64>() / self.correlations.len() as f64)
    }
}

/// Sample Pearson correlation. Returns exactly 0 when either sample variance
/// is below `eps`.
pub fn pearson_corr(x: &[f64], y: &[f64], eps: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "pearson_corr over {} and {} values",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx / (nf - 1.0) < eps || syy / (nf - 1.0) < eps {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-feature values laid out as `[feature][sample]`.
fn feature_columns(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let flat = match t.ndim() {
        2 => t.clone(),
        4 => global_avg_pool(t)?,
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "DecorreLayer expects [B, F] or [B, C, H, W] features, got {:?}",
                t.shape()
            )))
        }
    };
    let (b, f) = (flat.dim(0), flat.dim(1));
    let d = flat.data();
    Ok((0..f).map(|j| (0..b).map(|i| d[i * f + j] as f64).collect()).collect())
}

/// One correlation per feature between the ROI and control-region streams.
pub fn correlation_unit(roi: &Tensor, cr: &Tensor, cfg: &DecorreConfig) -> Result<CorrelationRecord> {
    if roi.shape() != cr.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ROI features {:?} vs control-region features {:?}",
            roi.shape(),
            cr.shape()
        )));
    }
    if roi.dim(0) < 2 {
        return Err(Error::BatchTooSmall(roi.dim(0)));
    }
    let roi_cols = feature_columns(roi)?;
    let cr_cols = feature_columns(cr)?;
    let correlations = roi_cols
        .iter()
        .zip(&cr_cols)
        .map(|(a, b)| pearson_corr(a, b, cfg.eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrelationRecord::new(0, 0, correlations))
}

/// Factor mode: `c` once `d >= t`, otherwise 1.
pub fn filter_factor(d: f64, t: f64, c: f64) -> f64 {
    if d >= t {
        c
    } else {
        1.0
    }
}

pub fn filter_sigmoid(d: f64, m: f64, a: f64, s: f64) -> f64 {
    (1.0 - a) / (1.0 + (s * (d - m)).exp()) + a
}

/// Keep probability `max(0, 1 - max(0, d) / g)`.
pub fn dropout_keep_prob(d: f64, g: f64) -> f64 {
    (1.0 - d.max(0.0) / g).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterDecision {
    /// One multiplicative factor per feature, shared by every sample.
    Factors(Vec<f64>),
    /// Keep mask laid out `[sample][feature]`.
    Mask {
        batch: usize,
        features: usize,
        keep: Vec<bool>,
    },
}

impl FilterDecision {
    pub fn decide(correlations: &[f64], batch: usize, mode: &FilterMode, rng: &mut Rng) -> Self {
        match *mode {
            FilterMode::Factor { threshold, constant } => Self::Factors(
                correlations
                    .iter()
                    .map(|&d| filter_factor(d, threshold, constant))
                    .collect(),
            ),
            FilterMode::Sigmoid {
                middle,
                minimum,
                steepness,
            } => Self::Factors(
                correlations
                    .iter()
                    .map(|&d| filter_sigmoid(d, middle, minimum, steepness))
                    .collect(),
            ),
            FilterMode::Dropout { guarantee } => {
                let probs: Vec<f64> = correlations.iter().map(|&d| dropout_keep_prob(d, guarantee)).collect();
                let keep = (0..batch)
                    .flat_map(|_| probs.iter().map(|&p| rng.bernoulli(p)).collect::<Vec<_>>())
                    .collect();
                Self::Mask {
                    batch,
                    features: correlations.len(),
                    keep,
                }
            }
        }
    }

    /// Multiplies every instance of each feature (the whole channel map for
    /// spatial inputs) by its factor or mask bit.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let batch = x.dim(0);
        let features = x.dim(1);
        let per_feature = x.len() / (batch * features);
        let mut out = x.clone();
        let data = out.data_mut();
        for b in 0..batch {
            for f in 0..features {
                let scale = match self {
                    Self::Factors(factors) => factors[f] as f32,
                    Self::Mask { keep, features: nf, .. } => {
                        if keep[b * nf + f] {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                if scale == 1.0 {
                    continue;
                }
                let start = (b * features + f) * per_feature;
                data[start..start + per_feature].iter_mut().for_each(|v| *v *= scale);
            }
        }
        out
    }
}

/// Filters the ROI features in training mode; the identity (bit-exact) with
/// an empty record at inference.
pub fn decorre_forward(
    roi: &Tensor,
    cr: &Tensor,
    cfg: &DecorreConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor, CorrelationRecord)> {
    if !training {
        return Ok((roi.clone(), CorrelationRecord::empty(0)));
    }
    let record = correlation_unit(roi, cr, cfg)?;
    let decision = FilterDecision::decide(&record.correlations, roi.dim(0), &cfg.mode, rng);
    Ok((decision.apply(roi), record))
}

/// The layer is skipped in the backward pass: the upstream error is passed on
/// unchanged and blamed on the preceding layers.
pub fn decorre_backward(upstream: &Tensor) -> Tensor {
    upstream.clone()
}

/// Output of one dual-stream step through a [`DecorreLayer`].
#[derive(Debug, Clone)]
pub struct DualOutput {
    pub roi: Tensor,
    /// Filtered control-region features under [`CrPolicy::Filtered`];
    /// `None` means "forward the input unchanged".
    pub cr: Option<Tensor>,
    pub record: CorrelationRecord,
}

/// A DecorreLayer placed in front of weight layer `layer_id`. It carries no
/// trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecorreLayer {
    pub layer_id: usize,
    pub cfg: DecorreConfig,
}

impl DecorreLayer {
    pub fn new(layer_id: usize, cfg: DecorreConfig) -> Self {
        Self { layer_id, cfg }
    }

    /// Training-mode step. With `filtering == false` the correlations are
    /// recorded but the ROI features pass through untouched.
    pub fn forward_dual(&self, roi: &Tensor, cr: &Tensor, rng: &mut Rng, filtering: bool) -> Result<DualOutput> {
        let mut record = correlation_unit(roi, cr, &self.cfg)?;
        record.layer_id = self.layer_id;
        if !filtering {
            return Ok(DualOutput {
                roi: roi.clone(),
                cr: None,
                record,
            });
        }
        let decision = FilterDecision::decide(&record.correlations, roi.dim(0), &self.cfg.mode, rng);
        let cr_out = match self.cfg.cr_policy {
            CrPolicy::Unfiltered => None,
            CrPolicy::Filtered => Some(decision.apply(cr)),
        };
        Ok(DualOutput {
            roi: decision.apply(roi),
            cr: cr_out,
            record,
        })
    }

    pub fn backward(&self, upstream: &Tensor) -> Tensor {
        decorre_backward(upstream)
    }
}
