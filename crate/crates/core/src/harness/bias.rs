use serde::{Deserialize, Serialize};

use super::synth::Sample;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    /// Soft vs. sharp reconstruction style.
    KernelStyle,
    /// Additive white Gaussian noise on top of the clean images.
    Awgn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    pub kind: BiasKind,
    /// Probability that a sample shows the manipulation favored by its label.
    /// 0.5 is an unbiased assignment.
    pub p_bias: f64,
    /// AWGN standard deviation relative to the ROI intensity std.
    #[serde(default = "default_sigma_rel")]
    pub sigma_rel: f64,
}

fn default_sigma_rel() -> f64 {
    BiasSpec::DEFAULT_SIGMA_REL
}

impl BiasSpec {
    /// AWGN at half the ROI intensity std.
    pub const DEFAULT_SIGMA_REL: f64 = 0.5;

    pub fn new(kind: BiasKind, p_bias: f64) -> Self {
        Self {
            kind,
            p_bias,
            sigma_rel: default_sigma_rel(),
        }
    }

    pub fn kernel_style(p_bias: f64) -> Self {
        Self::new(BiasKind::KernelStyle, p_bias)
    }

    pub fn awgn(p_bias: f64) -> Self {
        Self::new(BiasKind::Awgn, p_bias)
    }

    /// Same kind with an unbiased (p = 0.5) assignment.
    pub fn unbiased(&self) -> Self {
        Self { p_bias: 0.5, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.p_bias) {
            return Err(Error::InvalidConfig(format!("p_bias {} outside [0.5, 1]", self.p_bias)));
        }
        if !(self.sigma_rel >= 0.0) || !self.sigma_rel.is_finite() {
            return Err(Error::InvalidConfig("sigma_rel must be non-negative".into()));
        }
        Ok(())
    }

    /// The manipulation state this label is tied to under the bias.
    pub fn favored(&self, label: u8) -> Variant {
        match (self.kind, label) {
            (BiasKind::KernelStyle, 1) => Variant::Soft,
            (BiasKind::KernelStyle, _) => Variant::Sharp,
            (BiasKind::Awgn, 1) => Variant::Noised,
            (BiasKind::Awgn, _) => Variant::Clean,
        }
    }
}

/// Manipulation state of an emitted pair, shared by its ROI and control region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Soft,
    Sharp,
    Clean,
    Noised,
}

impl Variant {
    pub fn invert(self) -> Self {
        match self {
            Variant::Soft => Variant::Sharp,
            Variant::Sharp => Variant::Soft,
            Variant::Clean => Variant::Noised,
            Variant::Noised => Variant::Clean,
        }
    }
}

/// ROI/control-region images ready for training or testing.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: u32,
    pub label: u8,
    pub variant: Variant,
    pub roi: Tensor,
    pub cr: Tensor,
}

/// `img + N(0, (sigma_rel * sigma_roi)^2)` elementwise.
pub fn apply_awgn(img: &Tensor, sigma_roi: f64, sigma_rel: f64, rng: &mut Rng) -> Tensor {
    let sigma = sigma_rel * sigma_roi;
    if sigma == 0.0 {
        return img.clone();
    }
    let data = img
        .data()
        .iter()
        .map(|&v| (v as f64 + sigma * rng.normal()) as f32)
        .collect();
    Tensor::new(img.shape(), data).expect("same shape")
}

/// Images of `sample` in manipulation state `variant`. The noise field of the
/// noised state comes from the sample's own seed, so it is the same in every
/// split that uses it; the ROI is drawn first, then the control region, both
/// with sigma relative to the clean ROI std.
pub fn materialize(sample: &Sample, variant: Variant, sigma_rel: f64) -> Pair {
    let (roi, cr) = match variant {
        Variant::Soft => (sample.roi_soft.clone(), sample.cr_soft.clone()),
        Variant::Sharp => (sample.roi_sharp.clone(), sample.cr_sharp.clone()),
        Variant::Clean => (sample.roi_clean.clone(), sample.cr_clean.clone()),
        Variant::Noised => {
            let mut rng = Rng::new(derive_seed(sample.noise_seed, 0));
            let sigma_roi = super::std_dev(sample.roi_clean.data());
            let roi = apply_awgn(&sample.roi_clean, sigma_roi, sigma_rel, &mut rng);
            let cr = apply_awgn(&sample.cr_clean, sigma_roi, sigma_rel, &mut rng);
            (roi, cr)
        }
    };
    Pair {
        id: sample.id,
        label: sample.label,
        variant,
        roi,
        cr,
    }
}

/// Each sample shows its label's favored manipulation with probability
/// `p_bias` and the opposite one otherwise. One coin per sample, in order.
pub fn biased_sample(samples: &[Sample], spec: &BiasSpec, rng: &mut Rng) -> Vec<Pair> {
    samples
        .iter()
        .map(|s| {
            let favored = spec.favored(s.label);
            let variant = if rng.bernoulli(spec.p_bias) {
                favored
            } else {
                favored.invert()
            };
            materialize(s, variant, spec.sigma_rel)
        })
        .collect()
}

/// Every sample gets the manipulation opposite to its label's favored one.
/// Contains no randomness beyond the per-sample noise fields.
pub fn adversarial_testset(samples: &[Sample], spec: &BiasSpec) -> Vec<Pair> {
    samples
        .iter()
        .map(|s| materialize(s, spec.favored(s.label).invert(), spec.sigma_rel))
        .collect()
}

/// Unbiased test data: kernel style drawn uniformly per sample independent of
/// the label; clean images for the noise confounder.
pub fn full_testset(samples: &[Sample], kind: BiasKind, rng: &mut Rng) -> Vec<Pair> {
    samples
        .iter()
        .map(|s| {
            let variant = match kind {
                BiasKind::KernelStyle => {
                    if rng.bernoulli(0.5) {
                        Variant::Soft
                    } else {
                        Variant::Sharp
                    }
                }
                BiasKind::Awgn => Variant::Clean,
            };
            materialize(s, variant, default_sigma_rel())
        })
        .collect()
}
