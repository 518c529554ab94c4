//! Synthetic paired ROI/control-region data with injected confounders.
//!
//! Every [`Sample`] carries a clean ROI and control region plus a soft
//! (blurred) and a sharp (unsharp-masked, noisier) rendering of each. The
//! class signal lives only in the ROI; the kernel style or additive noise is
//! always shared by both regions of a pair. [`biased_sample`] ties the
//! confounder to the label, [`adversarial_testset`] inverts that tie for every
//! sample and [`full_testset`] breaks it.

mod augment;
mod bias;
mod container;
mod synth;

pub use augment::{augment, flip_horizontal, translate};
pub use bias::{adversarial_testset, apply_awgn, biased_sample, full_testset, BiasKind, BiasSpec, Pair, Variant};
pub use container::{read_dataset, write_dataset, write_manifest, Dataset, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{
    gaussian_blur, generate_sample, synth_generate, synth_generate_with, GeneratorConfig, Sample,
    DEFAULT_SIGNAL_STRENGTH,
};

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn std_dev(values: &[f32]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}
