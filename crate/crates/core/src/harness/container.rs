//! Dataset container and CSV manifest.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic b"DCLD", version u32 (= 1), n u32, height u32, width u32,
//! seed u64, signal_strength f64,
//! generator constants as f64: field_sigma, blur_sigma, unsharp_amount,
//!     sharp_noise, blob_radius_min, blob_radius_max, blob_mean_count,
//! n x { id u32, label u8, noise_seed u64,
//!       roi_clean, cr_clean, roi_soft, roi_sharp, cr_soft, cr_sharp
//!       (each height * width f32) }
//! ```

use std::io::{Read, Write};

use super::synth::{synth_generate_with, GeneratorConfig, Sample};
use crate::error::{Error, Result};
use crate::eval::kfold_split;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DCLD";
pub const DATASET_VERSION: u32 = 1;

/// Folds used for the manifest's split column.
pub const MANIFEST_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub signal_strength: f64,
    pub generator: GeneratorConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(n: usize, seed: u64, signal_strength: f64, generator: GeneratorConfig) -> Self {
        Self {
            seed,
            signal_strength,
            generator,
            samples: synth_generate_with(n, seed, signal_strength, &generator),
        }
    }
}

pub fn write_dataset(ds: &Dataset, mut w: impl Write) -> Result<()> {
    let g = &ds.generator;
    w.write_all(DATASET_MAGIC)?;
    for v in [DATASET_VERSION, ds.samples.len() as u32, g.size as u32, g.size as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&ds.seed.to_le_bytes())?;
    for v in [
        ds.signal_strength,
        g.field_sigma,
        g.blur_sigma,
        g.unsharp_amount,
        g.sharp_noise,
        g.blob_radius_min,
        g.blob_radius_max,
        g.blob_mean_count,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in &ds.samples {
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&[s.label])?;
        w.write_all(&s.noise_seed.to_le_bytes())?;
        for img in [
            &s.roi_clean,
            &s.cr_clean,
            &s.roi_soft,
            &s.roi_sharp,
            &s.cr_soft,
            &s.cr_sharp,
        ] {
            for v in img.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_dataset(mut r: impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset container (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    if h != w || h == 0 {
        return Err(Error::Format(format!("unsupported image size {h}x{w}")));
    }
    let seed = read_u64(&mut r)?;
    let mut f = [0f64; 8];
    for v in f.iter_mut() {
        *v = f64::from_le_bytes(read_array(&mut r)?);
    }
    let generator = GeneratorConfig {
        size: h,
        field_sigma: f[1],
        blur_sigma: f[2],
        unsharp_amount: f[3],
        sharp_noise: f[4],
        blob_radius_min: f[5],
        blob_radius_max: f[6],
        blob_mean_count: f[7],
    };
    let mut samples = Vec::with_capacity(n);
    let mut buf = vec![0u8; h * w * 4];
    for _ in 0..n {
        let id = read_u32(&mut r)?;
        let label = read_array::<1>(&mut r)?[0];
        if label > 1 {
            return Err(Error::Format(format!("sample {id} has label {label}")));
        }
        let noise_seed = read_u64(&mut r)?;
        let mut imgs = Vec::with_capacity(6);
        for _ in 0..6 {
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            imgs.push(Tensor::new(&[1, h, w], data)?);
        }
        let mut it = imgs.into_iter();
        let mut next = || it.next().expect("six images");
        samples.push(Sample {
            id,
            label,
            roi_clean: next(),
            cr_clean: next(),
            roi_soft: next(),
            roi_sharp: next(),
            cr_soft: next(),
            cr_sharp: next(),
            noise_seed,
        });
    }
    Ok(Dataset {
        seed,
        signal_strength: f[0],
        generator,
        samples,
    })
}

/// `id,label,split` rows; `split` is the sample's fold under a
/// [`MANIFEST_FOLDS`]-fold split seeded with the dataset seed.
pub fn write_manifest(ds: &Dataset, mut w: impl Write) -> Result<()> {
    let n = ds.samples.len();
    let mut fold_of = vec![0usize; n];
    if n >= MANIFEST_FOLDS {
        for (k, fold) in kfold_split(n, MANIFEST_FOLDS, ds.seed)?.iter().enumerate() {
            for &i in fold {
                fold_of[i] = k;
            }
        }
    }
    writeln!(w, "id,label,split")?;
    for (s, fold) in ds.samples.iter().zip(fold_of) {
        writeln!(w, "{},{},fold{}", s.id, s.label, fold)?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    read_array(r).map(u32::from_le_bytes)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    read_array(r).map(u64::from_le_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let ds = Dataset::generate(6, 11, 0.5, GeneratorConfig::default());
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_dataset(bad.as_slice()).is_err());
        assert!(read_dataset(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn manifest_has_one_row_per_sample() {
        let ds = Dataset::generate(12, 2, 0.5, GeneratorConfig::default());
        let mut buf = Vec::new();
        write_manifest(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.starts_with("id,label,split\n0,"));
    }
}
