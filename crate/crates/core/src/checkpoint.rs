//! Weight checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"DCLW"
//! version  u32 (= 1)
//! count    u32
//! count x {
//!     name_len u16, name utf-8 bytes,
//!     rank u8, rank x u32 extents,
//!     f32 payload (product of extents values)
//! }
//! ```
//!
//! Each layer contributes two entries, `<name>.weight` and `<name>.bias`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCLW";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    let params = model.params();
    let entries: Vec<(String, &Tensor)> = params
        .iter()
        .flat_map(|(name, p)| {
            [
                (format!("{name}.weight"), &p.weights),
                (format!("{name}.bias"), &p.bias),
            ]
        })
        .collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.ndim() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Named tensors in file order.
pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a weight checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let shape = (0..rank[0])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Loads checkpoint tensors into `model` by name. Every model parameter must
/// be present with a matching shape.
pub fn load_checkpoint(model: &mut Model, r: impl Read) -> Result<()> {
    let tensors = read_checkpoint(r)?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (name, params) in names.iter().zip(model.params_mut()) {
        for (suffix, target) in [("weight", &mut params.weights), ("bias", &mut params.bias)] {
            let key = format!("{name}.{suffix}");
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
            if t.shape() != target.shape() {
                return Err(Error::Format(format!(
                    "`{key}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            *target = t.clone();
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchitectureSpec};
    use crate::Rng;

    #[test]
    fn round_trip_restores_parameters() {
        let spec = ArchitectureSpec::small_custom();
        let src = build_model(&spec, &mut Rng::new(3)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&src, &mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let mut dst = build_model(&spec.plain(), &mut Rng::new(4)).unwrap();
        load_checkpoint(&mut dst, buf.as_slice()).unwrap();
        for ((_, a), (_, b)) in src.params().iter().zip(dst.params()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn rejects_bad_magic_and_wrong_architecture() {
        let spec = ArchitectureSpec::small_custom();
        let mut m = build_model(&spec, &mut Rng::new(3)).unwrap();
        assert!(matches!(
            load_checkpoint(&mut m, &b"XXXX\x01\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        let medium = build_model(&ArchitectureSpec::medium_custom(), &mut Rng::new(0)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&medium, &mut buf).unwrap();
        assert!(load_checkpoint(&mut m, buf.as_slice()).is_err());
    }
}
