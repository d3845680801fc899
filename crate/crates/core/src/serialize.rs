//! Binary model file format.
//!
//! Layout (all integers little-endian):
//!   magic "WMFP" | version: u16 | flags: u8 (bit 0 = fingerprint hash
//!   present) | 32-byte fingerprint hash if flagged | tensor count: u32 |
//!   per tensor: name length u16 + UTF-8 name, kind code u8, modulatable
//!   u8, rank u8, dims u32 each | then every tensor's f32 data in manifest
//!   order. Base and stamped models share the byte layout; only the
//!   fingerprint hash distinguishes them.

use crate::error::{Error, Result};
use crate::params::{ParamTensor, TensorKind};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"WMFP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct ModelFile {
    pub version: u16,
    pub fingerprint_hash: Option<[u8; 32]>,
    pub tensors: Vec<ParamTensor>,
}

impl ModelFile {
    pub fn new(tensors: Vec<ParamTensor>, fingerprint_hash: Option<[u8; 32]>) -> Self {
        ModelFile {
            version: FORMAT_VERSION,
            fingerprint_hash,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.fingerprint_hash.is_some() as u8);
        if let Some(h) = &self.fingerprint_hash {
            out.extend_from_slice(h);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.kind.code());
            out.push(t.modulatable as u8);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0usize;
        let malformed = |pos: usize, detail: String| Error::Malformed {
            path: path.display().to_string(),
            offset: pos as u64,
            detail,
        };
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(malformed(
                    *pos,
                    format!("truncated: need {n} bytes, have {}", bytes.len() - *pos),
                ));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != MAGIC {
            return Err(malformed(0, format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(malformed(4, format!("unsupported format version {version}")));
        }
        let flags = take(&mut pos, 1)?[0];
        let fingerprint_hash = if flags & 1 != 0 {
            let h: [u8; 32] = take(&mut pos, 32)?.try_into().unwrap();
            Some(h)
        } else {
            None
        };
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let at = pos;
            let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, nlen)?)
                .map_err(|_| malformed(at, "tensor name is not UTF-8".to_string()))?
                .to_string();
            let kind_code = take(&mut pos, 1)?[0];
            let kind = TensorKind::from_code(kind_code)
                .ok_or_else(|| malformed(at, format!("unknown tensor kind code {kind_code}")))?;
            let modulatable = take(&mut pos, 1)?[0] != 0;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            manifest.push((name, kind, modulatable, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, kind, modulatable, shape) in manifest {
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(malformed(pos - n * 4, format!("tensor {name} has non-finite values")));
            }
            tensors.push(ParamTensor::new(name, data, shape, kind).modulatable(modulatable));
        }
        if pos != bytes.len() {
            return Err(malformed(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(ModelFile {
            version,
            fingerprint_hash,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        ModelFile::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized bytes; used as the model identity in the
    /// registry.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        h.finalize().into()
    }
}

/// Scalar settings carried inside the file as a meta tensor.
pub fn meta_tensor(image_side: usize, d_phi: usize, variant_code: u8) -> ParamTensor {
    ParamTensor::new(
        "meta",
        vec![image_side as f32, d_phi as f32, variant_code as f32],
        vec![3],
        TensorKind::Meta,
    )
}

pub fn read_meta(t: &ParamTensor) -> Result<(usize, usize, u8)> {
    if t.kind != TensorKind::Meta || t.data.len() != 3 {
        return Err(Error::Parse("meta tensor has the wrong kind or length".into()));
    }
    Ok((t.data[0] as usize, t.data[1] as usize, t.data[2] as u8))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelFile {
        let t1 = ParamTensor::new(
            "dec.conv1.weight",
            (0..24).map(|i| i as f32 * 0.5 - 3.0).collect(),
            vec![2, 3, 2, 2],
            TensorKind::Conv,
        )
        .modulatable(true);
        let t2 = ParamTensor::new("dec.conv1.bias", vec![0.1, -0.2], vec![2], TensorKind::Bias);
        let t3 = meta_tensor(32, 32, 1);
        ModelFile::new(vec![t1, t2, t3], Some([7u8; 32]))
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = sample();
        let bytes = m.to_bytes();
        let back = ModelFile::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.fingerprint_hash, m.fingerprint_hash);
        assert_eq!(back.tensors.len(), 3);
        for (a, b) in back.tensors.iter().zip(&m.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.modulatable, b.modulatable);
            assert_eq!(a.data, b.data);
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.wmfp");
        let m = sample();
        m.save(&path).unwrap();
        let back = ModelFile::load(&path).unwrap();
        assert_eq!(back.to_bytes(), m.to_bytes());
        assert_eq!(back.digest(), m.digest());
    }

    #[test]
    fn base_and_stamped_layouts_differ_only_in_hash() {
        let mut m = sample();
        m.fingerprint_hash = None;
        let base = m.to_bytes();
        m.fingerprint_hash = Some([9u8; 32]);
        let stamped = m.to_bytes();
        assert_eq!(stamped.len(), base.len() + 32);
        assert_eq!(&base[..6], &stamped[..6]);
        assert_eq!(&base[7..], &stamped[7 + 32..]);
    }

    #[test]
    fn malformed_inputs_rejected_with_offsets() {
        let m = sample();
        let bytes = m.to_bytes();
        let p = Path::new("mem");

        let bad_magic = {
            let mut b = bytes.clone();
            b[0] = b'X';
            ModelFile::from_bytes(&b, p).unwrap_err().to_string()
        };
        assert!(bad_magic.contains("magic"), "{bad_magic}");

        let truncated = ModelFile::from_bytes(&bytes[..bytes.len() - 3], p)
            .unwrap_err()
            .to_string();
        assert!(truncated.contains("truncated"), "{truncated}");

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(ModelFile::from_bytes(&trailing, p).is_err());

        let mut nan = bytes.clone();
        let tail = nan.len() - 4;
        nan[tail..].copy_from_slice(&f32::NAN.to_le_bytes());
        let e = ModelFile::from_bytes(&nan, p).unwrap_err().to_string();
        assert!(e.contains("non-finite"), "{e}");
    }

    #[test]
    fn meta_roundtrip() {
        let t = meta_tensor(64, 32, 0);
        assert_eq!(read_meta(&t).unwrap(), (64, 32, 0));
        let not_meta = ParamTensor::new("x", vec![1.0], vec![1], TensorKind::Bias);
        assert!(read_meta(&not_meta).is_err());
    }
}
