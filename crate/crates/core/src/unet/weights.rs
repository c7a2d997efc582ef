//! `CWGT` weight files.
//!
//! ```text
//! "CWGT" | u16 version=1 | 32-byte spec hash | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank x u32 dims | f32 data
//! ```
//! All integers and floats little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{ArchitectureSpec, UNet};
use crate::codec::{checked_u32, put_f32s, put_u16, put_u32, ByteReader};
use crate::error::{Error, FormatError, Result};

const MAGIC: &[u8; 4] = b"CWGT";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serialized network state, tied to its architecture by `spec_hash`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub spec_hash: [u8; 32],
    pub tensors: Vec<NamedTensor>,
}

impl ModelWeights {
    pub fn from_model(model: &UNet) -> Self {
        Self {
            spec_hash: model.spec().hash(),
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(name, shape, data)| NamedTensor {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model; fails on hash or shape mismatch.
    pub fn to_model(&self, spec: &ArchitectureSpec) -> Result<UNet> {
        if self.spec_hash != spec.hash() {
            return Err(FormatError::HashMismatch.into());
        }
        let mut model = UNet::new(spec, 0)?;
        let expected = spec.tensor_count();
        if self.tensors.len() != expected {
            return Err(Error::Shape(format!(
                "{} tensors stored, architecture implies {expected}",
                self.tensors.len()
            )));
        }
        let map: HashMap<_, _> = self
            .tensors
            .iter()
            .map(|t| (t.name.clone(), (t.shape.clone(), t.data.clone())))
            .collect();
        if map.len() != self.tensors.len() {
            return Err(Error::Shape("duplicate tensor names in weights".into()));
        }
        model.assign_tensors(map)?;
        Ok(model)
    }
}

pub fn encode_weights(weights: &ModelWeights) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    out.extend_from_slice(&weights.spec_hash);
    put_u32(&mut out, checked_u32(weights.tensors.len(), "tensor count")?);
    for t in &weights.tensors {
        let name_len = u16::try_from(t.name.len())
            .map_err(|_| FormatError::Invalid(format!("tensor name {} too long", t.name)))?;
        put_u16(&mut out, name_len);
        out.extend_from_slice(t.name.as_bytes());
        let rank = u8::try_from(t.shape.len())
            .map_err(|_| FormatError::Invalid(format!("tensor {} rank too large", t.name)))?;
        out.push(rank);
        for &d in &t.shape {
            put_u32(&mut out, checked_u32(d, "dimension")?);
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(FormatError::DimensionMismatch(format!(
                "tensor {} shape {:?} holds {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        put_f32s(&mut out, &t.data);
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            container: "weights",
            version,
        });
    }
    let mut spec_hash = [0u8; 32];
    spec_hash.copy_from_slice(r.take(32)?);
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::DimensionMismatch(format!("tensor {name} too large")))?;
        let data = r.f32_vec(n)?;
        tensors.push(NamedTensor { name, shape, data });
    }
    r.finish()?;
    Ok(ModelWeights { spec_hash, tensors })
}

pub fn save_weights(model: &UNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_weights(&ModelWeights::from_model(model)).map_err(|e| Error::format(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>, spec: &ArchitectureSpec) -> Result<UNet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let weights = decode_weights(&bytes).map_err(|e| Error::format(path, e))?;
    weights.to_model(spec).map_err(|e| match e {
        Error::Codec(f) => Error::format(path, f),
        other => other.context(format!("loading {}", path.display())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{Mode, Tensor};

    fn toy() -> ArchitectureSpec {
        ArchitectureSpec {
            in_channels: 2,
            num_classes: 3,
            encoder_widths: vec![4, 6],
            bottleneck_width: 8,
            convs_per_block: 2,
            use_batchnorm: true,
        }
    }

    fn trained_toy() -> UNet {
        let mut model = UNet::new(&toy(), 9).unwrap();
        let x = Tensor::new(2, 2, 8, 8, (0..256).map(|i| (i as f32 * 0.3).cos()).collect()).unwrap();
        // one training pass moves the running statistics off their defaults
        model.forward_train(&x).unwrap();
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = trained_toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cwgt");
        save_weights(&model, &path).unwrap();
        let back = load_weights(&path, &toy()).unwrap();
        assert_eq!(ModelWeights::from_model(&back), ModelWeights::from_model(&model));
        let x = Tensor::new(1, 2, 8, 8, (0..128).map(|i| (i as f32 * 0.7).sin()).collect()).unwrap();
        let a = model.forward(&x, Mode::Eval).unwrap();
        let b = back.forward(&x, Mode::Eval).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn header_count_matches_spec() {
        let bytes = encode_weights(&ModelWeights::from_model(&trained_toy())).unwrap();
        let count = u32::from_le_bytes(bytes[38..42].try_into().unwrap()) as usize;
        // (2 enc + 1 bottleneck + 2 dec) blocks x 2 units x 6 tensors + 2 ups x 2 + head 2
        assert_eq!(count, 5 * 2 * 6 + 4 + 2);
        assert_eq!(count, toy().tensor_count());
    }

    #[test]
    fn different_spec_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cwgt");
        save_weights(&trained_toy(), &path).unwrap();
        let mut other = toy();
        other.bottleneck_width = 10;
        let err = load_weights(&path, &other).unwrap_err();
        assert!(matches!(err.root(), Error::Format { source: FormatError::HashMismatch, .. }));
    }

    #[test]
    fn truncated_and_corrupt_files() {
        let bytes = encode_weights(&ModelWeights::from_model(&trained_toy())).unwrap();
        assert!(matches!(
            decode_weights(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_weights(&bad), Err(FormatError::BadMagic { .. })));
        // forged hash but shrunken tensor shape
        let mut w = decode_weights(&bytes).unwrap();
        w.tensors[0].shape = vec![1];
        w.tensors[0].data = vec![0.0];
        assert!(matches!(w.to_model(&toy()), Err(Error::Shape(_))));
    }
}
