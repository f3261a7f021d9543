//! Checkpoints and the conv-weight transfer rule.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "SFCK" | version u16 | header_len u32 | header JSON {"spec":..,"source_digest":..}
//! tensor_count u32 | per tensor: name_len u16, name, ndim u8, dims u32 x ndim, f32 x prod(dims)
//! val_loss f64 | epoch u32 | provenance u8 | SHA-256 of every preceding byte (32 bytes)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{init_params, layout, ParamTensor, Parameters, Section};
use super::spec::{hex_string, ModelSpec};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Scratch,
    Pretrain,
    Finetune,
}

impl Provenance {
    fn byte(self) -> u8 {
        match self {
            Provenance::Scratch => 0,
            Provenance::Pretrain => 1,
            Provenance::Finetune => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Provenance::Scratch),
            1 => Ok(Provenance::Pretrain),
            2 => Ok(Provenance::Finetune),
            other => Err(Error::Checkpoint(format!("unknown provenance byte {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Scratch => "scratch",
            Provenance::Pretrain => "pretrain",
            Provenance::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Parameters<f32>,
    /// 1-based epoch whose weights these are (0 = untrained).
    pub epoch: u32,
    pub val_loss: f64,
    pub provenance: Provenance,
    /// Digest of the checkpoint these conv weights were transferred from.
    pub source_digest: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    source_digest: Option<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn spec_digest(&self) -> String {
        self.spec.digest()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.params.num_values() * 4 + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header { spec: self.spec.clone(), source_digest: self.source_digest.clone() })?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.tensors.len() as u32).to_le_bytes());
        for t in &self.params.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.val_loss.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.push(self.provenance.byte());
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        Ok(out)
    }

    /// Parses and verifies a checkpoint; a footer hash mismatch is refused.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, hash) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != hash {
            return Err(Error::Checkpoint("SHA-256 footer mismatch; file is corrupted".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        header.spec.validate()?;
        let count = r.u32()? as usize;
        let expected = layout(&header.spec);
        if count != expected.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", expected.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name_want, section, _, _) in expected {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != name_want {
                return Err(Error::Checkpoint(format!("expected tensor {name_want}, found {name}")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(ParamTensor { name, section, shape, data });
        }
        let params = Parameters { tensors };
        params.check_against(&header.spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let val_loss = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let epoch = r.u32()?;
        let provenance = Provenance::from_byte(r.u8()?)?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes before footer".into()));
        }
        Ok(Self { spec: header.spec, params, epoch, val_loss, provenance, source_digest: header.source_digest })
    }

    /// Hex SHA-256 footer of the serialized form.
    pub fn digest(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex_string(&bytes[bytes.len() - 32..]))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex_string(&bytes[bytes.len() - 32..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Builds initial parameters for `dst_spec`: conv tensors copied bit-for-bit
/// from `src`, dense tensors freshly He-initialized under `seed`.
pub fn transfer_conv_weights(src: &Checkpoint, dst_spec: &ModelSpec, seed: u64) -> Result<Parameters<f32>> {
    dst_spec.validate()?;
    let src_blocks = src.spec.blocks();
    let dst_blocks = dst_spec.blocks();
    let mut params: Parameters<f32> = init_params(dst_spec, seed);
    for b in 0..src_blocks.max(dst_blocks) {
        if b >= src_blocks || b >= dst_blocks {
            return Err(Error::ShapeMismatch(format!(
                "conv block {}: source has {src_blocks} blocks, destination has {dst_blocks}",
                b + 1
            )));
        }
        for i in [2 * b, 2 * b + 1] {
            let s = &src.params.tensors[i];
            let d = &mut params.tensors[i];
            debug_assert_eq!(d.section, Section::Conv);
            if s.shape != d.shape {
                return Err(Error::ShapeMismatch(format!(
                    "conv block {} ({}): source {:?} vs destination {:?}",
                    b + 1,
                    d.name,
                    s.shape,
                    d.shape
                )));
            }
            d.data.copy_from_slice(&s.data);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(spec: ModelSpec, seed: u64) -> Checkpoint {
        Checkpoint {
            params: init_params(&spec, seed),
            spec,
            epoch: 7,
            val_loss: 0.3125,
            provenance: Provenance::Pretrain,
            source_digest: None,
        }
    }

    #[test]
    fn bytes_round_trip_and_layout() {
        let c = ckpt(ModelSpec::with_channels(8, vec![2]), 3);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SFCK");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        let n = bytes.len();
        assert_eq!(bytes[n - 33], 1); // provenance byte before the hash
        assert_eq!(u32::from_le_bytes(bytes[n - 37..n - 33].try_into().unwrap()), 7);
        assert_eq!(f64::from_le_bytes(bytes[n - 45..n - 37].try_into().unwrap()), 0.3125);
    }

    #[test]
    fn corruption_is_refused() {
        let c = ckpt(ModelSpec::with_channels(8, vec![2]), 3);
        let mut bytes = c.to_bytes().unwrap();
        bytes[100] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("SHA-256"), "{err}");
        assert!(Checkpoint::from_bytes(b"XXXX").is_err());
        let good = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn transfer_identical_specs() {
        let spec = ModelSpec::default();
        let src = ckpt(spec.clone(), 1);
        let p = transfer_conv_weights(&src, &spec, 99).unwrap();
        let fresh: Parameters<f32> = init_params(&spec, 99);
        for (i, t) in p.tensors.iter().enumerate() {
            match t.section {
                Section::Conv => assert_eq!(t.data, src.params.tensors[i].data, "{}", t.name),
                Section::Dense => assert_eq!(t.data, fresh.tensors[i].data, "{}", t.name),
            }
        }
    }

    #[test]
    fn transfer_mismatch_names_block() {
        let src = ckpt(ModelSpec::default(), 1);
        let dst = ModelSpec::with_channels(32, vec![8, 16, 64]);
        let err = transfer_conv_weights(&src, &dst, 1).unwrap_err().to_string();
        assert!(err.contains("conv block 3"), "{err}");
        let fewer = ModelSpec::with_channels(32, vec![8, 16]);
        assert!(transfer_conv_weights(&src, &fewer, 1).unwrap_err().to_string().contains("conv block 3"));
    }
}
