//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//! `b"DMFC"`, `u32` version, `u8` kind, `u32` header length, JSON header,
//! `u32` tensor count, then per tensor `u32` name length, name, `u32` rank,
//! `u64` dims, `f64` values; the file ends with the sha256 of everything
//! before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::TimeStepSet;
use crate::error::{Error, Result};
use crate::fusionnet::{FusionSpec, FusionWeights};
use crate::nn::ParamStore;
use crate::reconstructor::{ReconArch, ReconstructorWeights};

const MAGIC: &[u8; 4] = b"DMFC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum CheckpointKind {
    Reconstructor = 1,
    Fusion = 2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconHeader {
    pub arch: ReconArch,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionHeader {
    pub spec: FusionSpec,
    pub seed: u64,
    pub time_steps: TimeStepSet,
    pub config_digest: String,
    /// Digest of the reconstructor checkpoint the network was trained on.
    pub recon_digest: String,
}

fn encode(kind: CheckpointKind, header: &impl Serialize, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind as u8);
    let json = serde_json::to_vec(header).expect("header is serializable");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

struct Decoded {
    header: Vec<u8>,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn decode(bytes: &[u8], kind: CheckpointKind) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a dmfuse checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != tail {
        return Err(Error::Checkpoint(
            "checksum mismatch (file corrupted)".into(),
        ));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let found = r.take(1)?[0];
    if found != kind as u8 {
        return Err(Error::Checkpoint(format!(
            "expected a {kind:?} checkpoint, found kind {found}"
        )));
    }
    let hlen = r.u32()? as usize;
    let header = r.take(hlen)?.to_vec();
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, shape, data));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(Decoded { header, tensors })
}

/// Check stored tensors against a freshly built store and flatten them.
fn match_layout(
    expected: &ParamStore,
    stored: Vec<(String, Vec<usize>, Vec<f64>)>,
) -> Result<Vec<f64>> {
    if stored.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            stored.len()
        )));
    }
    let mut flat = Vec::with_capacity(expected.count());
    for ((name, shape, data), (ename, et)) in stored
        .into_iter()
        .zip(expected.names().iter().zip(expected.tensors()))
    {
        if &name != ename || shape != et.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {shape:?} does not match architecture ({ename} {:?})",
                et.shape()
            )));
        }
        flat.extend(data);
    }
    Ok(flat)
}

fn parse_header<T: for<'de> Deserialize<'de>>(raw: &[u8]) -> Result<T> {
    serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))
}

pub fn encode_recon(w: &ReconstructorWeights, config_digest: &str) -> Vec<u8> {
    let header = ReconHeader {
        arch: w.arch().clone(),
        seed: w.seed(),
        config_digest: config_digest.to_string(),
    };
    encode(CheckpointKind::Reconstructor, &header, w.params())
}

pub fn decode_recon(bytes: &[u8]) -> Result<(ReconstructorWeights, ReconHeader)> {
    let d = decode(bytes, CheckpointKind::Reconstructor)?;
    let header: ReconHeader = parse_header(&d.header)?;
    let fresh = ReconstructorWeights::init(&header.arch, header.seed)?;
    let flat = match_layout(fresh.params(), d.tensors)?;
    let w = ReconstructorWeights::from_flat(&header.arch, header.seed, &flat)?;
    Ok((w, header))
}

pub fn encode_fusion(
    w: &FusionWeights,
    time_steps: &TimeStepSet,
    config_digest: &str,
    recon_digest: &str,
) -> Vec<u8> {
    let header = FusionHeader {
        spec: w.spec().clone(),
        seed: w.seed(),
        time_steps: time_steps.clone(),
        config_digest: config_digest.to_string(),
        recon_digest: recon_digest.to_string(),
    };
    encode(CheckpointKind::Fusion, &header, w.params())
}

pub fn decode_fusion(bytes: &[u8]) -> Result<(FusionWeights, FusionHeader)> {
    let d = decode(bytes, CheckpointKind::Fusion)?;
    let header: FusionHeader = parse_header(&d.header)?;
    let spec = FusionSpec::new(
        header.spec.channels,
        header.spec.n_steps,
        header.spec.variant,
    )?;
    if header.time_steps.len() != spec.n_steps {
        return Err(Error::Checkpoint(
            "header time steps disagree with the network spec".into(),
        ));
    }
    let fresh = FusionWeights::init(spec.clone(), header.seed);
    let flat = match_layout(fresh.params(), d.tensors)?;
    let w = FusionWeights::from_flat(spec, header.seed, &flat)?;
    Ok((w, header))
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load a reconstructor checkpoint; also returns the file digest.
pub fn load_recon(path: &Path) -> Result<(ReconstructorWeights, ReconHeader, String)> {
    let bytes = read(path)?;
    let (w, h) = decode_recon(&bytes)?;
    Ok((w, h, bytes_digest(&bytes)))
}

pub fn load_fusion(path: &Path) -> Result<(FusionWeights, FusionHeader)> {
    decode_fusion(&read(path)?)
}

/// Load a fusion checkpoint and make sure it was trained on `recon_digest`.
pub fn load_fusion_for(path: &Path, recon_digest: &str) -> Result<(FusionWeights, FusionHeader)> {
    let (w, h) = load_fusion(path)?;
    if h.recon_digest != recon_digest {
        return Err(Error::DigestMismatch {
            path: path.to_path_buf(),
            expected: h.recon_digest,
            found: recon_digest.to_string(),
        });
    }
    Ok((w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusionnet::FusionVariant;

    fn tiny() -> ReconstructorWeights {
        let arch = ReconArch {
            base_width: 2,
            multipliers: [1, 2, 2, 4, 4],
            time_dim: 4,
        };
        ReconstructorWeights::init(&arch, 9).unwrap()
    }

    #[test]
    fn recon_round_trip() {
        let w = tiny();
        let bytes = encode_recon(&w, "cfg");
        let (back, h) = decode_recon(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(h.config_digest, "cfg");
        assert_eq!(encode_recon(&back, "cfg"), bytes);
    }

    #[test]
    fn fusion_round_trip() {
        let r = tiny();
        let f = FusionWeights::for_reconstructor(&r, 2, FusionVariant::Full, 4).unwrap();
        let ts = TimeStepSet::new(vec![5, 10]).unwrap();
        let bytes = encode_fusion(&f, &ts, "cfg", "abc");
        let (back, h) = decode_fusion(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(h.recon_digest, "abc");
        assert_eq!(h.time_steps, ts);
    }

    #[test]
    fn corruption_and_kind_are_detected() {
        let w = tiny();
        let mut bytes = encode_recon(&w, "cfg");
        assert!(decode_fusion(&bytes).is_err());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        let err = decode_recon(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"));
        assert!(decode_recon(&bytes[..10]).is_err());
    }

    #[test]
    fn recon_digest_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let r = tiny();
        let f = FusionWeights::for_reconstructor(&r, 3, FusionVariant::Full, 4).unwrap();
        let p = dir.path().join("f.ckpt");
        std::fs::write(&p, encode_fusion(&f, &TimeStepSet::default(), "c", "good")).unwrap();
        assert!(load_fusion_for(&p, "good").is_ok());
        assert!(matches!(
            load_fusion_for(&p, "bad"),
            Err(Error::DigestMismatch { .. })
        ));
    }
}
