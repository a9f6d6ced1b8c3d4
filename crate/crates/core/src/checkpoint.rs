//! Versioned binary checkpoints.
//!
//! ```text
//! "TEAN" | u32 version | sha256(spec json) | u32 len | spec json
//! u32 n_tensors
//!   u32 name_len | name | u32 rank | u32 dims[rank] | f32 data (LE)
//! sha256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::param::Module;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TEAN";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn spec_digest(spec: &NetworkSpec) -> Result<[u8; DIGEST_LEN]> {
    Ok(Sha256::digest(serde_json::to_vec(spec)?).into())
}

/// Parameters and batch-norm buffers by name.
pub fn state_dict(net: &mut Network<f32>) -> BTreeMap<String, Tensor<f32>> {
    let mut out: BTreeMap<String, Tensor<f32>> =
        net.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    for bn in net.batch_norms_mut() {
        let (m, v) = bn.buffer_names();
        let c = bn.channels();
        out.insert(m, Tensor::new(&[c], bn.running_mean.clone()).expect("bn buffer"));
        out.insert(v, Tensor::new(&[c], bn.running_var.clone()).expect("bn buffer"));
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(net: &mut Network<f32>) -> Result<Vec<u8>> {
    let spec_json = serde_json::to_vec(net.spec())?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&spec_json));
    put_u32(&mut out, spec_json.len())?;
    out.extend_from_slice(&spec_json);
    let state = state_dict(net);
    put_u32(&mut out, state.len())?;
    for (name, t) in &state {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            needed: self.at.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parses a checkpoint, verifying both digests, and rebuilds the network.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { bytes, at: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    if bytes.len() < r.at + DIGEST_LEN {
        return Err(Error::Truncated {
            needed: r.at + DIGEST_LEN,
            available: bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != tail {
        return Err(Error::DigestMismatch { what: "checkpoint" });
    }
    let mut r = Reader { bytes: body, at: r.at };
    let spec_digest = r.take(DIGEST_LEN)?.to_vec();
    let spec_len = r.u32()?;
    let spec_json = r.take(spec_len)?;
    if Sha256::digest(spec_json).as_slice() != spec_digest {
        return Err(Error::DigestMismatch { what: "spec" });
    }
    let spec: NetworkSpec = serde_json::from_slice(spec_json)?;
    let mut net = Network::build(&spec, 0)?;

    let n = r.u32()?;
    let mut loaded = BTreeMap::new();
    for _ in 0..n {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        let rank = r.u32()?;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(Error::Malformed(format!("{name}: rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Malformed(format!("{name}: dimensions overflow")))?;
        let data = r
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if loaded.insert(name.clone(), Tensor::new(&dims, data)?).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if r.at != body.len() {
        return Err(Error::Malformed(format!("{} unexpected bytes before the digest", body.len() - r.at)));
    }
    load_state(&mut net, loaded)?;
    Ok(net)
}

fn load_state(net: &mut Network<f32>, mut state: BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let mut fetch = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = state
            .remove(name)
            .ok_or_else(|| Error::Malformed(format!("checkpoint lacks {name}")))?;
        if t.shape() != shape {
            return Err(Error::Malformed(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    for p in net.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = fetch(&p.name, &shape)?;
    }
    for bn in net.batch_norms_mut() {
        let (m, v) = bn.buffer_names();
        let c = [bn.channels()];
        bn.running_mean = fetch(&m, &c)?.into_data();
        bn.running_var = fetch(&v, &c)?.into_data();
    }
    if let Some(extra) = state.keys().next() {
        return Err(Error::Malformed(format!("checkpoint has unknown tensor {extra}")));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, net: &mut Network<f32>) -> Result<()> {
    fs::write(path, encode_checkpoint(net)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and checks it was written for `spec`.
pub fn load_checkpoint_for(path: &Path, spec: &NetworkSpec) -> Result<Network<f32>> {
    let net = load_checkpoint(path)?;
    if spec_digest(net.spec())? != spec_digest(spec)? {
        return Err(Error::DigestMismatch { what: "spec" });
    }
    Ok(net)
}
