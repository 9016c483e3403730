//! Checkpoint container:
//!
//! ```text
//! magic "DNASCKPT" | version u32 LE | header length u64 LE | JSON header | payload
//! ```
//!
//! The header holds the architecture string, metadata and a tensor
//! directory (name, shape, byte offset into the payload). The payload is raw
//! little-endian f64 data, guarded by a SHA-256 digest in the header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{decode_arch, Detector, NetError};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DNASCKPT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub epoch: u64,
    pub resolutions: Vec<usize>,
    pub score: Option<f64>,
    /// Free-form extras, e.g. a subnet-space descriptor.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch_encoding: String,
    pub tensors: ParamStore,
    pub metadata: Metadata,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch_encoding: String,
    metadata: Metadata,
    tensors: Vec<Entry>,
    payload_bytes: usize,
    payload_sha256: String,
}

impl Checkpoint {
    pub fn from_detector(d: &Detector, metadata: Metadata) -> Self {
        Self { arch_encoding: super::encode_arch(&d.arch), tensors: d.params.clone(), metadata }
    }

    /// Instantiates the detector the checkpoint describes.
    pub fn to_detector(&self) -> Result<Detector, NetError> {
        Detector::from_params(decode_arch(&self.arch_encoding)?, self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.tensors.num_scalars() * 8);
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in self.tensors.iter() {
            entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), offset: payload.len() });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            arch_encoding: self.arch_encoding.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
            payload_bytes: payload.len(),
            payload_sha256: hex_digest(&payload),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let corrupt = |m: &str| NetError::Corrupt(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(NetError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(20))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| NetError::Corrupt(format!("bad header: {e}")))?;
        let payload = &bytes[header_end..];
        if payload.len() != header.payload_bytes {
            return Err(NetError::Corrupt(format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex_digest(payload) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let mut tensors = ParamStore::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e
                .offset
                .checked_add(n * 8)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| NetError::Corrupt(format!("tensor {} out of bounds", e.name)))?;
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| NetError::Corrupt(format!("{}: {err}", e.name)))?;
            tensors.insert(e.name, t);
        }
        Ok(Self { arch_encoding: header.arch_encoding, tensors, metadata: header.metadata })
    }
}

fn hex_digest(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), NetError> {
    Ok(std::fs::write(path, ck.to_bytes())?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
