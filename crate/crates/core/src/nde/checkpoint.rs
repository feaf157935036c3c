use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ConditionalGaussianEstimator, EstimatorSpec, Standardization};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GNPECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    spec: EstimatorSpec,
    context_std: Standardization,
    proxy_std: Standardization,
    target_std: Standardization,
    trained: bool,
    weights: usize,
    /// Free-form echo of the training configuration.
    config: serde_json::Value,
}

/// A saved estimator together with the configuration it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub estimator: ConditionalGaussianEstimator,
    pub config: serde_json::Value,
}

impl Checkpoint {
    /// Layout: magic, `u32` version, `u64` header length, JSON header
    /// (spec, standardization maps, config echo), then the weights as
    /// little-endian `f64`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let est = &self.estimator;
        let (c, p, t) = est.standardization();
        let header = serde_json::to_vec(&Header {
            spec: est.spec().clone(),
            context_std: c.clone(),
            proxy_std: p.clone(),
            target_std: t.clone(),
            trained: est.trained,
            weights: est.num_params(),
            config: self.config.clone(),
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * est.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for w in est.params() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_reader<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: Header = serde_json::from_slice(&header)?;
        let mut raw = vec![0u8; 8 * h.weights];
        r.read_exact(&mut raw)?;
        let weights = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut estimator = ConditionalGaussianEstimator::new(h.spec, 0)?;
        estimator
            .set_params(weights)
            .map_err(|e| Error::Format(format!("checkpoint weights: {e}")))?;
        estimator.set_standardization(h.context_std, h.proxy_std, h.target_std)?;
        estimator.mark_trained(h.trained);
        Ok(Self {
            estimator,
            config: h.config,
        })
    }

    /// SHA-256 of the encoded checkpoint, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<String> {
    let bytes = checkpoint.to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
}
