//! Binary checkpoints: a JSON header (run config, progress counters and
//! the parameter index) followed by raw little-endian `f32` arrays.

use std::io::{Read, Write};
use std::path::Path;

use bit_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{hex, Agent};
use crate::config::RunConfig;
use crate::error::{BitError, Result};

const MAGIC: &[u8; 8] = b"BITCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    env_steps: usize,
    params: Vec<ParamEntry>,
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub config: RunConfig,
    pub env_steps: usize,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// Rebuilds an agent with the stored parameters.
    pub fn into_agent(self) -> Result<Agent<f32>> {
        let mut agent = Agent::new(&self.config)?;
        agent.load_params(&self.params)?;
        Ok(agent)
    }
}

pub fn save(path: &Path, agent: &Agent<f32>, env_steps: usize) -> Result<()> {
    let store = agent.store();
    let header = Header {
        config: agent.config().clone(),
        env_steps,
        params: store
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 4 * store.numel() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| BitError::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    header.config.validate()?;
    let mut offset = 20 + len;
    let mut params = ParamStore::new();
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad("truncated data"))?;
        offset += 4 * n;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(entry.name, Tensor::from_vec(&entry.shape, data)?, entry.trainable);
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint {
        config: header.config,
        env_steps: header.env_steps,
        params,
    })
}

/// SHA-256 of a file, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_restores_agent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt_7.bin");
        let mut config = RunConfig::toy();
        config.seed = 11;
        let agent = Agent::<f32>::new(&config).unwrap();
        save(&path, &agent, 7).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.env_steps, 7);
        assert_eq!(ck.config, config);
        let restored = ck.into_agent().unwrap();
        assert_eq!(restored.params_hash(""), agent.params_hash(""));
        save(&dir.path().join("again.bin"), &restored, 7).unwrap();
        assert_eq!(
            file_hash(&path).unwrap(),
            file_hash(&dir.path().join("again.bin")).unwrap()
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let agent = Agent::<f32>::new(&RunConfig::toy()).unwrap();
        save(&path, &agent, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(BitError::Format(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load(&path), Err(BitError::Format(_))));
    }
}
