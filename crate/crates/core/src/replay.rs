//! Fixed-capacity FIFO transition store.
//!
//! Pixels are kept as bytes and expanded to `[0, 1]` floats when sampled.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use bit_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::ACTION_DIM;
use crate::error::{BitError, Result};
use crate::observation::Observation;

const MAGIC: &[u8; 8] = b"BITRPLY\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: [f32; ACTION_DIM],
    pub reward: f32,
    pub next_obs: Observation,
    pub done: bool,
}

/// Transitions stacked along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    /// `[n, C, H, W]`
    pub obs: Tensor<f32>,
    /// `[n, action_dim]`
    pub actions: Tensor<f32>,
    pub rewards: Vec<f32>,
    /// `[n, C, H, W]`
    pub next_obs: Tensor<f32>,
    /// 1.0 for terminal transitions.
    pub dones: Vec<f32>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(ts: &[Transition]) -> Result<Self> {
        if ts.is_empty() {
            return Err(BitError::Argument("empty transition list".into()));
        }
        let obs: Vec<Observation> = ts.iter().map(|t| t.obs.clone()).collect();
        let next: Vec<Observation> = ts.iter().map(|t| t.next_obs.clone()).collect();
        Ok(TransitionBatch {
            obs: Observation::stack(&obs)?,
            actions: Tensor::from_vec(&[ts.len(), ACTION_DIM], ts.iter().flat_map(|t| t.action).collect()).unwrap(),
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_obs: Observation::stack(&next)?,
            dones: ts.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        })
    }

    /// Rows `rows` of this batch, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        TransitionBatch {
            obs: self.obs.select_rows(rows),
            actions: self.actions.select_rows(rows),
            rewards: rows.iter().map(|&r| self.rewards[r]).collect(),
            next_obs: self.next_obs.select_rows(rows),
            dones: rows.iter().map(|&r| self.dones[r]).collect(),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_shape: [usize; 3],
    obs: Vec<u8>,
    next_obs: Vec<u8>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    dones: Vec<u8>,
    /// Slot the next push writes once the buffer is full.
    head: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_shape: [usize; 3], seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(BitError::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_shape,
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            head: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        self.obs_shape
    }

    fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        for o in [&t.obs, &t.next_obs] {
            if o.shape() != self.obs_shape {
                return Err(BitError::Argument(format!(
                    "observation shape {:?}, buffer expects {:?}",
                    o.shape(),
                    self.obs_shape
                )));
            }
        }
        if !t.reward.is_finite() {
            return Err(BitError::Argument(format!("non-finite reward {}", t.reward)));
        }
        if t.action.iter().any(|a| !a.is_finite() || a.abs() > 1.0) {
            return Err(BitError::Argument(format!("action {:?} outside [-1, 1]", t.action)));
        }
        let n = self.obs_len();
        let obs = t.obs.data().iter().map(|&v| quantize(v));
        let next = t.next_obs.data().iter().map(|&v| quantize(v));
        if self.len() < self.capacity {
            self.obs.extend(obs);
            self.next_obs.extend(next);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.dones.push(t.done as u8);
        } else {
            let i = self.head;
            for (dst, v) in self.obs[i * n..(i + 1) * n].iter_mut().zip(obs) {
                *dst = v;
            }
            for (dst, v) in self.next_obs[i * n..(i + 1) * n].iter_mut().zip(next) {
                *dst = v;
            }
            self.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.dones[i] = t.done as u8;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// Stored transition `i` in insertion order (0 = oldest).
    pub fn get(&self, i: usize) -> Option<Transition> {
        if i >= self.len() {
            return None;
        }
        let slot = if self.len() < self.capacity {
            i
        } else {
            (self.head + i) % self.capacity
        };
        Some(self.slot(slot))
    }

    fn slot(&self, s: usize) -> Transition {
        let n = self.obs_len();
        let [c, h, w] = self.obs_shape;
        let expand = |bytes: &[u8]| bytes.iter().map(|&b| b as f32 / 255.0).collect::<Vec<_>>();
        Transition {
            obs: Observation::new(c, h, w, expand(&self.obs[s * n..(s + 1) * n])).unwrap(),
            action: [self.actions[s * ACTION_DIM], self.actions[s * ACTION_DIM + 1]],
            reward: self.rewards[s],
            next_obs: Observation::new(c, h, w, expand(&self.next_obs[s * n..(s + 1) * n])).unwrap(),
            done: self.dones[s] != 0,
        }
    }

    /// Storage slots for `n` uniform draws with replacement.
    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || self.len() < n {
            return Err(BitError::NotReady {
                size: self.len(),
                requested: n,
            });
        }
        let len = self.len();
        Ok((0..n).map(|_| self.rng.random_range(0..len)).collect())
    }

    pub fn sample(&mut self, n: usize) -> Result<TransitionBatch> {
        let idx = self.sample_indices(n)?;
        Ok(self.gather(&idx))
    }

    fn gather(&self, idx: &[usize]) -> TransitionBatch {
        let n = self.obs_len();
        let [c, h, w] = self.obs_shape;
        let mut obs = Vec::with_capacity(idx.len() * n);
        let mut next = Vec::with_capacity(idx.len() * n);
        let mut actions = Vec::with_capacity(idx.len() * ACTION_DIM);
        for &s in idx {
            obs.extend(self.obs[s * n..(s + 1) * n].iter().map(|&b| b as f32 / 255.0));
            next.extend(self.next_obs[s * n..(s + 1) * n].iter().map(|&b| b as f32 / 255.0));
            actions.extend_from_slice(&self.actions[s * ACTION_DIM..(s + 1) * ACTION_DIM]);
        }
        TransitionBatch {
            obs: Tensor::from_vec(&[idx.len(), c, h, w], obs).unwrap(),
            actions: Tensor::from_vec(&[idx.len(), ACTION_DIM], actions).unwrap(),
            rewards: idx.iter().map(|&s| self.rewards[s]).collect(),
            next_obs: Tensor::from_vec(&[idx.len(), c, h, w], next).unwrap(),
            dones: idx.iter().map(|&s| self.dones[s] as f32).collect(),
        }
    }

    /// Writes the buffer as: magic, version, capacity, size, head, C, H, W,
    /// action dim (all little-endian u32/u64), then the raw arrays.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        for v in [self.capacity, self.len(), self.head] {
            f.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.obs_shape {
            f.write_all(&(v as u32).to_le_bytes())?;
        }
        f.write_all(&(ACTION_DIM as u32).to_le_bytes())?;
        f.write_all(&self.obs)?;
        f.write_all(&self.next_obs)?;
        for a in &self.actions {
            f.write_all(&a.to_le_bytes())?;
        }
        for r in &self.rewards {
            f.write_all(&r.to_le_bytes())?;
        }
        f.write_all(&self.dones)?;
        f.flush()?;
        Ok(())
    }

    /// Reads a buffer written by [`save`](Self::save). Sampling restarts
    /// from `seed`.
    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let mut f = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(BitError::Format("not a replay snapshot".into()));
        }
        let version = read_u32(&mut f)?;
        if version != VERSION {
            return Err(BitError::Format(format!("unsupported replay version {version}")));
        }
        let capacity = read_u64(&mut f)? as usize;
        let size = read_u64(&mut f)? as usize;
        let head = read_u64(&mut f)? as usize;
        let obs_shape = [
            read_u32(&mut f)? as usize,
            read_u32(&mut f)? as usize,
            read_u32(&mut f)? as usize,
        ];
        let action_dim = read_u32(&mut f)? as usize;
        if action_dim != ACTION_DIM || size > capacity || capacity == 0 || (head != 0 && head >= capacity) {
            return Err(BitError::Format("inconsistent replay header".into()));
        }
        let n: usize = obs_shape.iter().product();
        let mut obs = vec![0u8; size * n];
        f.read_exact(&mut obs)?;
        let mut next_obs = vec![0u8; size * n];
        f.read_exact(&mut next_obs)?;
        let actions = read_f32s(&mut f, size * ACTION_DIM)?;
        let rewards = read_f32s(&mut f, size)?;
        let mut dones = vec![0u8; size];
        f.read_exact(&mut dones)?;
        Ok(ReplayBuffer {
            capacity,
            obs_shape,
            obs,
            next_obs,
            actions,
            rewards,
            dones,
            head,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
