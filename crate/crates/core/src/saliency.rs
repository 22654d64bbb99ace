//! Input-gradient saliency of the online encoder.

use std::path::Path;

use bit_nn::{Graph, Tracking};
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::error::{BitError, Result};
use crate::image_io;
use crate::observation::Observation;

/// `H x W` map in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl SaliencyMap {
    /// Mean value over the pixels where `mask` is set, and over the rest.
    pub fn mean_inside_outside(&self, mask: &[bool]) -> Result<(f64, f64)> {
        if mask.len() != self.values.len() {
            return Err(BitError::Argument("mask size differs from the map".into()));
        }
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.values.iter().zip(mask) {
            if m {
                si += v as f64;
                ni += 1;
            } else {
                so += v as f64;
                no += 1;
            }
        }
        Ok((si / ni.max(1) as f64, so / no.max(1) as f64))
    }

    /// Writes `<stem>.png` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        image_io::write_gray(&dir.join(format!("{stem}.png")), self.width, self.height, &self.values)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string(self)?)?;
        Ok(())
    }
}

/// Min-max normalization to `[0, 1]`; all zeros when the input is constant
/// or not finite.
pub fn normalize(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range.is_finite() && range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / range) as f32).collect()
}

/// `|d ||f(o)||^2 / d o|`, summed over channels and stacked frames and
/// min-max normalized.
pub fn saliency_map(agent: &Agent<f32>, obs: &Observation) -> Result<SaliencyMap> {
    let [c, h, w] = obs.shape();
    if obs.shape() != agent.extractor().obs_shape() {
        return Err(BitError::Argument(format!(
            "observation {:?} does not match the encoder input {:?}",
            obs.shape(),
            agent.extractor().obs_shape()
        )));
    }
    let mut g = Graph::<f64>::with_tracking(Tracking::Nothing);
    let store = agent.store().cast::<f64>();
    let x = g.input_with_grad(obs.to_tensor().cast());
    let z = agent.extractor().encode(&mut g, &store, x)?;
    let sq = g.square(z);
    let loss = g.sum_all(sq);
    let grad = g.backward(loss).wrt(x);
    let plane = h * w;
    let mut acc = vec![0.0f64; plane];
    for ch in 0..c {
        for (a, v) in acc.iter_mut().zip(&grad.data()[ch * plane..(ch + 1) * plane]) {
            *a += v.abs();
        }
    }
    Ok(SaliencyMap {
        height: h,
        width: w,
        values: normalize(&acc),
    })
}
