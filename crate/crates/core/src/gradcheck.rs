//! Finite-difference verification of the representation objective and the
//! critic loss on a tiny double-precision model.

use std::time::Instant;

use bit_nn::numeric::{central_difference, max_relative_error};
use bit_nn::{ParamStore, Tensor, Tracking};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{bit_group, critic_group, Agent};
use crate::bit_learner::{BitInputs, BitOptions, ACTION_HEAD, BACKWARD_HEAD, FORWARD_HEAD};
use crate::config::RunConfig;
use crate::env::ACTION_DIM;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Flip the sign of the backward term in the analytic gradient only.
    pub corrupt_bwd_sign: bool,
    /// Zero the output layers so every prediction hits its target.
    pub perfect_prediction: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            batch: 2,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            corrupt_bwd_sign: false,
            perfect_prediction: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub objective: String,
    pub block: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
    pub bit_loss: f64,
    pub critic_loss: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failures(&self) -> Vec<&BlockCheck> {
        self.blocks.iter().filter(|b| !b.passed).collect()
    }

    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_relative_error).fold(0.0, f64::max)
    }
}

/// Sets every prediction to hit its target exactly: projections and
/// predictor collapse to their biases, the transition heads output those
/// constants, and the action head outputs zero. Pair it with all-zero
/// recorded actions.
pub fn make_perfect_predictor(store: &mut ParamStore<f64>) -> Result<()> {
    let last = |prefix: &str, store: &ParamStore<f64>| -> String {
        store
            .names_with_prefix(prefix)
            .filter(|n| n.ends_with(".weight"))
            .max()
            .unwrap()
            .trim_end_matches(".weight")
            .to_string()
    };
    let proj_target = last("target.proj.", store);
    let proj_online = last("online.proj.", store);
    let pred = last("online.pred.", store);
    let dim = store.value(&format!("{proj_target}.bias"))?.len();
    let c: Vec<f64> = (0..dim).map(|i| 0.25 * i as f64 - 0.3).collect();
    let c = Tensor::from_vec(&[dim], c)?;
    for layer in [proj_target, proj_online, pred] {
        zero(store, &format!("{layer}.weight"))?;
        store.set(&format!("{layer}.bias"), c.clone())?;
    }
    for head in [FORWARD_HEAD, BACKWARD_HEAD] {
        let layer = last(&format!("{head}."), store);
        zero(store, &format!("{layer}.weight"))?;
        store.set(&format!("{layer}.bias"), c.clone())?;
    }
    let layer = last(&format!("{ACTION_HEAD}."), store);
    zero(store, &format!("{layer}.weight"))?;
    zero(store, &format!("{layer}.bias"))?;
    Ok(())
}

fn zero(store: &mut ParamStore<f64>, name: &str) -> Result<()> {
    let shape = store.value(name)?.shape().to_vec();
    store.set(name, Tensor::zeros(&shape))?;
    Ok(())
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Toy configuration: 4-wide latents and projections, 8-wide hidden layers.
pub fn toy_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::toy();
    c.seed = seed;
    c
}

pub fn gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let started = Instant::now();
    let config = toy_config(options.seed);
    let mut agent = Agent::<f64>::new(&config)?;
    let mut store = agent.store().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x6AD);
    let [c, h, w] = config.env.obs_shape();
    let n = options.batch;
    let obs = uniform(&[n, c, h, w], 0.0, 1.0, &mut rng);
    let obs_aug = uniform(&[n, c, h, w], 0.0, 1.0, &mut rng);
    let next_obs = uniform(&[n, c, h, w], 0.0, 1.0, &mut rng);
    let mut actions = uniform(&[n, ACTION_DIM], -1.0, 1.0, &mut rng);
    let y = uniform(&[n, 1], -2.0, 0.0, &mut rng);
    if options.perfect_prediction {
        make_perfect_predictor(&mut store)?;
        actions = Tensor::zeros(&[n, ACTION_DIM]);
    }
    let inputs = BitInputs {
        obs_aug: &obs_aug,
        obs: &obs,
        next_obs: &next_obs,
        actions: &actions,
    };

    let mut blocks = Vec::new();

    // Representation objective: analytic (possibly corrupted) against the
    // numeric derivative of the true objective.
    agent.set_bit_options(BitOptions {
        corrupt_bwd_sign: options.corrupt_bwd_sign,
        ..BitOptions::default()
    });
    let (g, nodes) = agent.bit_objective(&store, &inputs, Tracking::Trainable)?;
    let analytic = g.backward(nodes.total).params();
    drop(g);
    agent.set_bit_options(BitOptions::default());
    let (g, nodes) = agent.bit_objective(&store, &inputs, Tracking::Nothing)?;
    let bit_loss = g.value(nodes.total).item();
    drop(g);
    for name in bit_group(&store) {
        let numeric = central_difference(&mut store, &name, options.step, |s| {
            let (g, nodes) = agent.bit_objective(s, &inputs, Tracking::Nothing).unwrap();
            g.value(nodes.total).item()
        });
        let err = max_relative_error(&analytic[&name], &numeric, options.floor);
        blocks.push(BlockCheck {
            objective: "bit".into(),
            block: name,
            max_relative_error: err,
            passed: err < options.tolerance,
        });
    }

    // Critic loss against fixed Bellman targets.
    let (g, loss, _) = agent.critic_objective(&store, &obs, &actions, &y, Tracking::Trainable)?;
    let critic_loss = g.value(loss).item();
    let analytic = g.backward(loss).params();
    drop(g);
    for name in critic_group(&store) {
        let numeric = central_difference(&mut store, &name, options.step, |s| {
            let (g, loss, _) = agent
                .critic_objective(s, &obs, &actions, &y, Tracking::Nothing)
                .unwrap();
            g.value(loss).item()
        });
        let err = max_relative_error(&analytic[&name], &numeric, options.floor);
        blocks.push(BlockCheck {
            objective: "critic".into(),
            block: name,
            max_relative_error: err,
            passed: err < options.tolerance,
        });
    }

    Ok(GradcheckReport {
        tolerance: options.tolerance,
        blocks,
        bit_loss,
        critic_loss,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Human-readable report, one line per block.
pub fn format_report(report: &GradcheckReport) -> String {
    let mut out = String::new();
    for b in &report.blocks {
        out.push_str(&format!(
            "{:<6} {:<36} {:>10.3e} {}\n",
            b.objective,
            b.block,
            b.max_relative_error,
            if b.passed { "ok" } else { "FAIL" }
        ));
    }
    out.push_str(&format!(
        "{} blocks, max relative error {:.3e} (tolerance {:.0e}), {:.2}s: {}\n",
        report.blocks.len(),
        report.max_error(),
        report.tolerance,
        report.seconds,
        if report.passed() { "PASS" } else { "FAIL" }
    ));
    out
}
