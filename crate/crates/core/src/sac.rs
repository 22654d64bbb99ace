//! Soft actor-critic on encoder features: squashed-Gaussian actor, twin
//! critics with momentum targets, learned temperature.

use bit_nn::{lit, Graph, Mlp, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::config::{NetworkConfig, SacConfig};
use crate::error::{BitError, Result};
use crate::feature_extractor::ema;

pub const ACTOR: &str = "sac.actor";
pub const Q1: &str = "sac.q1";
pub const Q2: &str = "sac.q2";
pub const Q1_TARGET: &str = "sac.q1_target";
pub const Q2_TARGET: &str = "sac.q2_target";
pub const LOG_ALPHA: &str = "sac.log_alpha";

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// `y = r + gamma (1 - done) v` for one transition, `v` being the soft
/// value `min Q'(s', a') - alpha log pi(a' | s')`.
pub fn soft_bellman_target(reward: f64, done: f64, gamma: f64, soft_value: f64) -> f64 {
    reward + gamma * (1.0 - done) * soft_value
}

/// Nodes of one policy evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PolicyNodes {
    /// `tanh(mean)`.
    pub mean_action: Var,
    /// Reparameterized squashed sample; only present when noise was given.
    pub action: Option<Var>,
    /// `[n, 1]` log-density of `action`.
    pub log_prob: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sac {
    actor: Mlp,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    latent_dim: usize,
    action_dim: usize,
    log_std_min: f64,
    log_std_max: f64,
}

impl Sac {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        latent_dim: usize,
        action_dim: usize,
        net: &NetworkConfig,
        cfg: &SacConfig,
        rng: &mut R,
    ) -> Self {
        let (ha, hc) = (net.actor_hidden, net.critic_hidden);
        let actor = Mlp::init(store, ACTOR, &[latent_dim, ha, ha, 2 * action_dim], true, rng);
        let critic_dims = [latent_dim + action_dim, hc, hc, 1];
        let q1 = Mlp::init(store, Q1, &critic_dims, true, rng);
        let q2 = Mlp::init(store, Q2, &critic_dims, true, rng);
        let q1_target = q1.renamed(Q1, Q1_TARGET);
        let q2_target = q2.renamed(Q2, Q2_TARGET);
        for (src, dst) in [(Q1, Q1_TARGET), (Q2, Q2_TARGET)] {
            let prefix = format!("{src}.");
            let names: Vec<String> = store.names_with_prefix(&prefix).map(str::to_string).collect();
            for name in names {
                let value = store.value(&name).unwrap().clone();
                store.insert(name.replacen(src, dst, 1), value, false);
            }
        }
        store.insert(LOG_ALPHA, Tensor::scalar(lit(cfg.init_temperature.ln())), true);
        Sac {
            actor,
            q1,
            q2,
            q1_target,
            q2_target,
            latent_dim,
            action_dim,
            log_std_min: cfg.log_std_min,
            log_std_max: cfg.log_std_max,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn alpha<T: Scalar>(store: &ParamStore<T>) -> Result<f64> {
        Ok(store.value(LOG_ALPHA)?.item().as_f64().exp())
    }

    fn check_latent<T: Scalar>(&self, g: &Graph<T>, z: Var) -> Result<usize> {
        let shape = g.value(z).shape();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(BitError::Argument(format!(
                "policy input must be [n, {}], got {shape:?}",
                self.latent_dim
            )));
        }
        Ok(shape[0])
    }

    /// Evaluates the policy head. With `noise` (standard normal, `[n, A]`)
    /// also draws a reparameterized action and its log-density.
    pub fn policy<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        noise: Option<&Tensor<T>>,
    ) -> Result<PolicyNodes> {
        let n = self.check_latent(g, z)?;
        let out = self.actor.forward(g, store, z)?;
        let mean = g.slice_cols(out, 0, self.action_dim);
        let mean_action = g.tanh(mean);
        let Some(noise) = noise else {
            return Ok(PolicyNodes {
                mean_action,
                action: None,
                log_prob: None,
            });
        };
        if noise.shape() != [n, self.action_dim] {
            return Err(BitError::Argument(format!(
                "noise must be [{n}, {}], got {:?}",
                self.action_dim,
                noise.shape()
            )));
        }
        // log_std squashed smoothly into [min, max].
        let raw = g.slice_cols(out, self.action_dim, self.action_dim);
        let t = g.tanh(raw);
        let t = g.add_scalar(t, T::one());
        let t = g.scale(t, lit(0.5 * (self.log_std_max - self.log_std_min)));
        let log_std = g.add_scalar(t, lit(self.log_std_min));
        let std = g.exp(log_std);

        let eps = g.input(noise.clone());
        let spread = g.mul(std, eps);
        let u = g.add(mean, spread);
        let action = g.tanh(u);

        let gauss_const: Vec<T> = noise
            .data()
            .chunks(self.action_dim)
            .map(|row| {
                lit(row.iter().map(|e| -0.5 * e.as_f64() * e.as_f64()).sum::<f64>()
                    - HALF_LOG_TWO_PI * self.action_dim as f64)
            })
            .collect();
        let gauss_const = g.input(Tensor::from_vec(&[n, 1], gauss_const).unwrap());
        let neg_log_std = g.scale(log_std, lit(-1.0));
        let log_gauss = g.sum_cols(neg_log_std);
        let log_gauss = g.add(log_gauss, gauss_const);

        // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable for large |u|.
        let m2u = g.scale(u, lit(-2.0));
        let sp = g.softplus(m2u);
        let s = g.add(u, sp);
        let s = g.scale(s, lit(-1.0));
        let s = g.add_scalar(s, lit(std::f64::consts::LN_2));
        let jac = g.sum_cols(s);
        let jac = g.scale(jac, lit(2.0));
        let log_prob = g.sub(log_gauss, jac);
        Ok(PolicyNodes {
            mean_action,
            action: Some(action),
            log_prob: Some(log_prob),
        })
    }

    /// Both critics (or both targets) at `(z, a)`, each `[n, 1]`.
    pub fn q_values<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        action: Var,
        target: bool,
    ) -> Result<(Var, Var)> {
        let n = self.check_latent(g, z)?;
        if g.value(action).shape() != [n, self.action_dim] {
            return Err(BitError::Argument(format!(
                "critic action must be [{n}, {}], got {:?}",
                self.action_dim,
                g.value(action).shape()
            )));
        }
        let x = g.concat_cols(z, action);
        let (a, b) = if target {
            (&self.q1_target, &self.q2_target)
        } else {
            (&self.q1, &self.q2)
        };
        Ok((a.forward(g, store, x)?, b.forward(g, store, x)?))
    }

    /// Bellman targets `[n, 1]` from next-state features, evaluated without
    /// any gradient bookkeeping.
    pub fn critic_target<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z_next: &Tensor<T>,
        rewards: &[f32],
        dones: &[f32],
        noise: &Tensor<T>,
        gamma: f64,
    ) -> Result<Tensor<T>> {
        let n = z_next.shape().first().copied().unwrap_or(0);
        if rewards.len() != n || dones.len() != n {
            return Err(BitError::Argument("reward / done length differs from batch".into()));
        }
        let alpha = Self::alpha(store)?;
        let mut g = Graph::inference();
        let z = g.input(z_next.clone());
        let pol = self.policy(&mut g, store, z, Some(noise))?;
        let (a, logp) = (pol.action.unwrap(), pol.log_prob.unwrap());
        let (q1, q2) = self.q_values(&mut g, store, z, a, true)?;
        let q = g.min(q1, q2);
        let (q, logp) = (g.value(q).data(), g.value(logp).data());
        let y = (0..n)
            .map(|i| {
                let soft = q[i].as_f64() - alpha * logp[i].as_f64();
                lit(soft_bellman_target(rewards[i] as f64, dones[i] as f64, gamma, soft))
            })
            .collect();
        Ok(Tensor::from_vec(&[n, 1], y).unwrap())
    }

    /// `mean((Q1 - y)^2) + mean((Q2 - y)^2)`.
    pub fn critic_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        action: Var,
        y: &Tensor<T>,
    ) -> Result<Var> {
        let (q1, q2) = self.q_values(g, store, z, action, false)?;
        if g.value(q1).shape() != y.shape() {
            return Err(BitError::Argument(format!(
                "target shape {:?} differs from critic output",
                y.shape()
            )));
        }
        let y = g.input(y.clone());
        let terms = [q1, q2].map(|q| {
            let d = g.sub(q, y);
            let d = g.square(d);
            g.mean_all(d)
        });
        Ok(g.add(terms[0], terms[1]))
    }

    /// `mean(alpha log pi - min Q)` with the temperature held fixed.
    /// Returns the loss and the `[n, 1]` log-densities.
    pub fn actor_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        noise: &Tensor<T>,
    ) -> Result<(Var, Var)> {
        let alpha = Self::alpha(store)?;
        let pol = self.policy(g, store, z, Some(noise))?;
        let (a, logp) = (pol.action.unwrap(), pol.log_prob.unwrap());
        let (q1, q2) = self.q_values(g, store, z, a, false)?;
        let q = g.min(q1, q2);
        let weighted = g.scale(logp, lit(alpha));
        let diff = g.sub(weighted, q);
        Ok((g.mean_all(diff), logp))
    }

    /// Temperature objective `mean(alpha (-log pi - target_entropy))` with the
    /// log-densities treated as constants.
    pub fn alpha_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        log_probs: &Tensor<T>,
        target_entropy: f64,
    ) -> Result<Var> {
        let n = log_probs.len().max(1) as f64;
        let c = log_probs
            .data()
            .iter()
            .map(|l| -l.as_f64() - target_entropy)
            .sum::<f64>()
            / n;
        let log_alpha = g.param(store, LOG_ALPHA)?;
        let alpha = g.exp(log_alpha);
        let loss = g.scale(alpha, lit(c));
        Ok(g.sum_all(loss))
    }

    /// Moves both critic targets toward the critics by `tau`.
    pub fn soft_update_targets<T: Scalar>(&self, store: &mut ParamStore<T>, tau: f64) -> Result<()> {
        ema(store, "sac.q1.", "sac.q1_target.", tau)?;
        ema(store, "sac.q2.", "sac.q2_target.", tau)
    }
}
