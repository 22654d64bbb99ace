//! The learner: encoder branches, transition heads and SAC sharing one
//! parameter store, plus their optimizers and update steps.

use bit_nn::{lit, Adam, Graph, ParamStore, Scalar, Tensor, Tracking};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::Augmenter;
use crate::bit_learner::{build_bit_loss, report, BitInputs, BitLossReport, BitOptions, TransitionHeads, HEADS_PREFIX};
use crate::config::RunConfig;
use crate::env::ACTION_DIM;
use crate::error::{BitError, Result};
use crate::feature_extractor::{FeatureExtractor, ONLINE_ENCODER, ONLINE_PREFIX, TARGET_PREFIX};
use crate::observation::Observation;
use crate::replay::TransitionBatch;
use crate::sac::{Sac, ACTOR, LOG_ALPHA};
use crate::seeding::stream;

/// Scalars logged for one RL update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
}

pub struct Agent<T: Scalar> {
    store: ParamStore<T>,
    fx: FeatureExtractor,
    heads: TransitionHeads,
    sac: Sac,
    critic_opt: Adam<T>,
    actor_opt: Adam<T>,
    alpha_opt: Adam<T>,
    bit_opt: Adam<T>,
    augmenter: Augmenter,
    config: RunConfig,
    bit_options: BitOptions,
    rng: ChaCha8Rng,
}

fn group<T: Scalar>(store: &ParamStore<T>, prefixes: &[&str]) -> Vec<String> {
    store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect()
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(BitError::Divergence(format!("{what} became {v}")))
    }
}

const CRITIC_PREFIXES: [&str; 3] = [ONLINE_ENCODER, "sac.q1.", "sac.q2."];
const BIT_PREFIXES: [&str; 2] = [ONLINE_PREFIX, HEADS_PREFIX];

impl<T: Scalar> Agent<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let net = &config.network;
        let obs_shape = config.env.obs_shape();
        let mut store = ParamStore::new();
        let mut init = stream(config.seed, "init");
        let fx = FeatureExtractor::init(&mut store, obs_shape, net, &mut init)?;
        let heads = TransitionHeads::init(&mut store, net.proj_dim, ACTION_DIM, net.head_hidden, &mut init);
        let sac = Sac::init(&mut store, net.latent_dim, ACTION_DIM, net, &config.sac, &mut init);
        let s = &config.sac;
        let critic_opt = Adam::new(group(&store, &CRITIC_PREFIXES), s.critic_lr);
        let actor_opt = Adam::new(group(&store, &[&format!("{ACTOR}.")]), s.actor_lr);
        let alpha_opt = Adam::new(vec![LOG_ALPHA.to_string()], s.alpha_lr).with_betas(s.alpha_beta1, 0.999);
        let bit_opt = Adam::new(group(&store, &BIT_PREFIXES), config.bit_lr);
        let augmenter = Augmenter::new(config.aug, config.env.height, config.env.width)?;
        Ok(Agent {
            store,
            fx,
            heads,
            sac,
            critic_opt,
            actor_opt,
            alpha_opt,
            bit_opt,
            augmenter,
            bit_options: BitOptions {
                mask: config.ablation.mask(),
                detach_pseudo_action: config.detach_pseudo_action,
                corrupt_bwd_sign: false,
            },
            config: config.clone(),
            rng: stream(config.seed, "updates"),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.fx
    }

    pub fn heads(&self) -> &TransitionHeads {
        &self.heads
    }

    pub fn sac(&self) -> &Sac {
        &self.sac
    }

    pub fn augmenter(&self) -> &Augmenter {
        &self.augmenter
    }

    pub fn bit_options(&self) -> BitOptions {
        self.bit_options
    }

    pub fn set_bit_options(&mut self, options: BitOptions) {
        self.bit_options = options;
    }

    /// Number of completed (rl, bit) optimizer steps.
    pub fn update_counts(&self) -> (u64, u64) {
        (self.critic_opt.steps(), self.bit_opt.steps())
    }

    fn noise(&mut self, n: usize) -> Tensor<T> {
        let data = (0..n * ACTION_DIM)
            .map(|_| lit(self.rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::from_vec(&[n, ACTION_DIM], data).unwrap()
    }

    /// Online encoder features of a `[n, C, H, W]` batch, no gradient.
    pub fn encode(&self, obs: &Tensor<f32>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.input(obs.cast());
        let z = self.fx.encode(&mut g, &self.store, x)?;
        Ok(g.value(z).clone())
    }

    /// Policy action for one observation. Stochastic actions draw from the
    /// agent's own generator.
    pub fn select_action(&mut self, obs: &Observation, deterministic: bool) -> Result<[f32; ACTION_DIM]> {
        let noise = (!deterministic).then(|| self.noise(1));
        self.action_with_noise(obs, noise.as_ref())
    }

    /// Policy action for one observation with explicit standard-normal noise
    /// (`None` gives the squashed mean).
    pub fn action_with_noise(&self, obs: &Observation, noise: Option<&Tensor<T>>) -> Result<[f32; ACTION_DIM]> {
        let mut g = Graph::inference();
        let x = g.input(obs.to_tensor().cast());
        let z = self.fx.encode(&mut g, &self.store, x)?;
        let p = self.sac.policy(&mut g, &self.store, z, noise)?;
        let a = g.value(p.action.unwrap_or(p.mean_action)).data();
        let mut out = [0.0f32; ACTION_DIM];
        for (o, v) in out.iter_mut().zip(a) {
            *o = v.as_f64().clamp(-1.0, 1.0) as f32;
        }
        Ok(out)
    }

    /// Critic loss graph on encoded `obs` against fixed targets `y`.
    pub fn critic_objective(
        &self,
        store: &ParamStore<T>,
        obs: &Tensor<T>,
        actions: &Tensor<T>,
        y: &Tensor<T>,
        tracking: Tracking,
    ) -> Result<(Graph<T>, bit_nn::Var, bit_nn::Var)> {
        let mut g = Graph::with_tracking(tracking);
        let x = g.input(obs.clone());
        let a = g.input(actions.clone());
        let z = self.fx.encode(&mut g, store, x)?;
        let loss = self.sac.critic_loss(&mut g, store, z, a, y)?;
        Ok((g, loss, z))
    }

    /// Representation objective on explicit inputs.
    pub fn bit_objective(
        &self,
        store: &ParamStore<T>,
        inputs: &BitInputs<'_, T>,
        tracking: Tracking,
    ) -> Result<(Graph<T>, crate::bit_learner::BitLossNodes)> {
        let mut g = Graph::with_tracking(tracking);
        let nodes = build_bit_loss(&mut g, store, &self.fx, &self.heads, inputs, self.bit_options)?;
        Ok((g, nodes))
    }

    fn rl_views(&mut self, batch: &TransitionBatch) -> Result<(Tensor<T>, Tensor<T>)> {
        if self.config.rl_augmented() {
            let (s1, s2) = (self.rng.next_u64(), self.rng.next_u64());
            let obs = self.augmenter.apply_batch(&batch.obs, s1)?;
            let next = self.augmenter.apply_batch(&batch.next_obs, s2)?;
            Ok((obs.cast(), next.cast()))
        } else {
            Ok((batch.obs.cast(), batch.next_obs.cast()))
        }
    }

    /// One critic, actor and temperature step, then the critic-target
    /// momentum update.
    pub fn rl_update(&mut self, batch: &TransitionBatch) -> Result<RlReport> {
        let n = batch.len();
        if n == 0 {
            return Err(BitError::Argument("empty batch".into()));
        }
        let (obs, next_obs) = self.rl_views(batch)?;
        let actions: Tensor<T> = batch.actions.cast();
        let next_noise = self.noise(n);
        let actor_noise = self.noise(n);

        let z_next = {
            let mut g = Graph::inference();
            let x = g.input(next_obs);
            let z = self.fx.encode(&mut g, &self.store, x)?;
            g.value(z).clone()
        };
        let y = self.sac.critic_target(
            &self.store,
            &z_next,
            &batch.rewards,
            &batch.dones,
            &next_noise,
            self.config.sac.gamma,
        )?;

        let (g, loss, z) =
            self.critic_objective(&self.store, &obs, &actions, &y, Tracking::prefixes(&CRITIC_PREFIXES))?;
        let critic_loss = g.value(loss).item().as_f64();
        check_finite("critic loss", critic_loss)?;
        let grads = g.backward(loss).params();
        let z = g.value(z).clone();
        drop(g);
        self.critic_opt.step(&mut self.store, &grads)?;

        // The actor sees detached features: no actor gradient reaches the encoder.
        let mut g = Graph::with_tracking(Tracking::prefixes(&[format!("{ACTOR}.")]));
        let zv = g.input(z);
        let (loss, logp) = self.sac.actor_loss(&mut g, &self.store, zv, &actor_noise)?;
        let actor_loss = g.value(loss).item().as_f64();
        check_finite("actor loss", actor_loss)?;
        let log_probs = g.value(logp).clone();
        let grads = g.backward(loss).params();
        drop(g);
        self.actor_opt.step(&mut self.store, &grads)?;

        let alpha = Sac::alpha(&self.store)?;
        let mut g = Graph::new();
        let loss = self
            .sac
            .alpha_loss(&mut g, &self.store, &log_probs, self.config.target_entropy())?;
        let grads = g.backward(loss).params();
        drop(g);
        let grads = grads.into_iter().filter(|(k, _)| k == LOG_ALPHA).collect();
        self.alpha_opt.step(&mut self.store, &grads)?;

        self.sac
            .soft_update_targets(&mut self.store, self.config.sac.critic_tau)?;
        let entropy = -log_probs.data().iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        Ok(RlReport {
            critic_loss,
            actor_loss,
            alpha,
            entropy,
        })
    }

    fn bit_views(&mut self, batch: &TransitionBatch) -> Result<Tensor<T>> {
        let seed = self.rng.next_u64();
        Ok(self.augmenter.apply_batch(&batch.obs, seed)?.cast())
    }

    /// Objective value on a batch without updating anything.
    pub fn bit_loss(&self, batch: &TransitionBatch, aug_seed: u64) -> Result<BitLossReport> {
        let obs_aug: Tensor<T> = self.augmenter.apply_batch(&batch.obs, aug_seed)?.cast();
        let (obs, next, actions) = (batch.obs.cast(), batch.next_obs.cast(), batch.actions.cast());
        let inputs = BitInputs {
            obs_aug: &obs_aug,
            obs: &obs,
            next_obs: &next,
            actions: &actions,
        };
        let (g, nodes) = self.bit_objective(&self.store, &inputs, Tracking::Nothing)?;
        Ok(report(&g, &nodes, self.bit_options.mask))
    }

    /// One joint step on the representation objective. Returns the
    /// pre-step report.
    pub fn bit_update(&mut self, batch: &TransitionBatch) -> Result<BitLossReport> {
        if batch.is_empty() {
            return Err(BitError::Argument("empty batch".into()));
        }
        let obs_aug = self.bit_views(batch)?;
        let (obs, next, actions) = (batch.obs.cast(), batch.next_obs.cast(), batch.actions.cast());
        let inputs = BitInputs {
            obs_aug: &obs_aug,
            obs: &obs,
            next_obs: &next,
            actions: &actions,
        };
        let (g, nodes) = self.bit_objective(&self.store, &inputs, Tracking::prefixes(&BIT_PREFIXES))?;
        let rep = report(&g, &nodes, self.bit_options.mask);
        check_finite("representation loss", rep.l_total)?;
        let grads = g.backward(nodes.total).params();
        drop(g);
        self.bit_opt.step(&mut self.store, &grads)?;
        Ok(rep)
    }

    /// Momentum update of the target branch.
    pub fn ema_update(&mut self) -> Result<()> {
        self.fx.ema_update(&mut self.store, self.config.epsilon)
    }

    /// SHA-256 over all parameters under `prefix` (names included).
    pub fn params_hash(&self, prefix: &str) -> String {
        hex(&Sha256::digest(self.store.digest_bytes(prefix)))
    }

    pub fn target_hash(&self) -> String {
        self.params_hash(TARGET_PREFIX)
    }

    /// Replaces every stored value from `other`; names and shapes must match.
    pub fn load_params(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(BitError::Format(format!(
                "checkpoint holds {} arrays, model has {}",
                other.len(),
                self.store.len()
            )));
        }
        for (name, p) in other.iter() {
            self.store.set(name, p.value.clone())?;
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameter names trained by the critic step.
pub fn critic_group<T: Scalar>(store: &ParamStore<T>) -> Vec<String> {
    group(store, &CRITIC_PREFIXES)
}

/// Parameter names trained by the representation step.
pub fn bit_group<T: Scalar>(store: &ParamStore<T>) -> Vec<String> {
    group(store, &BIT_PREFIXES)
}
