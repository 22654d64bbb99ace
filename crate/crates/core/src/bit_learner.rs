//! Pseudo-action prediction and forward / backward latent transition
//! heads, and the joint squared-error objective over them.

use bit_nn::{lit, Graph, Mlp, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::LossMask;
use crate::error::{BitError, Result};
use crate::feature_extractor::FeatureExtractor;

pub const HEADS_PREFIX: &str = "bit.";
pub const ACTION_HEAD: &str = "bit.action";
pub const FORWARD_HEAD: &str = "bit.fwd";
pub const BACKWARD_HEAD: &str = "bit.bwd";

/// Inverse model `h`, forward model `F` and backward model `B`, each a
/// single-hidden-layer network.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionHeads {
    action: Mlp,
    forward: Mlp,
    backward: Mlp,
    proj_dim: usize,
    action_dim: usize,
}

impl TransitionHeads {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        proj_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let action = Mlp::init(store, ACTION_HEAD, &[2 * proj_dim, hidden, action_dim], true, rng);
        let forward = Mlp::init(
            store,
            FORWARD_HEAD,
            &[proj_dim + action_dim, hidden, proj_dim],
            true,
            rng,
        );
        let backward = Mlp::init(
            store,
            BACKWARD_HEAD,
            &[action_dim + proj_dim, hidden, proj_dim],
            true,
            rng,
        );
        TransitionHeads {
            action,
            forward,
            backward,
            proj_dim,
            action_dim,
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn check(&self, g: &Graph<impl Scalar>, v: Var, width: usize, what: &str) -> Result<usize> {
        let shape = g.value(v).shape();
        if shape.len() != 2 || shape[1] != width {
            return Err(BitError::Argument(format!(
                "{what} must be [n, {width}], got {shape:?}"
            )));
        }
        Ok(shape[0])
    }

    fn check_pair<T: Scalar>(&self, g: &Graph<T>, a: (Var, usize, &str), b: (Var, usize, &str)) -> Result<()> {
        let na = self.check(g, a.0, a.1, a.2)?;
        let nb = self.check(g, b.0, b.1, b.2)?;
        if na != nb {
            return Err(BitError::Argument(format!("batch sizes differ: {na} vs {nb}")));
        }
        Ok(())
    }

    /// Pseudo action `tanh(h([z', z_next]))`, in `[-1, 1]`.
    pub fn predict_action<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_prime: Var,
        z_next: Var,
    ) -> Result<Var> {
        self.check_pair(g, (z_prime, self.proj_dim, "z'"), (z_next, self.proj_dim, "z_next"))?;
        let x = g.concat_cols(z_prime, z_next);
        let a = self.action.forward(g, store, x)?;
        Ok(g.tanh(a))
    }

    /// Next-latent prediction `F([z', a])`.
    pub fn forward_predict<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_prime: Var,
        action: Var,
    ) -> Result<Var> {
        self.check_pair(g, (z_prime, self.proj_dim, "z'"), (action, self.action_dim, "action"))?;
        let x = g.concat_cols(z_prime, action);
        Ok(self.forward.forward(g, store, x)?)
    }

    /// Current-latent prediction `B([a, z_next])`.
    pub fn backward_predict<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        action: Var,
        z_next: Var,
    ) -> Result<Var> {
        self.check_pair(
            g,
            (action, self.action_dim, "action"),
            (z_next, self.proj_dim, "z_next"),
        )?;
        let x = g.concat_cols(action, z_next);
        Ok(self.backward.forward(g, store, x)?)
    }
}

/// Scalar summary of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BitLossReport {
    pub l_action: f64,
    pub l_fwd: f64,
    pub l_bwd: f64,
    pub l_total: f64,
    /// Per-dimension variance of `z'` across the batch, averaged over dimensions.
    pub z_batch_variance: f64,
}

/// Batch inputs of the objective. `obs_aug` is the augmented view of `obs`.
pub struct BitInputs<'a, T> {
    pub obs_aug: &'a Tensor<T>,
    pub obs: &'a Tensor<T>,
    pub next_obs: &'a Tensor<T>,
    pub actions: &'a Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitOptions {
    pub mask: LossMask,
    pub detach_pseudo_action: bool,
    /// Flips the sign of the backward term. Only used to prove that the
    /// gradient check notices a broken objective.
    pub corrupt_bwd_sign: bool,
}

impl Default for BitOptions {
    fn default() -> Self {
        BitOptions {
            mask: LossMask::FULL,
            detach_pseudo_action: false,
            corrupt_bwd_sign: false,
        }
    }
}

/// Nodes of a built objective.
#[derive(Clone, Copy, Debug)]
pub struct BitLossNodes {
    pub total: Var,
    pub l_action: Var,
    pub l_fwd: Var,
    pub l_bwd: Var,
    pub z_prime: Var,
    pub pseudo_action: Var,
}

/// Records the full objective in `g`. Masked terms are still evaluated
/// (for logging) but do not enter `total`.
pub fn build_bit_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fx: &FeatureExtractor,
    heads: &TransitionHeads,
    inputs: &BitInputs<'_, T>,
    options: BitOptions,
) -> Result<BitLossNodes> {
    let n = inputs.obs.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(BitError::Argument("empty batch".into()));
    }
    for (what, t) in [
        ("augmented observations", inputs.obs_aug),
        ("next observations", inputs.next_obs),
    ] {
        if t.shape() != inputs.obs.shape() {
            return Err(BitError::Argument(format!(
                "{what} shape {:?} differs from {:?}",
                t.shape(),
                inputs.obs.shape()
            )));
        }
    }
    if inputs.actions.shape() != [n, heads.action_dim()] {
        return Err(BitError::Argument(format!(
            "actions must be [{n}, {}], got {:?}",
            heads.action_dim(),
            inputs.actions.shape()
        )));
    }

    let o_aug = g.input(inputs.obs_aug.clone());
    let o = g.input(inputs.obs.clone());
    let o_next = g.input(inputs.next_obs.clone());
    let a_true = g.input(inputs.actions.clone());

    let z_prime = fx.online_project(g, store, o_aug)?;
    let z_t = fx.target_project(g, store, o)?;
    let z_next = fx.target_project(g, store, o_next)?;

    let a_hat = heads.predict_action(g, store, z_prime, z_next)?;
    let a_in = if options.mask.true_action_input {
        a_true
    } else if options.detach_pseudo_action {
        g.stop_gradient(a_hat)
    } else {
        a_hat
    };
    let z_next_hat = heads.forward_predict(g, store, z_prime, a_in)?;
    let z_t_hat = heads.backward_predict(g, store, a_in, z_next)?;

    let l_action = mse(g, a_hat, a_true);
    let l_fwd = mse(g, z_next_hat, z_next);
    let mut l_bwd = mse(g, z_t_hat, z_t);
    if options.corrupt_bwd_sign {
        l_bwd = g.scale(l_bwd, lit(-1.0));
    }

    let active: Vec<Var> = [
        (options.mask.action, l_action),
        (options.mask.fwd, l_fwd),
        (options.mask.bwd, l_bwd),
    ]
    .into_iter()
    .filter_map(|(on, v)| on.then_some(v))
    .collect();
    let total = match active.split_first() {
        None => g.scale(l_action, T::zero()),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &v| g.add(acc, v)),
    };
    Ok(BitLossNodes {
        total,
        l_action,
        l_fwd,
        l_bwd,
        z_prime,
        pseudo_action: a_hat,
    })
}

fn mse<T: Scalar>(g: &mut Graph<T>, prediction: Var, target: Var) -> Var {
    let d = g.sub(prediction, target);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// Reads the scalar report off a built objective. Masked terms report 0.
pub fn report<T: Scalar>(g: &Graph<T>, nodes: &BitLossNodes, mask: LossMask) -> BitLossReport {
    let read = |on: bool, v: Var| if on { g.value(v).item().as_f64() } else { 0.0 };
    BitLossReport {
        l_action: read(mask.action, nodes.l_action),
        l_fwd: read(mask.fwd, nodes.l_fwd),
        l_bwd: read(mask.bwd, nodes.l_bwd),
        l_total: g.value(nodes.total).item().as_f64(),
        z_batch_variance: batch_variance(g.value(nodes.z_prime)),
    }
}

/// Mean over columns of the across-row variance of a `[n, d]` tensor.
pub fn batch_variance<T: Scalar>(z: &Tensor<T>) -> f64 {
    let (n, d) = (z.dim(0), z.dim(1));
    if n == 0 || d == 0 {
        return 0.0;
    }
    let data = z.data();
    let mut acc = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| data[i * d + j].as_f64()).sum::<f64>() / n as f64;
        acc += (0..n).map(|i| (data[i * d + j].as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
    }
    acc / d as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, NetworkConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heads(seed: u64) -> (ParamStore<f64>, TransitionHeads) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = TransitionHeads::init(&mut store, 3, 2, 16, &mut rng);
        (store, h)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn head_shapes_bounds_and_determinism() {
        let (store, h) = heads(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::inference();
        let zp = g.input(random(&[5, 3], &mut rng, 50.0));
        let zn = g.input(random(&[5, 3], &mut rng, 50.0));
        let a = h.predict_action(&mut g, &store, zp, zn).unwrap();
        assert_eq!(g.value(a).shape(), &[5, 2]);
        assert!(g.value(a).data().iter().all(|v| v.abs() <= 1.0));
        let f1 = h.forward_predict(&mut g, &store, zp, a).unwrap();
        let f2 = h.forward_predict(&mut g, &store, zp, a).unwrap();
        assert_eq!(g.value(f1).shape(), &[5, 3]);
        assert_eq!(g.value(f1).data(), g.value(f2).data());
        let b = h.backward_predict(&mut g, &store, a, zn).unwrap();
        assert_eq!(g.value(b).shape(), &[5, 3]);
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let (store, h) = heads(1);
        let mut g = Graph::<f64>::inference();
        let zp = g.input(Tensor::zeros(&[2, 4]));
        let zn = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            h.predict_action(&mut g, &store, zp, zn),
            Err(BitError::Argument(_))
        ));
        let zp = g.input(Tensor::zeros(&[3, 3]));
        assert!(matches!(
            h.predict_action(&mut g, &store, zp, zn),
            Err(BitError::Argument(_))
        ));
        let a = g.input(Tensor::zeros(&[2, 3]));
        assert!(h.forward_predict(&mut g, &store, zn, a).is_err());
    }

    #[test]
    fn forward_parameters_do_not_touch_backward_head() {
        let (mut store, h) = heads(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[4, 2], &mut rng, 1.0);
        let z = random(&[4, 3], &mut rng, 1.0);
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::inference();
            let (av, zv) = (g.input(a.clone()), g.input(z.clone()));
            let b = h.backward_predict(&mut g, store, av, zv).unwrap();
            g.value(b).clone()
        };
        let before = run(&store);
        for v in store.value_mut("bit.fwd.l0.weight").unwrap().data_mut() {
            *v += 1.0;
        }
        assert_eq!(before, run(&store));
    }

    #[test]
    fn forward_head_gradient_is_nonzero() {
        let (store, h) = heads(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let zp = g.input(random(&[4, 3], &mut rng, 1.0));
        let a = g.input(random(&[4, 2], &mut rng, 1.0));
        let f = h.forward_predict(&mut g, &store, zp, a).unwrap();
        let sq = g.square(f);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        for name in ["bit.fwd.l0.weight", "bit.fwd.l1.weight", "bit.fwd.l1.bias"] {
            let gr = grads.param(name).unwrap();
            assert!(gr.data().iter().any(|v| v.abs() > 1e-8), "{name}");
        }
    }

    #[test]
    fn squared_error_arithmetic() {
        let mut g = Graph::<f64>::inference();
        let p = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 3.0]).unwrap());
        let t = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap());
        let l = mse(&mut g, p, t);
        assert_eq!(g.value(l).item(), 2.0);
    }

    #[test]
    fn batch_variance_matches_direct_formula() {
        let z = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0f64]).unwrap();
        assert!((batch_variance(&z) - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    fn system(seed: u64) -> (ParamStore<f64>, FeatureExtractor, TransitionHeads) {
        let net = NetworkConfig {
            conv_filters: 2,
            conv_strides: vec![2],
            latent_dim: 4,
            proj_hidden: 6,
            proj_dim: 4,
            ..NetworkConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fx = FeatureExtractor::init(&mut store, [3, 7, 7], &net, &mut rng).unwrap();
        let h = TransitionHeads::init(&mut store, 4, 2, 6, &mut rng);
        (store, fx, h)
    }

    #[test]
    fn masks_select_terms_and_report_zero_for_dropped_ones() {
        let (store, fx, h) = system(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let obs = random(&[3, 3, 7, 7], &mut rng, 1.0);
        let next = random(&[3, 3, 7, 7], &mut rng, 1.0);
        let actions = random(&[3, 2], &mut rng, 1.0);
        let inputs = BitInputs {
            obs_aug: &obs,
            obs: &obs,
            next_obs: &next,
            actions: &actions,
        };
        for ablation in Ablation::ALL {
            let mask = ablation.mask();
            let mut g = Graph::inference();
            let options = BitOptions {
                mask,
                ..BitOptions::default()
            };
            let nodes = build_bit_loss(&mut g, &store, &fx, &h, &inputs, options).unwrap();
            let r = report(&g, &nodes, mask);
            assert_eq!(r.l_total, r.l_action + r.l_fwd + r.l_bwd, "{ablation}");
            assert_eq!(r.l_action > 0.0, mask.action, "{ablation}");
            assert_eq!(r.l_fwd > 0.0, mask.fwd, "{ablation}");
            assert_eq!(r.l_bwd > 0.0, mask.bwd, "{ablation}");
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let (store, fx, h) = system(9);
        let obs = Tensor::<f64>::zeros(&[0, 3, 7, 7]);
        let actions = Tensor::zeros(&[0, 2]);
        let inputs = BitInputs {
            obs_aug: &obs,
            obs: &obs,
            next_obs: &obs,
            actions: &actions,
        };
        let mut g = Graph::inference();
        let err = build_bit_loss(&mut g, &store, &fx, &h, &inputs, BitOptions::default());
        assert!(matches!(err, Err(BitError::Argument(_))));
    }

    #[test]
    fn reward_never_enters_and_action_loss_ignores_transition_heads() {
        let (store, fx, h) = system(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let obs = random(&[2, 3, 7, 7], &mut rng, 1.0);
        let next = random(&[2, 3, 7, 7], &mut rng, 1.0);
        let actions = random(&[2, 2], &mut rng, 1.0);
        let inputs = BitInputs {
            obs_aug: &obs,
            obs: &obs,
            next_obs: &next,
            actions: &actions,
        };
        let options = BitOptions {
            mask: Ablation::OnlyAction.mask(),
            ..BitOptions::default()
        };
        let mut g = Graph::new();
        let nodes = build_bit_loss(&mut g, &store, &fx, &h, &inputs, options).unwrap();
        let grads = g.backward(nodes.total).params();
        for (name, gr) in &grads {
            let touched = gr.data().iter().any(|v| *v != 0.0);
            if name.starts_with("bit.fwd") || name.starts_with("bit.bwd") {
                assert!(!touched, "{name}");
            }
        }
        assert!(grads["bit.action.l0.weight"].data().iter().any(|v| *v != 0.0));
        assert!(grads["online.encoder.fc.weight"].data().iter().any(|v| *v != 0.0));
    }
}
