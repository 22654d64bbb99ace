//! Convolutional encoder with projection / prediction heads and a
//! momentum-averaged target copy.
//!
//! Parameter layout inside the shared store:
//! `online.encoder.*`, `online.proj.*`, `online.pred.*` are trained;
//! `target.encoder.*`, `target.proj.*` are frozen and only move through
//! [`FeatureExtractor::ema_update`].

use bit_nn::{lit, Conv2d, Graph, LayerNorm, Linear, Mlp, ParamStore, Scalar, Var};
use rand::Rng;

use crate::config::NetworkConfig;
use crate::error::{BitError, Result};

pub const ONLINE_PREFIX: &str = "online.";
pub const TARGET_PREFIX: &str = "target.";
pub const ONLINE_ENCODER: &str = "online.encoder.";
pub const TARGET_ENCODER: &str = "target.encoder.";
const ONLINE_PROJ: &str = "online.proj.";
const TARGET_PROJ: &str = "target.proj.";

/// Conv stack, linear map to the latent width and layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    convs: Vec<Conv2d>,
    fc: Linear,
    norm: LayerNorm,
    obs_shape: [usize; 3],
}

impl Encoder {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        obs_shape: [usize; 3],
        net: &NetworkConfig,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let [c, h, w] = obs_shape;
        let mut convs = Vec::with_capacity(net.conv_strides.len());
        let (mut in_c, mut oh, mut ow) = (c, h, w);
        for (i, &stride) in net.conv_strides.iter().enumerate() {
            if oh < net.kernel_size || ow < net.kernel_size {
                return Err(BitError::Config(format!(
                    "{h}x{w} observations too small for the encoder"
                )));
            }
            let conv = Conv2d::init(
                store,
                &format!("{prefix}conv{i}"),
                in_c,
                net.conv_filters,
                net.kernel_size,
                stride,
                trainable,
                rng,
            );
            oh = conv.output_size(oh);
            ow = conv.output_size(ow);
            in_c = net.conv_filters;
            convs.push(conv);
        }
        let flat = in_c * oh * ow;
        let fc = Linear::init(store, &format!("{prefix}fc"), flat, net.latent_dim, trainable, rng);
        let norm = LayerNorm::init(store, &format!("{prefix}norm"), net.latent_dim, trainable);
        Ok(Encoder {
            convs,
            fc,
            norm,
            obs_shape,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.fc.out_dim
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        self.obs_shape
    }

    /// `x: [n, C, H, W]` to `[n, latent_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 4 || shape[1..] != self.obs_shape[..] {
            return Err(BitError::Argument(format!(
                "encoder expects [n, {}, {}, {}], got {shape:?}",
                self.obs_shape[0], self.obs_shape[1], self.obs_shape[2]
            )));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, store, h)?;
            h = g.relu(h);
        }
        let h = g.flatten(h);
        let h = self.fc.forward(g, store, h)?;
        Ok(self.norm.forward(g, store, h)?)
    }

    fn renamed(&self, from: &str, to: &str) -> Self {
        let swap = |s: &str| s.replacen(from, to, 1);
        Encoder {
            convs: self
                .convs
                .iter()
                .map(|c| Conv2d {
                    name: swap(&c.name),
                    ..c.clone()
                })
                .collect(),
            fc: Linear {
                name: swap(&self.fc.name),
                ..self.fc.clone()
            },
            norm: LayerNorm {
                name: swap(&self.norm.name),
                ..self.norm.clone()
            },
            obs_shape: self.obs_shape,
        }
    }
}

/// Online encoder + projection + prediction, and the target encoder +
/// projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    online_encoder: Encoder,
    online_proj: Mlp,
    online_pred: Mlp,
    target_encoder: Encoder,
    target_proj: Mlp,
}

impl FeatureExtractor {
    /// Registers both branches; the target starts as an exact copy.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        obs_shape: [usize; 3],
        net: &NetworkConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let online_encoder = Encoder::init(store, ONLINE_ENCODER, obs_shape, net, true, rng)?;
        let dims = [net.latent_dim, net.proj_hidden, net.proj_dim];
        let online_proj = Mlp::init(store, "online.proj", &dims, true, rng);
        let online_pred = Mlp::init(
            store,
            "online.pred",
            &[net.proj_dim, net.proj_hidden, net.proj_dim],
            true,
            rng,
        );

        let target_encoder = online_encoder.renamed(ONLINE_ENCODER, TARGET_ENCODER);
        let target_proj = online_proj.renamed("online.proj", "target.proj");
        for (src, dst) in [(ONLINE_ENCODER, TARGET_ENCODER), (ONLINE_PROJ, TARGET_PROJ)] {
            let names: Vec<String> = store.names_with_prefix(src).map(str::to_string).collect();
            for name in names {
                let value = store.value(&name)?.clone();
                store.insert(name.replacen(src, dst, 1), value, false);
            }
        }
        Ok(FeatureExtractor {
            online_encoder,
            online_proj,
            online_pred,
            target_encoder,
            target_proj,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.online_encoder.latent_dim()
    }

    pub fn proj_dim(&self) -> usize {
        self.online_proj.out_dim()
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        self.online_encoder.obs_shape()
    }

    /// Online encoder output `f(o)`; the representation the policy sees.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, obs: Var) -> Result<Var> {
        self.online_encoder.forward(g, store, obs)
    }

    /// Projection of an already encoded batch.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        Ok(self.online_proj.forward(g, store, z)?)
    }

    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, p: Var) -> Result<Var> {
        Ok(self.online_pred.forward(g, store, p)?)
    }

    /// `q(g(f(o)))` through the online branch.
    pub fn online_project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, obs: Var) -> Result<Var> {
        let z = self.encode(g, store, obs)?;
        let p = self.project(g, store, z)?;
        self.predict(g, store, p)
    }

    /// `g(f(o))` through the target branch, with the gradient path cut.
    pub fn target_project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, obs: Var) -> Result<Var> {
        let z = self.target_encoder.forward(g, store, obs)?;
        let p = self.target_proj.forward(g, store, z)?;
        Ok(g.stop_gradient(p))
    }

    /// `theta <- (1 - eps) theta + eps phi` over the encoder and projection.
    pub fn ema_update<T: Scalar>(&self, store: &mut ParamStore<T>, epsilon: f64) -> Result<()> {
        ema(store, ONLINE_ENCODER, TARGET_ENCODER, epsilon)?;
        ema(store, ONLINE_PROJ, TARGET_PROJ, epsilon)
    }
}

/// Exponential moving average of every `src.*` array into `dst.*`.
pub fn ema<T: Scalar>(store: &mut ParamStore<T>, src: &str, dst: &str, epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(BitError::Argument(format!("momentum {epsilon} outside [0, 1]")));
    }
    // Blended in double precision and rounded once, so single-precision
    // stores stay within an ulp of the exact mix even under cancellation.
    for (s, d) in store.aligned_pairs(src, dst)? {
        let online = store.value(&s)?.clone();
        let target = store.value_mut(&d)?;
        for (t, &o) in target.data_mut().iter_mut().zip(online.data()) {
            *t = if epsilon == 1.0 {
                o
            } else {
                lit((1.0 - epsilon) * t.as_f64() + epsilon * o.as_f64())
            };
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use bit_nn::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net() -> NetworkConfig {
        NetworkConfig {
            conv_filters: 4,
            conv_strides: vec![2, 1],
            latent_dim: 6,
            proj_hidden: 8,
            proj_dim: 5,
            ..NetworkConfig::default()
        }
    }

    fn build(seed: u64) -> (ParamStore<f64>, FeatureExtractor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fx = FeatureExtractor::init(&mut store, [3, 12, 12], &small_net(), &mut rng).unwrap();
        (store, fx)
    }

    fn batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[n, 3, 12, 12],
            (0..n * 432).map(|_| rand::Rng::random::<f64>(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn shapes_and_layer_norm() {
        let (store, fx) = build(1);
        let mut g = Graph::inference();
        let x = g.input(batch(3, 2));
        let z = fx.encode(&mut g, &store, x).unwrap();
        assert_eq!(g.value(z).shape(), &[3, 6]);
        for row in g.value(z).data().chunks(6) {
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
        let q = fx.online_project(&mut g, &store, x).unwrap();
        assert_eq!(g.value(q).shape(), &[3, 5]);
        let p = fx.target_project(&mut g, &store, x).unwrap();
        assert_eq!(g.value(p).shape(), &[3, 5]);
    }

    #[test]
    fn target_starts_as_copy_and_is_frozen() {
        let (store, fx) = build(3);
        let mut g = Graph::inference();
        let x = g.input(batch(2, 4));
        let z = fx.encode(&mut g, &store, x).unwrap();
        let online = fx.project(&mut g, &store, z).unwrap();
        let target = fx.target_project(&mut g, &store, x).unwrap();
        assert_eq!(g.value(online).data(), g.value(target).data());
        for (name, p) in store.iter() {
            assert_eq!(p.trainable, name.starts_with(ONLINE_PREFIX), "{name}");
        }
    }

    #[test]
    fn wrong_observation_shape_is_rejected() {
        let (store, fx) = build(5);
        let mut g = Graph::<f64>::inference();
        let x = g.input(Tensor::zeros(&[1, 3, 10, 12]));
        assert!(matches!(fx.encode(&mut g, &store, x), Err(BitError::Argument(_))));
    }

    #[test]
    fn momentum_bounds() {
        let (mut store, fx) = build(6);
        assert!(fx.ema_update(&mut store, 1.5).is_err());
        assert!(fx.ema_update(&mut store, -0.1).is_err());
    }

    #[test]
    fn zero_momentum_leaves_target_and_unit_momentum_copies() {
        let (mut store, fx) = build(7);
        for v in store.value_mut("online.encoder.fc.weight").unwrap().data_mut() {
            *v += 0.25;
        }
        let before = store.digest_bytes(TARGET_PREFIX);
        fx.ema_update(&mut store, 0.0).unwrap();
        assert_eq!(before, store.digest_bytes(TARGET_PREFIX));
        fx.ema_update(&mut store, 1.0).unwrap();
        for (s, d) in store.aligned_pairs("online.encoder.", "target.encoder.").unwrap() {
            assert_eq!(store.value(&s).unwrap(), store.value(&d).unwrap());
        }
    }

    proptest! {
        #[test]
        fn ema_stays_in_convex_hull(eps in 0.0f64..=1.0, shift in -3.0f64..3.0, seed in 0u64..50) {
            let (mut store, fx) = build(seed);
            for v in store.value_mut("online.proj.l1.weight").unwrap().data_mut() {
                *v += shift;
            }
            let old = store.value("target.proj.l1.weight").unwrap().clone();
            fx.ema_update(&mut store, eps).unwrap();
            let online = store.value("online.proj.l1.weight").unwrap();
            let new = store.value("target.proj.l1.weight").unwrap();
            for ((&n, &o), &p) in new.data().iter().zip(old.data()).zip(online.data()) {
                let lo = o.min(p) - 1e-12;
                let hi = o.max(p) + 1e-12;
                prop_assert!(n >= lo && n <= hi);
            }
        }
    }
}
