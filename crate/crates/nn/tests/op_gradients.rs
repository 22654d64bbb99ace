//! Every differentiable op checked against central finite differences in f64.

use bit_nn::numeric::{central_difference, max_relative_error};
use bit_nn::{Conv2d, Graph, LayerNorm, Mlp, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `loss = sum(weights * f(params))` with a fixed random weighting so
/// every output entry contributes a distinct gradient.
fn check<F>(store: &ParamStore<f64>, build: F)
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let eval = |s: &ParamStore<f64>| -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let out = build(&mut g, s);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = random(g.value(out).shape(), &mut rng);
        let w = g.input(w);
        let weighted = g.mul(out, w);
        let loss = g.sum_all(weighted);
        (g, loss)
    };
    let (g, loss) = eval(store);
    let grads = g.backward(loss).params();
    let mut probe = store.clone();
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let numeric = central_difference(&mut probe, &name, 1e-6, |s| {
            let (g, l) = eval(s);
            g.value(l).item()
        });
        let err = max_relative_error(&grads[&name], &numeric, 1e-6);
        assert!(err < 1e-5, "{name}: relative error {err}");
    }
}

fn store_with(params: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in params {
        s.insert(*n, t.clone(), true);
    }
    s
}

#[test]
fn matmul_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = store_with(&[
        ("x", random(&[3, 4], &mut rng)),
        ("w", random(&[4, 2], &mut rng)),
        ("b", random(&[2], &mut rng)),
    ]);
    check(&s, |g, s| {
        let x = g.param(s, "x").unwrap();
        let w = g.param(s, "w").unwrap();
        let b = g.param(s, "b").unwrap();
        let y = g.matmul(x, w);
        g.add_row(y, b)
    });
}

#[test]
fn elementwise_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = store_with(&[("a", random(&[2, 3], &mut rng)), ("b", random(&[2, 3], &mut rng))]);
    check(&s, |g, s| {
        let a = g.param(s, "a").unwrap();
        let b = g.param(s, "b").unwrap();
        let t = g.tanh(a);
        let e = g.exp(b);
        let m = g.mul(t, e);
        let sp = g.softplus(m);
        let d = g.sub(sp, a);
        let q = g.square(d);
        let sc = g.scale(q, -0.7);
        let sh = g.add_scalar(sc, 0.3);
        let mn = g.min(sh, b);
        let ab = g.abs(mn);
        g.add(ab, t)
    });
}

#[test]
fn concat_slice_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = store_with(&[("a", random(&[3, 2], &mut rng)), ("b", random(&[3, 3], &mut rng))]);
    check(&s, |g, s| {
        let a = g.param(s, "a").unwrap();
        let b = g.param(s, "b").unwrap();
        let c = g.concat_cols(a, b);
        let mid = g.slice_cols(c, 1, 3);
        let sq = g.square(mid);
        let rows = g.sum_cols(sq);
        let m = g.mean_all(c);
        let flat = g.reshape(rows, &[1, 3]);
        let r = g.relu(flat);
        let mm = g.reshape(m, &[1, 1]);
        let cat = g.concat_cols(r, mm);
        g.flatten(cat)
    });
}

#[test]
fn convolution_strides() {
    for stride in [1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(4 + stride as u64);
        let s = store_with(&[
            ("x", random(&[2, 3, 7, 6], &mut rng)),
            ("w", random(&[4, 3, 3, 3], &mut rng)),
            ("b", random(&[4], &mut rng)),
        ]);
        check(&s, |g, s| {
            let x = g.param(s, "x").unwrap();
            let w = g.param(s, "w").unwrap();
            let b = g.param(s, "b").unwrap();
            g.conv2d(x, w, b, stride)
        });
    }
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = store_with(&[
        ("x", random(&[3, 5], &mut rng)),
        ("gamma", random(&[5], &mut rng)),
        ("beta", random(&[5], &mut rng)),
    ]);
    check(&s, |g, s| {
        let x = g.param(s, "x").unwrap();
        let gm = g.param(s, "gamma").unwrap();
        let bt = g.param(s, "beta").unwrap();
        g.layer_norm(x, gm, bt, 1e-5)
    });
}

#[test]
fn layers_compose() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = ParamStore::<f64>::new();
    let conv = Conv2d::init(&mut s, "conv", 2, 3, 3, 2, true, &mut rng);
    let mlp = Mlp::init(&mut s, "mlp", &[12, 5, 4], true, &mut rng);
    let norm = LayerNorm::init(&mut s, "norm", 4, true);
    let x = random(&[2, 2, 6, 6], &mut rng);
    check(&s, move |g, s| {
        let x = g.input(x.clone());
        let h = conv.forward(g, s, x).unwrap();
        let h = g.relu(h);
        let h = g.flatten(h);
        let h = mlp.forward(g, s, h).unwrap();
        norm.forward(g, s, h).unwrap()
    });
}

#[test]
fn frozen_params_and_stop_gradient_get_no_gradient() {
    let mut s = ParamStore::<f64>::new();
    s.insert("live", Tensor::full(&[2], 1.5), true);
    s.insert("frozen", Tensor::full(&[2], 2.0), false);
    let mut g = Graph::new();
    let live = g.param(&s, "live").unwrap();
    let frozen = g.param(&s, "frozen").unwrap();
    let cut = g.stop_gradient(live);
    let a = g.mul(live, frozen);
    let b = g.mul(cut, frozen);
    let c = g.add(a, b);
    let loss = g.sum_all(c);
    let grads = g.backward(loss);
    assert_eq!(grads.wrt(live).data(), &[2.0, 2.0]);
    assert_eq!(grads.wrt(frozen).data(), &[0.0, 0.0]);
    assert!(!grads.params().contains_key("frozen"));
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let mut g = Graph::inference();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d(xv, wv, bv, 2);
    let y = g.value(y);
    assert_eq!(y.shape(), &[1, 3, 2, 2]);
    for o in 0..3 {
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = b.data()[o];
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            acc += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                * x.data()[(c * 5 + oy * 2 + ky) * 5 + ox * 2 + kx];
                        }
                    }
                }
                let got = y.data()[(o * 2 + oy) * 2 + ox];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn softplus_stays_finite_and_positive(x in -800.0f64..800.0) {
        let mut g = Graph::inference();
        let v = g.input(Tensor::scalar(x));
        let y = g.softplus(v);
        let y = g.value(y).item();
        prop_assert!(y.is_finite());
        prop_assert!(y >= 0.0);
        prop_assert!(y >= x);
    }
}
