//! Finite-difference validation of reverse-mode gradients.
//!
//! The checker rebuilds the forward graph from a closure, so the function
//! under test must be a pure function of the [`ParamStore`] (stochastic parts
//! need a freshly seeded [`Rng`](crate::numerics::rng::Rng) inside the
//! closure). Central differences over every (or a sampled subset of)
//! parameter coordinate are compared against one analytic backward pass.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, TensorId};
use crate::numerics::rng::Rng;
use crate::numerics::store::ParamStore;

const EPS_MIN: f64 = 1e-7;
const EPS_MAX: f64 = 1e-3;

/// Relative error between analytic and finite-difference values.
fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(EPS_MIN..=EPS_MAX).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps {eps} outside [{EPS_MIN}, {EPS_MAX}]"
        )));
    }
    Ok(())
}

fn loss_of<F>(build: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<TensorId>,
{
    let mut g = Graph::new();
    let id = build(&mut g, store)?;
    let t = g.value(id);
    if t.len() != 1 {
        return Err(Error::Internal(format!(
            "grad_check: loss has shape {:?}, want a scalar",
            t.shape()
        )));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite loss".into()));
    }
    Ok(v)
}

fn check_coords<F>(
    store: &mut ParamStore,
    eps: f64,
    build: &F,
    pick: impl Fn(&str, usize, &mut Option<&mut Rng>) -> Vec<usize>,
    mut rng: Option<&mut Rng>,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<TensorId>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let id = build(&mut g, store)?;
    if !g.value(id).data()[0].is_finite() || g.value(id).len() != 1 {
        // Reuse the scalar/finite diagnostics.
        loss_of(build, store)?;
    }
    let grads = g.backward(id)?;
    drop(g);

    let names: Vec<String> = store.names().cloned().collect();
    let mut max_rel: f64 = 0.0;
    for name in &names {
        let n = store.get(name)?.data.len();
        for i in pick(name, n, &mut rng) {
            let orig = store.get(name)?.data[i];
            store.get_mut(name)?.data[i] = orig + eps;
            let lp = loss_of(build, store)?;
            store.get_mut(name)?.data[i] = orig - eps;
            let lm = loss_of(build, store)?;
            store.get_mut(name)?.data[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let a = grads.get(name).map(|t| t.data()[i]).unwrap_or(0.0);
            max_rel = max_rel.max(rel_err(a, fd));
        }
    }
    Ok(max_rel)
}

/// Check every coordinate of every parameter; returns the max relative error.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<TensorId>,
{
    check_coords(store, eps, &build, |_, n, _| (0..n).collect(), None)
}

/// Check at most `per_param` randomly chosen coordinates of each parameter.
/// Same contract as [`grad_check`] but tractable on full-size models.
pub fn grad_check_sampled<F>(
    store: &mut ParamStore,
    eps: f64,
    per_param: usize,
    rng: &mut Rng,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<TensorId>,
{
    if per_param == 0 {
        return Err(Error::InvalidArgument("grad_check: per_param must be ≥ 1".into()));
    }
    check_coords(
        store,
        eps,
        &build,
        move |_, n, rng| {
            if n <= per_param {
                return (0..n).collect();
            }
            let r = rng.as_mut().expect("sampled variant always passes an rng");
            let mut set = BTreeSet::new();
            while set.len() < per_param {
                set.insert(r.int_range(0, n as u64 - 1) as usize);
            }
            set.into_iter().collect()
        },
        Some(rng),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    const SEEDS: u64 = 24;
    const TOL: f64 = 1e-5;
    const EPS: f64 = 1e-5;

    fn rand_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.normal() * scale).collect()
    }

    /// Values with magnitude in [0.4, 0.9), random sign: away from the kinks
    /// of relu/abs at 0 and from clamp bounds at ±1.2.
    fn rand_vec_off_kink(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let mag = 0.4 + 0.5 * rng.uniform();
                if rng.uniform() < 0.5 {
                    mag
                } else {
                    -mag
                }
            })
            .collect()
    }

    #[test]
    fn square_at_three_is_exact() {
        let mut store = ParamStore::new();
        store.insert("x", vec![1, 1], vec![3.0]).unwrap();
        let err = grad_check(&mut store, 1e-4, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.square(x);
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn eps_domain_is_enforced() {
        let mut store = ParamStore::new();
        store.insert("x", vec![1, 1], vec![1.0]).unwrap();
        for bad in [1e-8, 1e-2, 0.0, -1e-5] {
            let r = grad_check(&mut store, bad, |g, s| {
                let x = g.param(s, "x")?;
                Ok(g.sum_all(x))
            });
            assert!(matches!(r, Err(Error::InvalidArgument(_))), "eps {bad}");
        }
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("x", vec![1, 1], vec![1e308]).unwrap();
        let r = grad_check(&mut store, EPS, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.square(x);
            Ok(g.sum_all(y))
        });
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn elementwise_arithmetic() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(seed);
            let mut store = ParamStore::new();
            store.insert("a", vec![3, 4], rand_vec(&mut rng, 12, 1.0)).unwrap();
            let b: Vec<f64> = rand_vec(&mut rng, 12, 0.3).iter().map(|v| v + 2.0).collect();
            store.insert("b", vec![3, 4], b).unwrap();
            let err = grad_check(&mut store, EPS, |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let prod = g.mul(a, b)?;
                let quot = g.div(a, b)?;
                let diff = g.sub(prod, quot)?;
                let scaled = g.scale(diff, 2.0);
                let shifted = g.add_scalar(a, 3.0);
                let sum = g.add(scaled, shifted)?;
                let sum = g.add(sum, b)?;
                Ok(g.sum_all(sum))
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn row_broadcast_ops() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(100 + seed);
            let mut store = ParamStore::new();
            store.insert("x", vec![3, 4], rand_vec(&mut rng, 12, 1.0)).unwrap();
            store.insert("b", vec![1, 4], rand_vec(&mut rng, 4, 1.0)).unwrap();
            store.insert("v", vec![1, 4], rand_vec(&mut rng, 4, 1.0)).unwrap();
            let err = grad_check(&mut store, EPS, |g, s| {
                let x = g.param(s, "x")?;
                let b = g.param(s, "b")?;
                let v = g.param(s, "v")?;
                let y = g.add_row_vec(x, b)?;
                let y = g.mul_row_vec(y, v)?;
                Ok(g.sum_all(y))
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn matmul_both_orientations() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(200 + seed);
            let mut store = ParamStore::new();
            store.insert("a", vec![2, 3], rand_vec(&mut rng, 6, 1.0)).unwrap();
            store.insert("b", vec![3, 2], rand_vec(&mut rng, 6, 1.0)).unwrap();
            store.insert("c", vec![4, 3], rand_vec(&mut rng, 12, 1.0)).unwrap();
            let err = grad_check(&mut store, EPS, |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.param(s, "c")?;
                let m1 = g.matmul(a, b)?;
                let m2 = g.matmul_tb(a, c)?;
                let s1 = g.sum_all(m1);
                let s2 = g.sum_all(m2);
                g.add(s1, s2)
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn smooth_activations() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(300 + seed);
            let mut store = ParamStore::new();
            store.insert("x", vec![3, 3], rand_vec(&mut rng, 9, 0.8)).unwrap();
            let err = grad_check(&mut store, EPS, |g, s| {
                let x = g.param(s, "x")?;
                let a = g.gelu(x);
                let b = g.sigmoid(x);
                let c = g.exp(x);
                let d = g.square(x);
                let ab = g.add(a, b)?;
                let cd = g.add(c, d)?;
                let all = g.add(ab, cd)?;
                Ok(g.sum_all(all))
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn kinked_activations_away_from_kinks() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(400 + seed);
            let mut store = ParamStore::new();
            let mut vals = rand_vec_off_kink(&mut rng, 8);
            // Push half the entries outside the clamp interval (±1.2).
            for v in vals.iter_mut().skip(4) {
                *v *= 4.0;
            }
            store.insert("x", vec![2, 4], vals).unwrap();
            let err = grad_check(&mut store, EPS, |g, s| {
                let x = g.param(s, "x")?;
                let r = g.relu(x);
                let a = g.abs(x);
                let c = g.clamp(x, -1.2, 1.2)?;
                let ra = g.add(r, a)?;
                let all = g.add(ra, c)?;
                Ok(g.sum_all(all))
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn log_and_sqrt_on_positive_inputs() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(500 + seed);
            let mut store = ParamStore::new();
            let vals: Vec<f64> = (0..6).map(|_| 0.5 + rng.uniform()).collect();
            store.insert("x", vec![2, 3], vals).unwrap();
            let err = grad_check(&mut store, EPS, |g, s| {
                let x = g.param(s, "x")?;
                let l = g.log(x)?;
                let r = g.sqrt(x)?;
                let sum = g.add(l, r)?;
                Ok(g.sum_all(sum))
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn softmax_and_layer_norm_weighted() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(600 + seed);
            let mut store = ParamStore::new();
            store.insert("x", vec![3, 4], rand_vec(&mut rng, 12, 1.5)).unwrap();
            let mask = Tensor::matrix(3, 4, rand_vec(&mut rng, 12, 1.0)).unwrap();
            let err = grad_check(&mut store, EPS, move |g, s| {
                let x = g.param(s, "x")?;
                let m = g.input(mask.clone());
                let sm = g.softmax_rows(x)?;
                let ln = g.layer_norm_rows(x)?;
                let wsm = g.mul(sm, m)?;
                let wln = g.mul(ln, m)?;
                let s1 = g.sum_all(wsm);
                let s2 = g.sum_all(wln);
                g.add(s1, s2)
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn shape_ops_and_reductions() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(700 + seed);
            let mut store = ParamStore::new();
            store.insert("x", vec![4, 6], rand_vec(&mut rng, 24, 1.0)).unwrap();
            store.insert("y", vec![4, 2], rand_vec(&mut rng, 8, 1.0)).unwrap();
            let mask = Tensor::matrix(4, 5, rand_vec(&mut rng, 20, 1.0)).unwrap();
            let err = grad_check(&mut store, EPS, move |g, s| {
                let x = g.param(s, "x")?;
                let y = g.param(s, "y")?;
                let sl = g.slice_cols(x, 1, 3)?;
                let my = g.mean_rows(y)?;
                let rep = g.repeat_rows(my, 4)?;
                let cat = g.concat_cols(&[sl, rep])?;
                let m = g.input(mask.clone());
                let w = g.mul(cat, m)?;
                Ok(g.mean_all(w))
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn convolutions() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(800 + seed);
            let mut store = ParamStore::new();
            store.insert("x", vec![6, 2], rand_vec(&mut rng, 12, 1.0)).unwrap();
            store.insert("w1", vec![3, 2, 2], rand_vec(&mut rng, 12, 0.5)).unwrap();
            store.insert("b1", vec![1, 2], rand_vec(&mut rng, 2, 0.5)).unwrap();
            store.insert("w2", vec![3, 2, 2], rand_vec(&mut rng, 12, 0.5)).unwrap();
            store.insert("taps", vec![1, 3], rand_vec(&mut rng, 3, 0.5)).unwrap();
            let mask = Tensor::matrix(6, 2, rand_vec(&mut rng, 12, 1.0)).unwrap();
            let err = grad_check(&mut store, EPS, move |g, s| {
                let x = g.param(s, "x")?;
                let w1 = g.param(s, "w1")?;
                let b1 = g.param(s, "b1")?;
                let w2 = g.param(s, "w2")?;
                let taps = g.param(s, "taps")?;
                let c1 = g.conv1d(x, w1, Some(b1), 3, 1)?;
                let c2 = g.conv1d(c1, w2, None, 3, 2)?;
                let c3 = g.shared_tap_conv(c2, taps)?;
                let m = g.input(mask.clone());
                let w = g.mul(c3, m)?;
                Ok(g.sum_all(w))
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn pool_and_upsample() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(900 + seed);
            let mut store = ParamStore::new();
            store.insert("x", vec![5, 3], rand_vec(&mut rng, 15, 1.0)).unwrap();
            let mask = Tensor::matrix(5, 3, rand_vec(&mut rng, 15, 1.0)).unwrap();
            let err = grad_check(&mut store, EPS, move |g, s| {
                let x = g.param(s, "x")?;
                let p = g.avg_pool_time(x, 2)?;
                let u = g.upsample_time(p, 2, 5)?;
                let m = g.input(mask.clone());
                let w = g.mul(u, m)?;
                Ok(g.sum_all(w))
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn embedding_gather() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(1000 + seed);
            let mut store = ParamStore::new();
            store.insert("emb", vec![5, 3], rand_vec(&mut rng, 15, 1.0)).unwrap();
            let mask = Tensor::matrix(4, 3, rand_vec(&mut rng, 12, 1.0)).unwrap();
            let err = grad_check(&mut store, EPS, move |g, s| {
                let t = g.param(s, "emb")?;
                let e = g.embed_rows(t, &[0, 2, 2, 4])?;
                let m = g.input(mask.clone());
                let w = g.mul(e, m)?;
                Ok(g.sum_all(w))
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn gaussian_kl_all_four_inputs() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(1100 + seed);
            let mut store = ParamStore::new();
            store.insert("mq", vec![2, 3], rand_vec(&mut rng, 6, 1.0)).unwrap();
            store.insert("lsq", vec![2, 3], rand_vec(&mut rng, 6, 0.4)).unwrap();
            store.insert("mp", vec![2, 3], rand_vec(&mut rng, 6, 1.0)).unwrap();
            store.insert("lsp", vec![2, 3], rand_vec(&mut rng, 6, 0.4)).unwrap();
            let mask = Tensor::matrix(2, 3, rand_vec(&mut rng, 6, 1.0)).unwrap();
            let err = grad_check(&mut store, EPS, move |g, s| {
                let mq = g.param(s, "mq")?;
                let lsq = g.param(s, "lsq")?;
                let mp = g.param(s, "mp")?;
                let lsp = g.param(s, "lsp")?;
                let kl = g.gaussian_kl(mq, lsq, mp, lsp)?;
                let m = g.input(mask.clone());
                let wkl = g.mul(kl, m)?;
                let s1 = g.sum_all(wkl);
                let s2 = g.sum_all(kl);
                g.add(s1, s2)
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn sum_of_gelu_over_random_input() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(1200 + seed);
            let mut store = ParamStore::new();
            store.insert("x", vec![4, 4], rand_vec(&mut rng, 16, 1.2)).unwrap();
            let err = grad_check(&mut store, EPS, |g, s| {
                let x = g.param(s, "x")?;
                let y = g.gelu(x);
                Ok(g.sum_all(y))
            })
            .unwrap();
            assert!(err < TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn two_layer_toy_model() {
        for seed in 0..SEEDS {
            let mut rng = Rng::new(1300 + seed);
            let mut store = ParamStore::new();
            store.insert("w1", vec![3, 8], rand_vec(&mut rng, 24, 0.5)).unwrap();
            store.insert("b1", vec![1, 8], rand_vec(&mut rng, 8, 0.1)).unwrap();
            store.insert("g1", vec![1, 8], rand_vec(&mut rng, 8, 0.3)).unwrap();
            store.insert("w2", vec![8, 2], rand_vec(&mut rng, 16, 0.5)).unwrap();
            store.insert("b2", vec![1, 2], rand_vec(&mut rng, 2, 0.1)).unwrap();
            let x = Tensor::matrix(4, 3, rand_vec(&mut rng, 12, 1.0)).unwrap();
            let target = Tensor::matrix(4, 2, rand_vec(&mut rng, 8, 0.5)).unwrap();
            let err = grad_check(&mut store, EPS, move |g, s| {
                let xin = g.input(x.clone());
                let w1 = g.param(s, "w1")?;
                let b1 = g.param(s, "b1")?;
                let g1 = g.param(s, "g1")?;
                let w2 = g.param(s, "w2")?;
                let b2 = g.param(s, "b2")?;
                let h = g.linear(xin, w1, Some(b1))?;
                let h = g.gelu(h);
                let h = g.layer_norm_rows(h)?;
                let h = g.mul_row_vec(h, g1)?;
                let out = g.linear(h, w2, Some(b2))?;
                let out = g.sigmoid(out);
                let t = g.input(target.clone());
                let d = g.sub(out, t)?;
                let sq = g.square(d);
                Ok(g.mean_all(sq))
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn dropout_is_checkable_with_a_fixed_seed() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1400);
        store.insert("x", vec![3, 4], rand_vec(&mut rng, 12, 1.0)).unwrap();
        let err = grad_check(&mut store, EPS, |g, s| {
            let x = g.param(s, "x")?;
            let mut drop_rng = Rng::new(77);
            let y = g.dropout(x, 0.3, &mut drop_rng, true)?;
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn sampled_variant_agrees_with_full() {
        let mut rng = Rng::new(1500);
        let mut store = ParamStore::new();
        store.insert("w", vec![4, 4], rand_vec(&mut rng, 16, 0.7)).unwrap();
        let build = |g: &mut Graph, s: &ParamStore| {
            let w = g.param(s, "w")?;
            let y = g.gelu(w);
            Ok(g.sum_all(y))
        };
        let full = grad_check(&mut store, EPS, build).unwrap();
        let mut pick_rng = Rng::new(4);
        let sampled = grad_check_sampled(&mut store, EPS, 5, &mut pick_rng, build).unwrap();
        assert!(sampled <= full + 1e-12);
        assert!(sampled < TOL);
        assert!(matches!(
            grad_check_sampled(&mut store, EPS, 0, &mut pick_rng, build),
            Err(Error::InvalidArgument(_))
        ));
    }
}
