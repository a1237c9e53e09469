//! Rule-based initial alignment and residual multi-head attention.
//!
//! The first attention layer starts from a nearly diagonal alignment built
//! from normalized position differences; each later layer adds its
//! predecessor's (upsampled, temporally convolved) attention weights to the
//! scaled dot-product scores, so alignments refine coarse-to-fine.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, TensorId};

/// Unnormalized diagonal scores S[t][l] = exp(−(t/T − l/L)²/(2g²)) with
/// zero-based t, l. Exposed separately so the scale invariance (same values
/// at (ct, cl) under T→cT, L→cL) can be stated before row normalization.
pub fn initial_scores(t_red: usize, l: usize, g: f64) -> Result<Tensor> {
    if !(g > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "initial alignment bandwidth g must be positive, got {g}"
        )));
    }
    if t_red == 0 || l == 0 {
        return Err(Error::InvalidArgument(format!(
            "initial alignment needs positive dimensions, got {t_red}×{l}"
        )));
    }
    let mut data = Vec::with_capacity(t_red * l);
    for t in 0..t_red {
        let tp = t as f64 / t_red as f64;
        for c in 0..l {
            let d = tp - c as f64 / l as f64;
            data.push((-d * d / (2.0 * g * g)).exp());
        }
    }
    Tensor::matrix(t_red, l, data)
}

/// Row-normalized initial alignment: each row of [`initial_scores`] divided
/// by its sum, hence row-stochastic.
pub fn initial_alignment(t_red: usize, l: usize, g: f64) -> Result<Tensor> {
    let mut s = initial_scores(t_red, l, g)?;
    for row in s.data_mut().chunks_mut(l) {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(s)
}

/// Context and bookkeeping from the rule-based alignments.
pub struct InitialContext {
    /// T_red×D graph node: per-g contexts concatenated and projected to D.
    pub context: TensorId,
    /// Mean of the per-g alignment matrices; row-stochastic. This is the
    /// A_prev handed to the first residual attention layer.
    pub a_init: Tensor,
}

/// Attend over `v` (L×D) with one rule-based alignment per bandwidth in
/// `g_list`; concatenate the per-g contexts along channels and project back
/// to D through `proj_w`/`proj_b`.
pub fn initial_context(
    gr: &mut Graph,
    v: TensorId,
    t_red: usize,
    g_list: &[f64],
    proj_w: TensorId,
    proj_b: TensorId,
) -> Result<InitialContext> {
    if g_list.is_empty() {
        return Err(Error::InvalidArgument("initial_context: empty g list".into()));
    }
    let l = gr.value(v).rows();
    let mut contexts = Vec::with_capacity(g_list.len());
    let mut mean: Option<Tensor> = None;
    for &g in g_list {
        let a = initial_alignment(t_red, l, g)?;
        match &mut mean {
            None => mean = Some(a.clone()),
            Some(m) => {
                for (o, &x) in m.data_mut().iter_mut().zip(a.data()) {
                    *o += x;
                }
            }
        }
        let aid = gr.input(a);
        contexts.push(gr.matmul(aid, v)?);
    }
    let mut a_init = mean.unwrap();
    let inv = 1.0 / g_list.len() as f64;
    a_init.data_mut().iter_mut().for_each(|x| *x *= inv);
    let cat = gr.concat_cols(&contexts)?;
    let context = gr.linear(cat, proj_w, Some(proj_b))?;
    Ok(InitialContext { context, a_init })
}

/// One head of residual attention: A = softmax(QKᵀ/√d_k + A_prev),
/// out = A·V. Returns (out, A).
pub fn residual_attention_head(
    gr: &mut Graph,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    a_prev: TensorId,
) -> Result<(TensorId, TensorId)> {
    let (t, dk) = (gr.value(q).rows(), gr.value(q).cols());
    let l = gr.value(k).rows();
    if gr.value(k).cols() != dk {
        return Err(Error::InvalidArgument(format!(
            "residual attention: K width {} != Q width {dk}",
            gr.value(k).cols()
        )));
    }
    if gr.value(a_prev).shape() != [t, l] {
        return Err(Error::InvalidArgument(format!(
            "residual attention: A_prev shape {:?} does not match scores {t}×{l}",
            gr.value(a_prev).shape()
        )));
    }
    let scores = gr.matmul_tb(q, k)?;
    let scaled = gr.scale(scores, 1.0 / (dk as f64).sqrt());
    let biased = gr.add(scaled, a_prev)?;
    let a = gr.softmax_rows(biased)?;
    let out = gr.matmul(a, v)?;
    Ok((out, a))
}

/// Projection weights for one multi-head module.
pub struct MhaParams {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub n_heads: usize,
}

/// Residual multi-head attention: per-head [`residual_attention_head`] over
/// projected Q/K/V slices, heads concatenated and projected by W^O. The
/// returned alignment is the mean of the per-head matrices, which the next
/// layer receives as its A_prev.
pub fn residual_multi_head(
    gr: &mut Graph,
    q_src: TensorId,
    kv: TensorId,
    a_prev: TensorId,
    p: &MhaParams,
) -> Result<(TensorId, TensorId)> {
    if p.n_heads == 0 {
        return Err(Error::InvalidArgument("residual attention: zero heads".into()));
    }
    let q = gr.matmul(q_src, p.wq)?;
    let k = gr.matmul(kv, p.wk)?;
    let v = gr.matmul(kv, p.wv)?;
    let d = gr.value(q).cols();
    if d % p.n_heads != 0 || gr.value(k).cols() != d || gr.value(v).cols() != d {
        return Err(Error::InvalidArgument(format!(
            "residual attention: projected width {d} not divisible across {} heads",
            p.n_heads
        )));
    }
    let dk = d / p.n_heads;
    let mut outs = Vec::with_capacity(p.n_heads);
    let mut a_sum: Option<TensorId> = None;
    for h in 0..p.n_heads {
        let qh = gr.slice_cols(q, h * dk, dk)?;
        let kh = gr.slice_cols(k, h * dk, dk)?;
        let vh = gr.slice_cols(v, h * dk, dk)?;
        let (out, a) = residual_attention_head(gr, qh, kh, vh, a_prev)?;
        outs.push(out);
        a_sum = Some(match a_sum {
            None => a,
            Some(s) => gr.add(s, a)?,
        });
    }
    let cat = gr.concat_cols(&outs)?;
    let context = gr.matmul(cat, p.wo)?;
    let a_next = gr.scale(a_sum.unwrap(), 1.0 / p.n_heads as f64);
    Ok((context, a_next))
}

/// Fit the previous layer's alignment to a finer time scale: nearest-neighbor
/// row upsampling truncated to `t_new`, then a temporal convolution whose
/// single tap row `taps` is shared across all L text columns. The result is
/// not renormalized; it enters the next layer's scores as an additive bias.
pub fn refine_prev_alignment(
    gr: &mut Graph,
    a_prev: TensorId,
    t_new: usize,
    taps: TensorId,
) -> Result<TensorId> {
    let t_prev = gr.value(a_prev).rows();
    if t_new < t_prev {
        return Err(Error::InvalidArgument(format!(
            "refine_prev_alignment: target {t_new} shorter than source {t_prev}"
        )));
    }
    let factor = t_new.div_ceil(t_prev);
    let up = gr.upsample_time(a_prev, factor, t_new)?;
    gr.shared_tap_conv(up, taps)
}

/// Mean over rows of the Shannon entropy −Σ p ln p (nats). Zero entries
/// contribute zero.
pub fn mean_row_entropy(a: &Tensor) -> f64 {
    let (r, c) = (a.rows(), a.cols());
    let mut total = 0.0;
    for row in a.data().chunks(c) {
        total += row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum::<f64>();
    }
    total / r as f64
}

/// Column index of each row's maximum (first occurrence on ties).
pub fn row_argmax(a: &Tensor) -> Vec<usize> {
    let c = a.cols();
    a.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 { (i, v) } else { best }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamStore, Rng};

    fn assert_row_stochastic(a: &Tensor, tol: f64) {
        let c = a.cols();
        for (i, row) in a.data().chunks(c).enumerate() {
            assert!(row.iter().all(|&v| v >= 0.0), "negative entry in row {i}");
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < tol, "row {i} sums to {sum}");
        }
    }

    fn rand_matrix(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn initial_alignment_peaks_on_the_diagonal_when_square() {
        let a = initial_alignment(6, 6, 0.08).unwrap();
        assert_eq!(row_argmax(&a), vec![0, 1, 2, 3, 4, 5]);
        assert_row_stochastic(&a, 1e-9);
    }

    #[test]
    fn initial_alignment_flattens_for_large_g() {
        let a = initial_alignment(4, 5, 1e3).unwrap();
        for &v in a.data() {
            assert!((v - 0.2).abs() < 1e-6, "entry {v} not ~1/5");
        }
    }

    #[test]
    fn initial_alignment_two_by_two_hand_oracle() {
        // t,l ∈ {0,1}, T=L=2, g=0.2: off-diagonal score exp(−0.25/0.08).
        let a = initial_alignment(2, 2, 0.2).unwrap();
        let off = (-3.125f64).exp();
        let hi = 1.0 / (1.0 + off);
        let lo = off / (1.0 + off);
        assert!((a.get2(0, 0) - hi).abs() < 1e-12);
        assert!((a.get2(0, 1) - lo).abs() < 1e-12);
        assert!((a.get2(1, 0) - lo).abs() < 1e-12);
        assert!((a.get2(1, 1) - hi).abs() < 1e-12);
    }

    #[test]
    fn initial_scores_invariant_under_simultaneous_scaling() {
        let small = initial_scores(8, 6, 0.07).unwrap();
        let big = initial_scores(24, 18, 0.07).unwrap();
        for t in 0..8 {
            for l in 0..6 {
                let d = (small.get2(t, l) - big.get2(3 * t, 3 * l)).abs();
                assert!(d < 1e-9, "({t},{l}) differs by {d}");
            }
        }
    }

    #[test]
    fn nonpositive_bandwidth_rejected() {
        assert!(initial_alignment(3, 3, 0.0).is_err());
        assert!(initial_alignment(3, 3, -0.1).is_err());
        assert!(initial_alignment(0, 3, 0.1).is_err());
    }

    #[test]
    fn initial_context_shapes_and_identity_value() {
        let mut g = Graph::new();
        // One-hot V rows: context rows must equal alignment rows.
        let v = g.input(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let eye = g.input(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let zero = g.input(Tensor::matrix(1, 3, vec![0.; 3]).unwrap());
        let init = initial_context(&mut g, v, 4, &[0.1], eye, zero).unwrap();
        let a = initial_alignment(4, 3, 0.1).unwrap();
        let ctx = g.value(init.context);
        for i in 0..ctx.len() {
            assert!((ctx.data()[i] - a.data()[i]).abs() < 1e-12);
        }
        assert_row_stochastic(&init.a_init, 1e-9);
    }

    #[test]
    fn initial_context_concatenates_one_block_per_g() {
        let mut g = Graph::new();
        let d = 5;
        let v = g.input(rand_matrix(7, d, 3));
        // Projection back to D from the 4·D concat.
        let w = g.input(rand_matrix(4 * d, d, 4));
        let b = g.input(Tensor::matrix(1, d, vec![0.; d]).unwrap());
        let init =
            initial_context(&mut g, v, 6, &[0.01, 0.05, 0.1, 0.2], w, b).unwrap();
        assert_eq!(g.value(init.context).shape(), &[6, d]);
        assert_eq!(init.a_init.shape(), &[6, 7]);
    }

    #[test]
    fn constant_v_rows_collapse_to_that_row() {
        let mut g = Graph::new();
        let row = [0.4, -1.2, 2.0];
        let v = g.input(Tensor::matrix(5, 3, row.repeat(5)).unwrap());
        let eye = g.input(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let zero = g.input(Tensor::matrix(1, 3, vec![0.; 3]).unwrap());
        let init = initial_context(&mut g, v, 4, &[0.05], eye, zero).unwrap();
        let ctx = g.value(init.context);
        for r in 0..4 {
            for c in 0..3 {
                assert!((ctx.get2(r, c) - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_head_softmaxes_a_prev() {
        let mut g = Graph::new();
        let t = 3;
        let l = 4;
        let q = g.input(Tensor::matrix(t, 2, vec![0.0; t * 2]).unwrap());
        let k = g.input(rand_matrix(l, 2, 8));
        let v = g.input(rand_matrix(l, 3, 9));
        // One-hot A_prev rows: hot column weight e/(e+L−1) after softmax.
        let mut hot = vec![0.0; t * l];
        for (r, item) in hot.chunks_mut(l).enumerate() {
            item[r] = 1.0;
        }
        let a_prev = g.input(Tensor::matrix(t, l, hot).unwrap());
        let (_, a) = residual_attention_head(&mut g, q, k, v, a_prev).unwrap();
        let e = 1f64.exp();
        let hot_w = e / (e + (l as f64 - 1.0));
        let cold_w = 1.0 / (e + (l as f64 - 1.0));
        for r in 0..t {
            for c in 0..l {
                let expect = if c == r { hot_w } else { cold_w };
                assert!((g.value(a).get2(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_a_prev_reduces_to_plain_attention() {
        let mut g = Graph::new();
        let (t, l, dk, dv) = (4, 5, 3, 2);
        let q = g.input(rand_matrix(t, dk, 21));
        let k = g.input(rand_matrix(l, dk, 22));
        let v = g.input(rand_matrix(l, dv, 23));
        let zero = g.input(Tensor::zeros(vec![t, l]));
        let (out, a) = residual_attention_head(&mut g, q, k, v, zero).unwrap();
        // Plain scaled dot-product built from the same primitive ops.
        let scores = g.matmul_tb(q, k).unwrap();
        let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let a_ref = g.softmax_rows(scaled).unwrap();
        let out_ref = g.matmul(a_ref, v).unwrap();
        assert_eq!(g.value(a).data(), g.value(a_ref).data());
        assert_eq!(g.value(out).data(), g.value(out_ref).data());
    }

    #[test]
    fn outputs_stay_in_value_convex_hull() {
        let mut g = Graph::new();
        let (t, l, dk, dv) = (6, 4, 3, 3);
        let q = g.input(rand_matrix(t, dk, 31));
        let k = g.input(rand_matrix(l, dk, 32));
        let v = g.input(rand_matrix(l, dv, 33));
        let a_prev = g.input(initial_alignment(t, l, 0.1).unwrap());
        let (out, a) = residual_attention_head(&mut g, q, k, v, a_prev).unwrap();
        assert_row_stochastic(g.value(a), 1e-6);
        for c in 0..dv {
            let lo = (0..l).map(|r| g.value(v).get2(r, c)).fold(f64::INFINITY, f64::min);
            let hi = (0..l).map(|r| g.value(v).get2(r, c)).fold(f64::NEG_INFINITY, f64::max);
            for r in 0..t {
                let x = g.value(out).get2(r, c);
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn a_prev_shape_mismatch_rejected() {
        let mut g = Graph::new();
        let q = g.input(rand_matrix(3, 2, 1));
        let k = g.input(rand_matrix(4, 2, 2));
        let v = g.input(rand_matrix(4, 2, 3));
        let bad = g.input(Tensor::zeros(vec![3, 5]));
        assert!(matches!(
            residual_attention_head(&mut g, q, k, v, bad),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_head_module_equals_bare_head_with_projections() {
        let mut g = Graph::new();
        let (t, l, zq, d) = (4, 6, 3, 5);
        let q_src = g.input(rand_matrix(t, zq, 41));
        let kv = g.input(rand_matrix(l, d, 42));
        let a_prev = g.input(initial_alignment(t, l, 0.2).unwrap());
        let wq = g.input(rand_matrix(zq, d, 43));
        let wk = g.input(rand_matrix(d, d, 44));
        let wv = g.input(rand_matrix(d, d, 45));
        let wo = g.input(rand_matrix(d, d, 46));
        let p = MhaParams { wq, wk, wv, wo, n_heads: 1 };
        let (ctx, a_next) = residual_multi_head(&mut g, q_src, kv, a_prev, &p).unwrap();
        let q = g.matmul(q_src, wq).unwrap();
        let k = g.matmul(kv, wk).unwrap();
        let v = g.matmul(kv, wv).unwrap();
        let (out, a) = residual_attention_head(&mut g, q, k, v, a_prev).unwrap();
        let ctx_ref = g.matmul(out, wo).unwrap();
        assert_eq!(g.value(ctx).data(), g.value(ctx_ref).data());
        assert_eq!(g.value(a_next).data(), g.value(a).data());
    }

    #[test]
    fn multi_head_alignment_is_row_stochastic_and_context_shaped() {
        let mut g = Graph::new();
        let (t, l, zq, d, h) = (5, 7, 4, 6, 3);
        let q_src = g.input(rand_matrix(t, zq, 51));
        let kv = g.input(rand_matrix(l, d, 52));
        let a_prev = g.input(initial_alignment(t, l, 0.1).unwrap());
        let p = MhaParams {
            wq: g.input(rand_matrix(zq, d, 53)),
            wk: g.input(rand_matrix(d, d, 54)),
            wv: g.input(rand_matrix(d, d, 55)),
            wo: g.input(rand_matrix(d, d, 56)),
            n_heads: h,
        };
        let (ctx, a_next) = residual_multi_head(&mut g, q_src, kv, a_prev, &p).unwrap();
        assert_eq!(g.value(ctx).shape(), &[t, d]);
        assert_row_stochastic(g.value(a_next), 1e-6);
    }

    #[test]
    fn refine_identity_kernel_passes_through_and_duplicates() {
        let mut g = Graph::new();
        let a = g.input(rand_matrix(3, 2, 61));
        let ident = g.input(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
        let same = refine_prev_alignment(&mut g, a, 3, ident).unwrap();
        assert_eq!(g.value(same).data(), g.value(a).data());
        let doubled = refine_prev_alignment(&mut g, a, 6, ident).unwrap();
        for r in 0..6 {
            for c in 0..2 {
                assert_eq!(g.value(doubled).get2(r, c), g.value(a).get2(r / 2, c));
            }
        }
    }

    #[test]
    fn refine_averaging_kernel_matches_hand_convolution() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 2.0, 4.0, -2.0]).unwrap());
        let avg = g.input(Tensor::matrix(1, 3, vec![0.25, 0.5, 0.25]).unwrap());
        let out = refine_prev_alignment(&mut g, a, 6, avg).unwrap();
        // Upsampled rows: r0 r0 r1 r1 r2 r2 with zero padding outside.
        let rows = [
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 2.0],
            [0.0, 2.0],
            [4.0, -2.0],
            [4.0, -2.0],
        ];
        for t in 0..6 {
            for c in 0..2 {
                let prev = if t == 0 { [0.0, 0.0] } else { rows[t - 1] };
                let next = if t == 5 { [0.0, 0.0] } else { rows[t + 1] };
                let expect = 0.25 * prev[c] + 0.5 * rows[t][c] + 0.25 * next[c];
                assert!((g.value(out).get2(t, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refine_rejects_shrinking_targets() {
        let mut g = Graph::new();
        let a = g.input(rand_matrix(4, 2, 62));
        let ident = g.input(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
        assert!(matches!(
            refine_prev_alignment(&mut g, a, 3, ident),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gradients_flow_through_q_k_v_and_a_prev() {
        let (t, l, zq, d) = (3, 4, 2, 4);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(71);
        for (name, rows, cols) in [
            ("q_src", t, zq),
            ("kv", l, d),
            ("a_raw", t, l),
            ("wq", zq, d),
            ("wk", d, d),
            ("wv", d, d),
            ("wo", d, d),
        ] {
            store
                .add_normal(name, vec![rows, cols], 0.5, &mut rng)
                .unwrap();
        }
        let mask = rand_matrix(t, d, 72);
        let err = grad_check(&mut store, 1e-5, |g, s| {
            let q_src = g.param(s, "q_src")?;
            let kv = g.param(s, "kv")?;
            let a_raw = g.param(s, "a_raw")?;
            // Softmax keeps the A_prev argument row-stochastic while leaving
            // it differentiable.
            let a_prev = g.softmax_rows(a_raw)?;
            let p = MhaParams {
                wq: g.param(s, "wq")?,
                wk: g.param(s, "wk")?,
                wv: g.param(s, "wv")?,
                wo: g.param(s, "wo")?,
                n_heads: 2,
            };
            let (ctx, _) = residual_multi_head(g, q_src, kv, a_prev, &p)?;
            let m = g.input(mask.clone());
            let w = g.mul(ctx, m)?;
            Ok(g.sum_all(w))
        })
        .unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn entropy_and_argmax_helpers() {
        let sharp = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mean_row_entropy(&sharp), 0.0);
        assert_eq!(row_argmax(&sharp), vec![0, 2]);
        let flat = Tensor::matrix(1, 4, vec![0.25; 4]).unwrap();
        assert!((mean_row_entropy(&flat) - 4f64.ln()).abs() < 1e-12);
    }
}
