//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a flat arena of nodes built eagerly during the forward pass:
//! every builder call evaluates the operation immediately and records its
//! operands. Because parents always have smaller ids than children, the arena
//! order is already topological and the backward pass is a single reverse
//! sweep that dispatches one vector-Jacobian product per node.
//!
//! Values are rank-2 (rows × cols) inside the graph; named parameter leaves
//! are loaded from a [`ParamStore`] with leading dims collapsed into rows.
//! All arithmetic is 64-bit.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::rng::Rng;
use crate::numerics::scalar;
use crate::numerics::store::ParamStore;
use crate::numerics::tensor::Tensor;

/// Epsilon used by layer normalization, shared with the value-level op.
pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddRowVec(TensorId, TensorId),
    MulRowVec(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    MatMul(TensorId, TensorId),
    MatMulTransB(TensorId, TensorId),
    Gelu(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Abs(TensorId),
    Square(TensorId),
    Sqrt(TensorId),
    Clamp { x: TensorId, lo: f64, hi: f64 },
    SoftmaxRows(TensorId),
    LayerNormRows(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    MeanRows(TensorId),
    RepeatRows(TensorId),
    ConcatCols(Vec<TensorId>),
    SliceCols { x: TensorId, start: usize, len: usize },
    Conv1d { x: TensorId, w: TensorId, bias: Option<TensorId>, k: usize, dilation: usize },
    SharedTapConv { x: TensorId, w: TensorId },
    AvgPoolTime { x: TensorId, factor: usize },
    UpsampleTime { x: TensorId, factor: usize },
    EmbedRows { table: TensorId, idx: Vec<usize> },
    GaussianKl { mq: TensorId, lsq: TensorId, mp: TensorId, lsp: TensorId },
    StopGrad,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every named parameter leaf
/// that was loaded into the graph. Parameters off the loss path get zeros.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// L2 norm over the concatenation of all gradient buffers.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, c: f64) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }

    /// Merge another gradient set into this one, summing shared names.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in other.iter() {
            match self.map.get_mut(name) {
                Some(t) => {
                    if t.shape() != g.shape() {
                        return Err(Error::Internal(format!(
                            "gradient shape mismatch for {name}"
                        )));
                    }
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }
}

/// Expression arena; see the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_ids: BTreeMap<String, TensorId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { op, value, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.input(Tensor::scalar(v))
    }

    /// Trainable leaf loaded from the store; repeated loads share one node so
    /// gradient contributions accumulate in a single slot.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let p = store.get(name)?;
        let value = Tensor::matrix(p.rows(), p.cols(), p.data.clone())?;
        let id = self.push(Op::Leaf, value, true);
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    fn rank2(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let t = &self.nodes[id.0].value;
        if t.shape().len() != 2 {
            return Err(Error::Internal(format!(
                "{what}: expected rank-2 value, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.rows(), t.cols()))
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::Internal(format!(
                "{what}: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    fn binary_map(
        &mut self,
        a: TensorId,
        b: TensorId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        self.same_shape(a, b, what)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, value, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[b.0].value.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("division by zero in graph".into()));
        }
        self.binary_map(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `a + b` with `b` a 1×C row broadcast over the rows of `a`.
    pub fn add_row_vec(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (_, ca) = self.rank2(a, "add_row_vec")?;
        let (rb, cb) = self.rank2(b, "add_row_vec")?;
        if rb != 1 || cb != ca {
            return Err(Error::Internal(format!(
                "add_row_vec: want 1×{ca} row, got {rb}×{cb}"
            )));
        }
        let bv = self.nodes[b.0].value.data().to_vec();
        let mut value = self.nodes[a.0].value.clone();
        for row in value.data_mut().chunks_mut(ca) {
            for (v, &w) in row.iter_mut().zip(&bv) {
                *v += w;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::AddRowVec(a, b), value, needs))
    }

    /// `a ⊙ b` with `b` a 1×C row broadcast over the rows of `a`.
    pub fn mul_row_vec(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (_, ca) = self.rank2(a, "mul_row_vec")?;
        let (rb, cb) = self.rank2(b, "mul_row_vec")?;
        if rb != 1 || cb != ca {
            return Err(Error::Internal(format!(
                "mul_row_vec: want 1×{ca} row, got {rb}×{cb}"
            )));
        }
        let bv = self.nodes[b.0].value.data().to_vec();
        let mut value = self.nodes[a.0].value.clone();
        for row in value.data_mut().chunks_mut(ca) {
            for (v, &w) in row.iter_mut().zip(&bv) {
                *v *= w;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MulRowVec(a, b), value, needs))
    }

    fn unary_map(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data = self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(op, value, needs)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary_map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary_map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, scalar::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, scalar::sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("log of non-positive value in graph".into()));
        }
        Ok(self.unary_map(a, f64::ln, Op::Log(a)))
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        self.unary_map(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].value.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of negative value in graph".into()));
        }
        Ok(self.unary_map(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp: lo {lo} > hi {hi}")));
        }
        Ok(self.unary_map(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi }))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Internal(format!(
                "matmul: inner dims {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_acc(
            &mut out,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            ka,
            n,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, needs))
    }

    /// `a · bᵀ` (used for attention scores without materializing transposes).
    pub fn matmul_tb(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rank2(a, "matmul_tb")?;
        let (n, kb) = self.rank2(b, "matmul_tb")?;
        if ka != kb {
            return Err(Error::Internal(format!(
                "matmul_tb: inner dims {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_tb_acc(
            &mut out,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            ka,
            n,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulTransB(a, b), Tensor::matrix(m, n, out)?, needs))
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.rank2(a, "softmax_rows")?;
        let mut data = self.nodes[a.0].value.data().to_vec();
        kernels::softmax_rows_in_place(&mut data, r, c);
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxRows(a), Tensor::matrix(r, c, data)?, needs))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part;
    /// compose with [`Graph::mul_row_vec`] and [`Graph::add_row_vec`]).
    pub fn layer_norm_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.rank2(a, "layer_norm_rows")?;
        let mut out = vec![0.0; r * c];
        kernels::layer_norm_rows(self.nodes[a.0].value.data(), r, c, LAYER_NORM_EPS, &mut out);
        let needs = self.needs(a);
        Ok(self.push(Op::LayerNormRows(a), Tensor::matrix(r, c, out)?, needs))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].value.data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), needs)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.nodes[a.0].value.data().iter().sum::<f64>() / n;
        let needs = self.needs(a);
        self.push(Op::MeanAll(a), Tensor::scalar(s), needs)
    }

    /// Column means: R×C → 1×C (mean pooling over time).
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.rank2(a, "mean_rows")?;
        let mut out = vec![0.0; c];
        for row in self.nodes[a.0].value.data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let needs = self.needs(a);
        Ok(self.push(Op::MeanRows(a), Tensor::matrix(1, c, out)?, needs))
    }

    /// Broadcast a 1×C row to `rows`×C.
    pub fn repeat_rows(&mut self, a: TensorId, rows: usize) -> Result<TensorId> {
        let (r, c) = self.rank2(a, "repeat_rows")?;
        if r != 1 {
            return Err(Error::Internal(format!("repeat_rows: source has {r} rows")));
        }
        if rows == 0 {
            return Err(Error::InvalidArgument("repeat_rows: zero target rows".into()));
        }
        let src = self.nodes[a.0].value.data().to_vec();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&src);
        }
        let needs = self.needs(a);
        Ok(self.push(Op::RepeatRows(a), Tensor::matrix(rows, c, out)?, needs))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols: no inputs".into()));
        }
        let (r, _) = self.rank2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.rank2(p, "concat_cols")?;
            if rp != r {
                return Err(Error::Internal(format!(
                    "concat_cols: row mismatch {rp} vs {r}"
                )));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.nodes[p.0].value.data();
                out.extend_from_slice(&d[row * w..(row + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(r, total, out)?, needs))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.rank2(a, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::Internal(format!(
                "slice_cols: [{start}, {}) out of 0..{c}",
                start + len
            )));
        }
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&d[row * c + start..row * c + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SliceCols { x: a, start, len }, Tensor::matrix(r, len, out)?, needs))
    }

    /// "Same"-padded 1-D convolution over time. `x` is T×Cin, `w` is a
    /// (k·Cin)×Cout leaf holding k stacked Cin×Cout tap blocks, `bias` 1×Cout.
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        k: usize,
        dilation: usize,
    ) -> Result<TensorId> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("conv1d: kernel width {k} must be odd")));
        }
        if dilation < 1 {
            return Err(Error::InvalidArgument(format!("conv1d: dilation {dilation} < 1")));
        }
        let (t, cin) = self.rank2(x, "conv1d x")?;
        let (wr, cout) = self.rank2(w, "conv1d w")?;
        if wr != k * cin {
            return Err(Error::Internal(format!(
                "conv1d: weight rows {wr} != k·Cin = {}",
                k * cin
            )));
        }
        let mut out = vec![0.0; t * cout];
        if let Some(b) = bias {
            let (rb, cb) = self.rank2(b, "conv1d bias")?;
            if rb != 1 || cb != cout {
                return Err(Error::Internal(format!(
                    "conv1d: bias {rb}×{cb}, want 1×{cout}"
                )));
            }
            let bd = self.nodes[b.0].value.data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bd);
            }
        }
        kernels::conv1d_acc(
            &mut out,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            t,
            cin,
            cout,
            k,
            dilation,
        );
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Op::Conv1d { x, w, bias, k, dilation },
            Tensor::matrix(t, cout, out)?,
            needs,
        ))
    }

    /// Depthwise temporal convolution whose single k-tap filter (`w` is 1×k,
    /// k odd) is shared across every column of `x`.
    pub fn shared_tap_conv(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (t, c) = self.rank2(x, "shared_tap_conv x")?;
        let (wr, k) = self.rank2(w, "shared_tap_conv w")?;
        if wr != 1 || k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "shared_tap_conv: want a 1×odd tap row, got {wr}×{k}"
            )));
        }
        let pad = (k - 1) / 2;
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data().to_vec();
        let mut out = vec![0.0; t * c];
        for tap in 0..k {
            let wv = wd[tap];
            if wv == 0.0 {
                continue;
            }
            let off = tap as isize - pad as isize;
            for to in 0..t {
                let ti = to as isize + off;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let src = &xd[ti as usize * c..(ti as usize + 1) * c];
                let dst = &mut out[to * c..(to + 1) * c];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += wv * v;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Op::SharedTapConv { x, w }, Tensor::matrix(t, c, out)?, needs))
    }

    /// Mean over non-overlapping windows of `factor` rows, zero-padded on the
    /// right; output has ceil(T/factor) rows and the divisor is always
    /// `factor`.
    pub fn avg_pool_time(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        if factor < 1 {
            return Err(Error::InvalidArgument(format!("avg_pool_time: factor {factor} < 1")));
        }
        let (t, c) = self.rank2(x, "avg_pool_time")?;
        let to = t.div_ceil(factor);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; to * c];
        for ti in 0..t {
            let dst = &mut out[(ti / factor) * c..(ti / factor + 1) * c];
            let src = &xd[ti * c..(ti + 1) * c];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= factor as f64);
        let needs = self.needs(x);
        Ok(self.push(Op::AvgPoolTime { x, factor }, Tensor::matrix(to, c, out)?, needs))
    }

    /// Nearest-neighbor upsampling along time, truncated to `out_len` rows
    /// (`out_len` ≤ T·factor covers non-divisible reductions).
    pub fn upsample_time(&mut self, x: TensorId, factor: usize, out_len: usize) -> Result<TensorId> {
        if factor < 1 {
            return Err(Error::InvalidArgument(format!("upsample_time: factor {factor} < 1")));
        }
        let (t, c) = self.rank2(x, "upsample_time")?;
        if out_len == 0 || out_len > t * factor {
            return Err(Error::Internal(format!(
                "upsample_time: target {out_len} outside (0, {}]",
                t * factor
            )));
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(out_len * c);
        for to in 0..out_len {
            let ti = to / factor;
            out.extend_from_slice(&xd[ti * c..(ti + 1) * c]);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::UpsampleTime { x, factor }, Tensor::matrix(out_len, c, out)?, needs))
    }

    /// Gather rows of an embedding table; gradient scatters back.
    pub fn embed_rows(&mut self, table: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (v, d) = self.rank2(table, "embed_rows")?;
        if idx.is_empty() {
            return Err(Error::InvalidArgument("embed_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Internal(format!("embed_rows: index {bad} ≥ vocab {v}")));
        }
        let td = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::EmbedRows { table, idx: idx.to_vec() },
            Tensor::matrix(idx.len(), d, out)?,
            needs,
        ))
    }

    /// Elementwise KL(q‖p) between diagonal Gaussians given mean/log-std
    /// pairs: log(σp/σq) + (σq² + (μq−μp)²)/(2σp²) − ½.
    pub fn gaussian_kl(
        &mut self,
        mq: TensorId,
        lsq: TensorId,
        mp: TensorId,
        lsp: TensorId,
    ) -> Result<TensorId> {
        self.same_shape(mq, lsq, "gaussian_kl")?;
        self.same_shape(mq, mp, "gaussian_kl")?;
        self.same_shape(mq, lsp, "gaussian_kl")?;
        let n = self.nodes[mq.0].value.len();
        let mut out = Vec::with_capacity(n);
        {
            let (dmq, dlsq) = (self.nodes[mq.0].value.data(), self.nodes[lsq.0].value.data());
            let (dmp, dlsp) = (self.nodes[mp.0].value.data(), self.nodes[lsp.0].value.data());
            for i in 0..n {
                let d = dmq[i] - dmp[i];
                let vq = (2.0 * dlsq[i]).exp();
                let vp = (2.0 * dlsp[i]).exp();
                out.push(dlsp[i] - dlsq[i] + (vq + d * d) / (2.0 * vp) - 0.5);
            }
        }
        let shape = self.nodes[mq.0].value.shape().to_vec();
        let needs =
            self.needs(mq) || self.needs(lsq) || self.needs(mp) || self.needs(lsp);
        Ok(self.push(Op::GaussianKl { mq, lsq, mp, lsp }, Tensor::new(shape, out)?, needs))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn stop_grad(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.clone();
        self.push(Op::StopGrad, value, false)
    }

    /// `x·W + b` (b optional).
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_vec(y, b),
            None => Ok(y),
        }
    }

    /// Inverted dropout: identity when `training` is false, otherwise zeroes
    /// entries with probability `rate` and scales survivors by 1/(1−rate).
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        rng: &mut Rng,
        training: bool,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout: rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.len();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let m = self.input(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar loss; returns per-parameter gradients.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Internal(format!(
                "backward: loss has shape {:?}, want a scalar",
                ln.value.shape()
            )));
        }
        if !ln.value.data()[0].is_finite() {
            return Err(Error::Numeric("backward: loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf | Op::StopGrad) {
                continue;
            }
            let Some(go) = grads[id].take() else { continue };
            self.backprop(id, &go, &mut grads)?;
        }
        let mut map = BTreeMap::new();
        for (name, &id) in &self.param_ids {
            let node = &self.nodes[id.0];
            let t = match grads[id.0].take() {
                Some(g) => Tensor::new(node.value.shape().to_vec(), g)?,
                None => Tensor::zeros(node.value.shape().to_vec()),
            };
            map.insert(name.clone(), t);
        }
        Ok(Gradients { map })
    }

    /// Ensure a parent's gradient buffer exists and return it.
    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], p: TensorId) -> &'a mut [f64] {
        let n = self.nodes[p.0].value.len();
        grads[p.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
    }

    fn backprop(&self, id: usize, go: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    for (g, &v) in self.slot(grads, *a).iter_mut().zip(go) {
                        *g += v;
                    }
                }
                if self.needs(*b) {
                    for (g, &v) in self.slot(grads, *b).iter_mut().zip(go) {
                        *g += v;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    for (g, &v) in self.slot(grads, *a).iter_mut().zip(go) {
                        *g += v;
                    }
                }
                if self.needs(*b) {
                    for (g, &v) in self.slot(grads, *b).iter_mut().zip(go) {
                        *g -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let ga = self.slot(grads, *a);
                    for i in 0..go.len() {
                        ga[i] += go[i] * bd[i];
                    }
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let gb = self.slot(grads, *b);
                    for i in 0..go.len() {
                        gb[i] += go[i] * ad[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = self.nodes[b.0].value.data();
                if self.needs(*a) {
                    let ga = self.slot(grads, *a);
                    for i in 0..go.len() {
                        ga[i] += go[i] / bd[i];
                    }
                }
                if self.needs(*b) {
                    let yd = node.value.data();
                    let gb = self.slot(grads, *b);
                    for i in 0..go.len() {
                        gb[i] -= go[i] * yd[i] / bd[i];
                    }
                }
            }
            Op::AddRowVec(a, b) => {
                let c = self.nodes[b.0].value.cols();
                if self.needs(*a) {
                    for (g, &v) in self.slot(grads, *a).iter_mut().zip(go) {
                        *g += v;
                    }
                }
                if self.needs(*b) {
                    let gb = self.slot(grads, *b);
                    for (i, &v) in go.iter().enumerate() {
                        gb[i % c] += v;
                    }
                }
            }
            Op::MulRowVec(a, b) => {
                let c = self.nodes[b.0].value.cols();
                if self.needs(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let ga = self.slot(grads, *a);
                    for (i, &v) in go.iter().enumerate() {
                        ga[i] += v * bd[i % c];
                    }
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let gb = self.slot(grads, *b);
                    for (i, &v) in go.iter().enumerate() {
                        gb[i % c] += v * ad[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    for (g, &v) in self.slot(grads, *a).iter_mut().zip(go) {
                        *g += c * v;
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    for (g, &v) in self.slot(grads, *a).iter_mut().zip(go) {
                        *g += v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                if self.needs(*a) {
                    let bd = self.nodes[b.0].value.data();
                    kernels::mm_tb_acc(self.slot(grads, *a), go, bd, m, n, k);
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].value.data();
                    kernels::mm_ta_acc(self.slot(grads, *b), ad, go, m, k, n);
                }
            }
            Op::MatMulTransB(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.rows();
                if self.needs(*a) {
                    let bd = self.nodes[b.0].value.data();
                    kernels::mm_acc(self.slot(grads, *a), go, bd, m, n, k);
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].value.data();
                    kernels::mm_ta_acc(self.slot(grads, *b), go, ad, m, n, k);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data();
                    let ga = self.slot(grads, *a);
                    for i in 0..go.len() {
                        ga[i] += go[i] * scalar::dgelu(xd[i]);
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data();
                    let ga = self.slot(grads, *a);
                    for i in 0..go.len() {
                        if xd[i] > 0.0 {
                            ga[i] += go[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let yd = node.value.data();
                    let ga = self.slot(grads, *a);
                    for i in 0..go.len() {
                        ga[i] += go[i] * yd[i] * (1.0 - yd[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let yd = node.value.data();
                    let ga = self.slot(grads, *a);
                    for i in 0..go.len() {
                        ga[i] += go[i] * yd[i];
                    }
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data();
                    let ga = self.slot(grads, *a);
                    for i in 0..go.len() {
                        ga[i] += go[i] / xd[i];
                    }
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data();
                    let ga = self.slot(grads, *a);
                    for i in 0..go.len() {
                        ga[i] += go[i] * xd[i].signum() * (xd[i] != 0.0) as u8 as f64;
                    }
                }
            }
            Op::Square(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data();
                    let ga = self.slot(grads, *a);
                    for i in 0..go.len() {
                        ga[i] += go[i] * 2.0 * xd[i];
                    }
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let yd = node.value.data();
                    let ga = self.slot(grads, *a);
                    for i in 0..go.len() {
                        if yd[i] > 0.0 {
                            ga[i] += go[i] / (2.0 * yd[i]);
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let xd = self.nodes[x.0].value.data();
                    let gx = self.slot(grads, *x);
                    for i in 0..go.len() {
                        if xd[i] > *lo && xd[i] < *hi {
                            gx[i] += go[i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let yd = node.value.data();
                    let c = node.value.cols();
                    let ga = self.slot(grads, *a);
                    for r in 0..node.value.rows() {
                        let y = &yd[r * c..(r + 1) * c];
                        let g = &go[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).sum();
                        let out = &mut ga[r * c..(r + 1) * c];
                        for i in 0..c {
                            out[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data();
                    let yd = node.value.data();
                    let c = node.value.cols();
                    let ga = self.slot(grads, *a);
                    for r in 0..node.value.rows() {
                        let x = &xd[r * c..(r + 1) * c];
                        let y = &yd[r * c..(r + 1) * c];
                        let g = &go[r * c..(r + 1) * c];
                        let mean = x.iter().sum::<f64>() / c as f64;
                        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let gmean = g.iter().sum::<f64>() / c as f64;
                        let gydot = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum::<f64>() / c as f64;
                        let out = &mut ga[r * c..(r + 1) * c];
                        for i in 0..c {
                            out[i] += inv * (g[i] - gmean - y[i] * gydot);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let v = go[0];
                    for g in self.slot(grads, *a).iter_mut() {
                        *g += v;
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.len() as f64;
                    let v = go[0] / n;
                    for g in self.slot(grads, *a).iter_mut() {
                        *g += v;
                    }
                }
            }
            Op::MeanRows(a) => {
                if self.needs(*a) {
                    let r = self.nodes[a.0].value.rows() as f64;
                    let c = node.value.cols();
                    let ga = self.slot(grads, *a);
                    for (i, g) in ga.iter_mut().enumerate() {
                        *g += go[i % c] / r;
                    }
                }
            }
            Op::RepeatRows(x) => {
                if self.needs(*x) {
                    let c = node.value.cols();
                    let gx = self.slot(grads, *x);
                    for (i, &v) in go.iter().enumerate() {
                        gx[i % c] += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.needs(p) {
                        let gp = self.slot(grads, p);
                        for r in 0..rows {
                            let src = &go[r * total + start..r * total + start + w];
                            let dst = &mut gp[r * w..(r + 1) * w];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let c = self.nodes[x.0].value.cols();
                    let gx = self.slot(grads, *x);
                    for r in 0..node.value.rows() {
                        let src = &go[r * len..(r + 1) * len];
                        let dst = &mut gx[r * c + start..r * c + start + len];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Conv1d { x, w, bias, k, dilation } => {
                let (t, cin) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let cout = node.value.cols();
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                if need_x || need_w {
                    let xd = self.nodes[x.0].value.data();
                    let wd = self.nodes[w.0].value.data();
                    let mut dxs = vec![0.0; t * cin];
                    let mut dws = vec![0.0; k * cin * cout];
                    kernels::conv1d_backward(
                        go, xd, wd, t, cin, cout, *k, *dilation, &mut dxs, &mut dws,
                    );
                    if need_x {
                        for (g, &v) in self.slot(grads, *x).iter_mut().zip(&dxs) {
                            *g += v;
                        }
                    }
                    if need_w {
                        for (g, &v) in self.slot(grads, *w).iter_mut().zip(&dws) {
                            *g += v;
                        }
                    }
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let gb = self.slot(grads, *b);
                        for (i, &v) in go.iter().enumerate() {
                            gb[i % cout] += v;
                        }
                    }
                }
            }
            Op::SharedTapConv { x, w } => {
                let (t, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let k = self.nodes[w.0].value.cols();
                let pad = (k - 1) / 2;
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    for tap in 0..k {
                        let wv = wd[tap];
                        if wv == 0.0 {
                            continue;
                        }
                        let off = tap as isize - pad as isize;
                        for to in 0..t {
                            let ti = to as isize + off;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let dst = &mut gx[ti as usize * c..(ti as usize + 1) * c];
                            let src = &go[to * c..(to + 1) * c];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
                if self.needs(*w) {
                    let gw = self.slot(grads, *w);
                    for tap in 0..k {
                        let off = tap as isize - pad as isize;
                        let mut acc = 0.0;
                        for to in 0..t {
                            let ti = to as isize + off;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let xs = &xd[ti as usize * c..(ti as usize + 1) * c];
                            let gs = &go[to * c..(to + 1) * c];
                            acc += xs.iter().zip(gs).map(|(&a, &b)| a * b).sum::<f64>();
                        }
                        gw[tap] += acc;
                    }
                }
            }
            Op::AvgPoolTime { x, factor } => {
                if self.needs(*x) {
                    let c = node.value.cols();
                    let inv = 1.0 / *factor as f64;
                    let t = self.nodes[x.0].value.rows();
                    let gx = self.slot(grads, *x);
                    for ti in 0..t {
                        let src = &go[(ti / factor) * c..(ti / factor + 1) * c];
                        let dst = &mut gx[ti * c..(ti + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s * inv;
                        }
                    }
                }
            }
            Op::UpsampleTime { x, factor } => {
                if self.needs(*x) {
                    let c = node.value.cols();
                    let out_len = node.value.rows();
                    let gx = self.slot(grads, *x);
                    for to in 0..out_len {
                        let ti = to / factor;
                        let dst = &mut gx[ti * c..(ti + 1) * c];
                        let src = &go[to * c..(to + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::EmbedRows { table, idx } => {
                if self.needs(*table) {
                    let d = node.value.cols();
                    let gt = self.slot(grads, *table);
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &go[r * d..(r + 1) * d];
                        let dst = &mut gt[i * d..(i + 1) * d];
                        for (g, &s) in dst.iter_mut().zip(src) {
                            *g += s;
                        }
                    }
                }
            }
            Op::GaussianKl { mq, lsq, mp, lsp } => {
                let dmq = self.nodes[mq.0].value.data();
                let dlsq = self.nodes[lsq.0].value.data();
                let dmp = self.nodes[mp.0].value.data();
                let dlsp = self.nodes[lsp.0].value.data();
                let n = go.len();
                if self.needs(*mq) {
                    let g = self.slot(grads, *mq);
                    for i in 0..n {
                        let vp = (2.0 * dlsp[i]).exp();
                        g[i] += go[i] * (dmq[i] - dmp[i]) / vp;
                    }
                }
                if self.needs(*mp) {
                    let g = self.slot(grads, *mp);
                    for i in 0..n {
                        let vp = (2.0 * dlsp[i]).exp();
                        g[i] -= go[i] * (dmq[i] - dmp[i]) / vp;
                    }
                }
                if self.needs(*lsq) {
                    let g = self.slot(grads, *lsq);
                    for i in 0..n {
                        let r = (2.0 * (dlsq[i] - dlsp[i])).exp();
                        g[i] += go[i] * (r - 1.0);
                    }
                }
                if self.needs(*lsp) {
                    let g = self.slot(grads, *lsp);
                    for i in 0..n {
                        let d = dmq[i] - dmp[i];
                        let vq = (2.0 * dlsq[i]).exp();
                        let vp = (2.0 * dlsp[i]).exp();
                        g[i] += go[i] * (1.0 - (vq + d * d) / vp);
                    }
                }
            }
            Op::StopGrad => {}
        }
        Ok(())
    }
}
