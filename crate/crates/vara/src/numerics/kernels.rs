//! Dense kernels behind the graph operations.
//!
//! All matrices are row-major. The accumulate variants (`*_acc`) add into the
//! destination, which lets convolution run as one matrix product per tap.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_tb_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            crow[j] += acc;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn mm_ta_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Row-wise softmax with max-subtraction, in place.
pub(crate) fn softmax_rows_in_place(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Normalize each row to zero mean, unit variance (no affine part).
pub(crate) fn layer_norm_rows(x: &[f64], rows: usize, cols: usize, eps: f64, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
}

/// Forward "same"-padded 1-D convolution over time.
///
/// `x` is T×Cin, `w` is laid out as k stacked Cin×Cout blocks, `out` is T×Cout
/// and must be zero-initialized (or hold the bias broadcast).
pub(crate) fn conv1d_acc(
    out: &mut [f64],
    x: &[f64],
    w: &[f64],
    t: usize,
    cin: usize,
    cout: usize,
    k: usize,
    dilation: usize,
) {
    let pad = dilation * (k - 1) / 2;
    for tap in 0..k {
        let off = (tap * dilation) as isize - pad as isize;
        // out rows [t0, t1) read x rows shifted by `off`.
        let t0 = if off < 0 { (-off) as usize } else { 0 };
        let t1 = if off > 0 {
            t.saturating_sub(off as usize)
        } else {
            t
        };
        if t0 >= t1 {
            continue;
        }
        let rows = t1 - t0;
        let x0 = (t0 as isize + off) as usize;
        mm_acc(
            &mut out[t0 * cout..t1 * cout],
            &x[x0 * cin..(x0 + rows) * cin],
            &w[tap * cin * cout..(tap + 1) * cin * cout],
            rows,
            cin,
            cout,
        );
    }
}

/// Gradient of [`conv1d_acc`] with respect to input and weights.
pub(crate) fn conv1d_backward(
    go: &[f64],
    x: &[f64],
    w: &[f64],
    t: usize,
    cin: usize,
    cout: usize,
    k: usize,
    dilation: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let pad = dilation * (k - 1) / 2;
    for tap in 0..k {
        let off = (tap * dilation) as isize - pad as isize;
        let t0 = if off < 0 { (-off) as usize } else { 0 };
        let t1 = if off > 0 {
            t.saturating_sub(off as usize)
        } else {
            t
        };
        if t0 >= t1 {
            continue;
        }
        let rows = t1 - t0;
        let x0 = (t0 as isize + off) as usize;
        // dX[x0..x0+rows] += go[t0..t1] · Wtapᵀ
        mm_tb_acc(
            &mut dx[x0 * cin..(x0 + rows) * cin],
            &go[t0 * cout..t1 * cout],
            &w[tap * cin * cout..(tap + 1) * cin * cout],
            rows,
            cout,
            cin,
        );
        // dWtap += X[x0..]ᵀ · go[t0..]
        mm_ta_acc(
            &mut dw[tap * cin * cout..(tap + 1) * cin * cout],
            &x[x0 * cin..(x0 + rows) * cin],
            &go[t0 * cout..t1 * cout],
            rows,
            cin,
            cout,
        );
    }
}
