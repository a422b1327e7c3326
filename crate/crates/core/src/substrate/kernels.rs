//! Slice-level numeric kernels shared by the autodiff graph and the
//! incremental inference path. Everything here is deterministic and
//! single-threaded.

use alloc::vec;
use alloc::vec::Vec;

use super::scalar::{lit, Scalar};

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Dense row-major view.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Column block `[col0, col0 + width)` of a dense row-major matrix.
    pub fn cols_of(data: &'a [T], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        Self {
            data: &data[col0.min(data.len())..],
            rows,
            cols: width,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// Strided mutable matrix view.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols_of(
        data: &'a mut [T],
        rows: usize,
        stride: usize,
        col0: usize,
        width: usize,
    ) -> Self {
        let start = col0.min(data.len());
        Self {
            data: &mut data[start..],
            rows,
            cols: width,
            rs: stride,
            cs: 1,
        }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = alpha * a * b + beta * c` over strided views.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    assert!(a.in_bounds() && b.in_bounds() && c.in_bounds(), "gemm view out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // Empty inner dimension: only the beta scaling applies.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x = if beta == T::zero() { T::zero() } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense `x[n, in] * w[in, out] (+ bias)` into a fresh buffer.
pub fn linear<T: Scalar>(x: &[T], n: usize, w: &[T], d_in: usize, d_out: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); n * d_out];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(
        T::one(),
        MatRef::dense(x, n, d_in),
        MatRef::dense(w, d_in, d_out),
        beta,
        MatMut::dense(&mut out, n, d_out),
    );
    out
}

/// Row-wise layer normalization. Returns the per-row mean and reciprocal
/// standard deviation for the backward pass.
pub fn layernorm_forward<T: Scalar>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let n = T::from_usize(cols).unwrap();
    for (xr, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..cols {
            orow[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

/// Accumulates input, gain and bias gradients of a layer normalization.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Scalar>(
    x: &[T],
    cols: usize,
    gain: &[T],
    means: &[T],
    rstds: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    mut dgain: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let n = T::from_usize(cols).unwrap();
    let mut xhat = vec![T::zero(); cols];
    let mut dxhat = vec![T::zero(); cols];
    let mut dx = dx;
    for (i, (xr, dr)) in x.chunks_exact(cols).zip(dout.chunks_exact(cols)).enumerate() {
        let (mean, rstd) = (means[i], rstds[i]);
        for j in 0..cols {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = dr[j] * gain[j];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..cols {
                dg[j] = dg[j] + dr[j] * xhat[j];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..cols {
                db[j] = db[j] + dr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let sum_d = dxhat.iter().copied().sum::<T>();
            let sum_dx = dxhat.iter().zip(&xhat).map(|(a, b)| *a * *b).sum::<T>();
            let row = &mut dx[i * cols..(i + 1) * cols];
            for j in 0..cols {
                row[j] = row[j] + rstd * (dxhat[j] - sum_d / n - xhat[j] * sum_dx / n);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; saturates cleanly at both ends.
#[inline]
fn tanh_exp<T: Scalar>(u: T) -> T {
    T::one() - lit::<T>(2.0) / ((u + u).exp() + T::one())
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + tanh_exp(inner))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let inner = c * (x + a * x * x * x);
    let th = tanh_exp(inner);
    let sech2 = T::one() - th * th;
    lit::<T>(0.5) * (T::one() + th) + lit::<T>(0.5) * x * sech2 * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows<T: Scalar>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Rotary angle tables `[positions, half]` for head width `head_dim`.
pub fn rotary_tables<T: Scalar>(positions: &[usize], head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let inv_freq = libm_pow(base, -(i as f64) / half as f64);
            let angle = p as f64 * inv_freq;
            cos.push(lit::<T>(num_traits::Float::cos(angle)));
            sin.push(lit::<T>(num_traits::Float::sin(angle)));
        }
    }
    (cos, sin)
}

fn libm_pow(base: f64, e: f64) -> f64 {
    num_traits::Float::powf(base, e)
}

/// Rotates every head of `x[rows, n_heads * head_dim]` in place, pairing
/// dimension `i` with `i + head_dim / 2`. `inverse` applies the transpose
/// rotation (used for gradients).
pub fn rotary_apply<T: Scalar>(
    x: &mut [T],
    cols: usize,
    n_heads: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let head_dim = cols / n_heads;
    let half = head_dim / 2;
    for (r, row) in x.chunks_exact_mut(cols).enumerate() {
        let c = &cos[r * half..(r + 1) * half];
        let s = &sin[r * half..(r + 1) * half];
        for h in 0..n_heads {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for i in 0..half {
                let (a, b) = (head[i], head[i + half]);
                let sn = if inverse { -s[i] } else { s[i] };
                head[i] = a * c[i] - b * sn;
                head[i + half] = a * sn + b * c[i];
            }
        }
    }
}

/// Multi-head scaled dot-product attention with an additive bias.
///
/// `q` is `[sq, d]`, `k`/`v` are `[sk, d]`, `bias` is `[sq, sk]`. Writes the
/// `[sq, d]` output and returns the per-head probability matrices
/// `[n_heads, sq, sk]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: &[T],
    sq: usize,
    sk: usize,
    d: usize,
    n_heads: usize,
    out: &mut [T],
) -> Vec<T> {
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut probs = vec![T::zero(); n_heads * sq * sk];
    for h in 0..n_heads {
        let p = &mut probs[h * sq * sk..(h + 1) * sq * sk];
        p.copy_from_slice(bias);
        gemm(
            scale,
            MatRef::cols_of(q, sq, d, h * dh, dh),
            MatRef::cols_of(k, sk, d, h * dh, dh).t(),
            T::one(),
            MatMut::dense(p, sq, sk),
        );
        softmax_rows(p, sk);
        gemm(
            T::one(),
            MatRef::dense(p, sq, sk),
            MatRef::cols_of(v, sk, d, h * dh, dh),
            T::zero(),
            MatMut::cols_of(out, sq, d, h * dh, dh),
        );
    }
    probs
}

/// Gradients of [`attention_forward`], accumulated into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    sq: usize,
    sk: usize,
    d: usize,
    n_heads: usize,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut ds = vec![T::zero(); sq * sk];
    for h in 0..n_heads {
        let p = &probs[h * sq * sk..(h + 1) * sq * sk];
        if let Some(dv) = dv.as_deref_mut() {
            gemm(
                T::one(),
                MatRef::dense(p, sq, sk).t(),
                MatRef::cols_of(dout, sq, d, h * dh, dh),
                T::one(),
                MatMut::cols_of(dv, sk, d, h * dh, dh),
            );
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        // dP = dout_h * v_h^T
        gemm(
            T::one(),
            MatRef::cols_of(dout, sq, d, h * dh, dh),
            MatRef::cols_of(v, sk, d, h * dh, dh).t(),
            T::zero(),
            MatMut::dense(&mut ds, sq, sk),
        );
        for (dr, pr) in ds.chunks_exact_mut(sk).zip(p.chunks_exact(sk)) {
            let dot = dr.iter().zip(pr).map(|(a, b)| *a * *b).sum::<T>();
            for (x, pv) in dr.iter_mut().zip(pr) {
                *x = *pv * (*x - dot);
            }
        }
        if let Some(dq) = dq.as_deref_mut() {
            gemm(
                scale,
                MatRef::dense(&ds, sq, sk),
                MatRef::cols_of(k, sk, d, h * dh, dh),
                T::one(),
                MatMut::cols_of(dq, sq, d, h * dh, dh),
            );
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(
                scale,
                MatRef::dense(&ds, sq, sk).t(),
                MatRef::cols_of(q, sq, d, h * dh, dh),
                T::one(),
                MatMut::cols_of(dk, sk, d, h * dh, dh),
            );
        }
    }
}

/// Additive causal bias `[len, len]`: 0 on and below the diagonal, a large
/// negative surrogate above it.
pub fn causal_bias<T: Scalar>(len: usize) -> Vec<T> {
    let neg = lit::<T>(MASKED);
    let mut m = vec![T::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = neg;
        }
    }
    m
}

/// Surrogate for minus infinity in additive attention masks.
pub const MASKED: f64 = -1e9;
