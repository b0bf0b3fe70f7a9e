//! Forward and backward kernels over plain slices.
//!
//! Every reduction accumulates in a fixed sequential order. Inner loops are
//! written in axpy form (`c[j] += a * b[j]`) so they vectorize without
//! reassociating any sum; the AVX2 path is the same code compiled with wider
//! registers and no fused multiply-add, so it is bitwise identical to the
//! portable path.

use super::{Result, Scalar, Tensor, TensorError};

/// `c[m×n] = a[m×k] · b[k×n]`, each `c[i][j]` summed left to right over k.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2(m, k, n, a, b, c) };
            return;
        }
    }
    gemm_portable(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_portable(m, k, n, a, b, c);
}

const MR: usize = 4;
const NR: usize = 16;

#[inline(always)]
fn gemm_portable<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if n == 0 || m == 0 {
        return;
    }
    // Pack `b` into zero-padded column panels of NR so the microkernel
    // streams contiguous memory. Padding only feeds discarded columns.
    let panels = n.div_ceil(NR);
    let mut packed = vec![T::zero(); panels * k * NR];
    for (p, panel) in packed.chunks_exact_mut(k * NR).enumerate() {
        let j0 = p * NR;
        let w = NR.min(n - j0);
        for kk in 0..k {
            panel[kk * NR..kk * NR + w].copy_from_slice(&b[kk * n + j0..kk * n + j0 + w]);
        }
    }
    let mut i = 0;
    while i < m {
        let rows = MR.min(m - i);
        for (p, panel) in packed.chunks_exact(k * NR).enumerate() {
            let j0 = p * NR;
            let w = NR.min(n - j0);
            // Accumulators start at zero and add a·b in increasing k.
            let mut acc = [[T::zero(); NR]; MR];
            if rows == MR {
                microkernel::<T, MR>(&a[i * k..], k, panel, &mut acc);
            } else {
                for r in 0..rows {
                    let mut one = [[T::zero(); NR]; 1];
                    microkernel::<T, 1>(&a[(i + r) * k..], k, panel, &mut one);
                    acc[r] = one[0];
                }
            }
            for (r, acc_r) in acc.iter().enumerate().take(rows) {
                c[(i + r) * n + j0..(i + r) * n + j0 + w].copy_from_slice(&acc_r[..w]);
            }
        }
        i += MR;
    }
}

#[inline(always)]
fn microkernel<T: Scalar, const R: usize>(a: &[T], k: usize, panel: &[T], acc: &mut [[T; NR]; R]) {
    for kk in 0..k {
        let bp: &[T; NR] = panel[kk * NR..(kk + 1) * NR].try_into().unwrap();
        for (r, acc_r) in acc.iter_mut().enumerate() {
            let av = a[r * k + kk];
            for (x, &bv) in acc_r.iter_mut().zip(bp) {
                *x += av * bv;
            }
        }
    }
}

/// `y += alpha * x`.
#[inline(always)]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose2d<T: Scalar>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Batch/matrix split of a matmul operand: `(batch, rows, cols)`.
fn matrix_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        0 | 1 => None,
        r => Some((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1])),
    }
}

/// Output shape of `a · b`, with batch dims either equal or absent on one side.
pub fn matmul_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let err = || TensorError::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let (_, m, k) = matrix_dims(a).ok_or_else(err)?;
    let (_, k2, n) = matrix_dims(b).ok_or_else(err)?;
    if k != k2 {
        return Err(err());
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = if bb.is_empty() {
        ab
    } else if ab.is_empty() || ab == bb {
        bb
    } else {
        return Err(err());
    };
    let mut out = batch.to_vec();
    out.extend([m, n]);
    Ok(out)
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = matmul_shape(a.shape(), b.shape())?;
    let (ba, m, k) = matrix_dims(a.shape()).unwrap();
    let (bb, _, n) = matrix_dims(b.shape()).unwrap();
    let mut out = vec![T::zero(); shape.iter().product()];
    if bb == 1 && b.rank() == 2 {
        // Shared right operand: one tall product.
        gemm(ba * m, k, n, a.data(), b.data(), &mut out);
    } else {
        let batch = ba.max(bb);
        for p in 0..batch {
            let a_off = if a.rank() == 2 { 0 } else { p * m * k };
            gemm(
                m,
                k,
                n,
                &a.data()[a_off..a_off + m * k],
                &b.data()[p * k * n..(p + 1) * k * n],
                &mut out[p * m * n..(p + 1) * m * n],
            );
        }
    }
    Tensor::new(shape, out)
}

/// Gradients of `c = a · b` given `dc`.
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dc: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (ba, m, k) = matrix_dims(a.shape()).unwrap();
    let (bb, _, n) = matrix_dims(b.shape()).unwrap();
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); b.len()];
    let mut bt = vec![T::zero(); k * n];
    if bb == 1 && b.rank() == 2 {
        let rows = ba * m;
        transpose2d(k, n, b.data(), &mut bt);
        gemm(rows, n, k, dc.data(), &bt, &mut da);
        let mut at = vec![T::zero(); rows * k];
        transpose2d(rows, k, a.data(), &mut at);
        gemm(k, rows, n, &at, dc.data(), &mut db);
    } else {
        let batch = ba.max(bb);
        let mut at = vec![T::zero(); m * k];
        let mut tmp_a = vec![T::zero(); m * k];
        let mut tmp_b = vec![T::zero(); k * n];
        for p in 0..batch {
            let a_off = if a.rank() == 2 { 0 } else { p * m * k };
            let a_p = &a.data()[a_off..a_off + m * k];
            let b_p = &b.data()[p * k * n..(p + 1) * k * n];
            let dc_p = &dc.data()[p * m * n..(p + 1) * m * n];
            transpose2d(k, n, b_p, &mut bt);
            gemm(m, n, k, dc_p, &bt, &mut tmp_a);
            for (d, &v) in da[a_off..a_off + m * k].iter_mut().zip(&tmp_a) {
                *d += v;
            }
            transpose2d(m, k, a_p, &mut at);
            gemm(k, m, n, &at, dc_p, &mut tmp_b);
            db[p * k * n..(p + 1) * k * n].copy_from_slice(&tmp_b);
        }
    }
    (
        Tensor::new(a.shape().to_vec(), da).unwrap(),
        Tensor::new(b.shape().to_vec(), db).unwrap(),
    )
}

pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, r, c) = matrix_dims(x.shape())
        .ok_or_else(|| TensorError::Usage(format!("transpose_last2 needs rank >= 2, got {:?}", x.shape())))?;
    let mut out = vec![T::zero(); x.len()];
    for p in 0..batch {
        transpose2d(
            r,
            c,
            &x.data()[p * r * c..(p + 1) * r * c],
            &mut out[p * r * c..(p + 1) * r * c],
        );
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape.swap(n - 1, n - 2);
    Tensor::new(shape, out)
}

pub fn concat_lastdim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(TensorError::Shape {
            op: "concat_lastdim",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (d1, d2) = (a.last_dim(), b.last_dim());
    let rows = a.len() / d1.max(1);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * d1..(r + 1) * d1]);
        out.extend_from_slice(&b.data()[r * d2..(r + 1) * d2]);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = d1 + d2;
    Tensor::new(shape, out)
}

/// Splits the gradient of a last-dim concatenation back into its parts.
pub fn split_lastdim<T: Scalar>(g: &Tensor<T>, d1: usize) -> (Tensor<T>, Tensor<T>) {
    let d = g.last_dim();
    let d2 = d - d1;
    let rows = g.len() / d;
    let mut a = Vec::with_capacity(rows * d1);
    let mut b = Vec::with_capacity(rows * d2);
    for r in 0..rows {
        a.extend_from_slice(&g.data()[r * d..r * d + d1]);
        b.extend_from_slice(&g.data()[r * d + d1..(r + 1) * d]);
    }
    let mut sa = g.shape().to_vec();
    let mut sb = g.shape().to_vec();
    *sa.last_mut().unwrap() = d1;
    *sb.last_mut().unwrap() = d2;
    (Tensor::new(sa, a).unwrap(), Tensor::new(sb, b).unwrap())
}

pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(TensorError::Index {
            op: "narrow",
            index: start + len,
            size: shape.get(axis).copied().unwrap_or(0),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * shape[axis] * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut s = shape.to_vec();
    s[axis] = len;
    Tensor::new(s, out)
}

/// Scatters a narrowed gradient back into a zero tensor of the source shape.
pub fn narrow_backward<T: Scalar>(src_shape: &[usize], axis: usize, start: usize, g: &Tensor<T>) -> Tensor<T> {
    let len = g.shape()[axis];
    let outer: usize = src_shape[..axis].iter().product();
    let inner: usize = src_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(src_shape.to_vec());
    for o in 0..outer {
        let dst = o * src_shape[axis] * inner + start * inner;
        let src = o * len * inner;
        out.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    out
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid_scalar(x)
}

/// d silu / dx = σ(x) · (1 + x · (1 − σ(x))).
#[inline]
pub fn silu_grad_scalar<T: Scalar>(x: T) -> T {
    let s = sigmoid_scalar(x);
    s * (T::one() + x * (T::one() - s))
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if d == 0 {
        return Err(TensorError::Usage("softmax over empty last dim".into()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        softmax_row(row);
    }
    Ok(out)
}

/// `dx = y ⊙ (dy − Σ y·dy)` per row.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = y.last_dim();
    let mut dx = Tensor::zeros(y.shape().to_vec());
    for ((yr, gr), out) in y
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .zip(dx.data_mut().chunks_exact_mut(d))
    {
        let mut dot = T::zero();
        for (&a, &b) in yr.iter().zip(gr) {
            dot += a * b;
        }
        for ((o, &a), &b) in out.iter_mut().zip(yr).zip(gr) {
            *o = a * (b - dot);
        }
    }
    dx
}

/// RMSNorm over the last dim. Returns the output and per-row `1/rms`.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let d = x.last_dim();
    if gain.shape() != [d] {
        return Err(TensorError::Shape {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.len() / d.max(1);
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    let dn = T::from_usize(d);
    for (xr, or) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mut ss = T::zero();
        for &v in xr {
            ss += v * v;
        }
        let r = T::one() / (ss / dn + eps).sqrt();
        inv.push(r);
        for ((o, &v), &g) in or.iter_mut().zip(xr).zip(gain.data()) {
            *o = v * r * g;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv))
}

/// Gradients of RMSNorm with respect to the input and the gain.
pub fn rms_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    inv: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = x.last_dim();
    let dn = T::from_usize(d);
    let mut dx = vec![T::zero(); x.len()];
    let mut dg = vec![T::zero(); d];
    for (((xr, gr), dxr), &r) in x
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv)
    {
        // u = gain ⊙ dy; dx = r·u − x·r³·(x·u)/d
        let mut xu = T::zero();
        for ((&xv, &gv), &w) in xr.iter().zip(gr).zip(gain.data()) {
            xu += xv * gv * w;
        }
        let coef = r * r * r * xu / dn;
        for (((o, &xv), &gv), &w) in dxr.iter_mut().zip(xr).zip(gr).zip(gain.data()) {
            *o = r * gv * w - xv * coef;
        }
        for ((acc, &xv), &gv) in dg.iter_mut().zip(xr).zip(gr) {
            *acc += xv * r * gv;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![d], dg).unwrap(),
    )
}

/// Rotates consecutive pairs of `x[.., t, h, dh]` by per-position angles.
///
/// `cos`/`sin` are `[max_pos, dh/2]` tables; token `i` sits at absolute
/// position `offset + i`. `inverse` rotates by the negated angle, which is the
/// adjoint used in the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn rope_rotate<T: Scalar>(
    x: &[T],
    out: &mut [T],
    batch: usize,
    t: usize,
    heads: usize,
    dh: usize,
    offset: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let half = dh / 2;
    for b in 0..batch {
        for i in 0..t {
            let pos = offset + i;
            let c = &cos[pos * half..(pos + 1) * half];
            let s = &sin[pos * half..(pos + 1) * half];
            for h in 0..heads {
                let base = ((b * t + i) * heads + h) * dh;
                for j in 0..half {
                    let (x0, x1) = (x[base + 2 * j], x[base + 2 * j + 1]);
                    let (cj, sj) = (c[j], if inverse { -s[j] } else { s[j] });
                    out[base + 2 * j] = x0 * cj - x1 * sj;
                    out[base + 2 * j + 1] = x0 * sj + x1 * cj;
                }
            }
        }
    }
}

/// Geometry of a causal grouped-query attention call.
///
/// Queries are `[batch, tq, hq, dh]`, keys and values `[batch, tk, hkv, dh]`.
/// Query `i` sits at absolute position `tk - tq + i` and attends keys
/// `0..=tk - tq + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub hq: usize,
    pub hkv: usize,
    pub dh: usize,
}

impl AttnDims {
    fn offset(&self) -> usize {
        self.tk - self.tq
    }

    fn group(&self) -> usize {
        self.hq / self.hkv
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.hq * self.tq * self.tk
    }
}

/// Gathers head `h` of `[batch, t, heads, dh]` for batch `b` into `[dh, t]`.
fn gather_head_t<T: Scalar>(x: &[T], b: usize, h: usize, t: usize, heads: usize, dh: usize, dst: &mut [T]) {
    for j in 0..t {
        let base = ((b * t + j) * heads + h) * dh;
        for d in 0..dh {
            dst[d * t + j] = x[base + d];
        }
    }
}

/// Causal GQA forward. Writes `out` and, if given, the attention
/// probabilities `[batch, hq, tq, tk]` (zero above the diagonal).
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let AttnDims {
        batch,
        tq,
        tk,
        hq,
        hkv,
        dh,
    } = dims;
    let scale = T::one() / T::from_usize(dh).sqrt();
    let offset = dims.offset();
    let group = dims.group();
    let mut kt = vec![T::zero(); dh * tk];
    let mut scores = vec![T::zero(); tk];
    out.fill(T::zero());
    for b in 0..batch {
        for g in 0..hkv {
            gather_head_t(k, b, g, tk, hkv, dh, &mut kt);
            for h in g * group..(g + 1) * group {
                for i in 0..tq {
                    let n = offset + i + 1;
                    let qb = ((b * tq + i) * hq + h) * dh;
                    let s = &mut scores[..n];
                    s.fill(T::zero());
                    for d in 0..dh {
                        axpy(q[qb + d], &kt[d * tk..d * tk + n], s);
                    }
                    for sv in s.iter_mut() {
                        *sv *= scale;
                    }
                    softmax_row(s);
                    let o = &mut out[qb..qb + dh];
                    for (j, &p) in s.iter().enumerate() {
                        let vb = ((b * tk + j) * hkv + g) * dh;
                        axpy(p, &v[vb..vb + dh], o);
                    }
                    if let Some(pr) = probs.as_deref_mut() {
                        let pb = ((b * hq + h) * tq + i) * tk;
                        pr[pb..pb + n].copy_from_slice(s);
                    }
                }
            }
        }
    }
}

/// Causal GQA backward from saved probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dims: AttnDims,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let AttnDims {
        batch,
        tq,
        tk,
        hq,
        hkv,
        dh,
    } = dims;
    let scale = T::one() / T::from_usize(dh).sqrt();
    let offset = dims.offset();
    let group = dims.group();
    let mut vt = vec![T::zero(); dh * tk];
    let mut dp = vec![T::zero(); tk];
    dq.fill(T::zero());
    dk.fill(T::zero());
    dv.fill(T::zero());
    for b in 0..batch {
        for g in 0..hkv {
            gather_head_t(v, b, g, tk, hkv, dh, &mut vt);
            for h in g * group..(g + 1) * group {
                for i in 0..tq {
                    let n = offset + i + 1;
                    let qb = ((b * tq + i) * hq + h) * dh;
                    let pb = ((b * hq + h) * tq + i) * tk;
                    let p = &probs[pb..pb + n];
                    let go = &dout[qb..qb + dh];
                    // dp_j = dout_i · v_j
                    let dpj = &mut dp[..n];
                    dpj.fill(T::zero());
                    for d in 0..dh {
                        axpy(go[d], &vt[d * tk..d * tk + n], dpj);
                    }
                    let mut pdp = T::zero();
                    for (&pj, &dj) in p.iter().zip(dpj.iter()) {
                        pdp += pj * dj;
                    }
                    for (j, (&pj, dj)) in p.iter().zip(dpj.iter_mut()).enumerate() {
                        let kb = ((b * tk + j) * hkv + g) * dh;
                        axpy(pj, go, &mut dv[kb..kb + dh]);
                        // ds_j, pre-scaled
                        *dj = pj * (*dj - pdp) * scale;
                    }
                    for (j, &ds) in dpj.iter().enumerate() {
                        let kb = ((b * tk + j) * hkv + g) * dh;
                        axpy(ds, &k[kb..kb + dh], &mut dq[qb..qb + dh]);
                        axpy(ds, &q[qb..qb + dh], &mut dk[kb..kb + dh]);
                    }
                }
            }
        }
    }
}

/// Mean token NLL over non-ignored rows of `logits[rows, vocab]`.
///
/// Returns the loss, the softmax probabilities and the count of scored rows.
pub fn cross_entropy_forward<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
    ignore: Option<u32>,
) -> Result<(T, Vec<T>, usize)> {
    let rows = targets.len();
    let mut probs = logits.to_vec();
    let mut total = T::zero();
    let mut count = 0usize;
    for (r, &tgt) in targets.iter().enumerate() {
        let row = &mut probs[r * vocab..(r + 1) * vocab];
        if Some(tgt) == ignore {
            row.fill(T::zero());
            continue;
        }
        if tgt as usize >= vocab {
            return Err(TensorError::Index {
                op: "cross_entropy_logits",
                index: tgt as usize,
                size: vocab,
            });
        }
        let lr = &logits[r * vocab..(r + 1) * vocab];
        let mut max = T::neg_infinity();
        for &v in lr {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in lr {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - lr[tgt as usize];
        softmax_row(row);
        count += 1;
    }
    debug_assert_eq!(probs.len(), rows * vocab);
    let loss = if count == 0 {
        T::zero()
    } else {
        total / T::from_usize(count)
    };
    Ok((loss, probs, count))
}
