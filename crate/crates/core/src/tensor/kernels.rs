//! Raw slice kernels shared by the tape ops and the cached decoder.

use super::Scalar;

pub const RMS_EPS: f64 = 1e-5;

/// `c (m×n) = a (m×k) · b (k×n)`, all row-major.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    T::gemm(
        m,
        k,
        n,
        T::ONE,
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::ZERO,
        &mut c,
        n as isize,
        1,
    );
    c
}

/// `da += dc · bᵀ` where `a` is m×k, `b` is k×n.
pub fn matmul_grad_lhs<T: Scalar>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(
        m,
        n,
        k,
        T::ONE,
        dc,
        n as isize,
        1,
        b,
        1,
        n as isize,
        T::ONE,
        da,
        k as isize,
        1,
    );
}

/// `db += aᵀ · dc` where `a` is m×k, `b` is k×n.
pub fn matmul_grad_rhs<T: Scalar>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(
        k,
        m,
        n,
        T::ONE,
        a,
        1,
        k as isize,
        dc,
        n as isize,
        1,
        T::ONE,
        db,
        n as isize,
        1,
    );
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row
        .iter()
        .copied()
        .fold(None, |acc: Option<T>, v| match acc {
            Some(m) if m >= v => Some(m),
            _ => Some(v),
        })
        .unwrap_or(T::ZERO);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.to_f64();
    }
    let inv = T::from_f64(1.0 / sum);
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Log-sum-exp of a row, accumulated in double precision.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
    max + sum.ln()
}

/// Row-wise RMS normalisation with a learned gain. Returns the output and the
/// per-row reciprocal RMS needed by the backward pass.
pub fn rmsnorm_forward<T: Scalar>(x: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::ZERO; x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms: f64 = xr.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / d as f64;
        let ir = T::from_f64(1.0 / (ms + RMS_EPS).sqrt());
        inv.push(ir);
        for ((yo, &xi), &g) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *yo = xi * ir * g;
        }
    }
    (y, inv)
}

pub fn rmsnorm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv_rms: &[T],
    dy: &[T],
    d: usize,
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
) {
    let rows = x.len() / d;
    if let Some(dx) = dx {
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            let ir = inv_rms[r];
            let dot: f64 = xr
                .iter()
                .zip(dyr)
                .zip(gain)
                .map(|((&xi, &dyi), &g)| (xi * dyi * g).to_f64())
                .sum();
            let coef = T::from_f64(dot * ir.to_f64().powi(3) / d as f64);
            for (i, out) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
                *out += ir * gain[i] * dyr[i] - coef * xr[i];
            }
        }
    }
    if let Some(dg) = dgain {
        for r in 0..rows {
            let ir = inv_rms[r];
            for i in 0..d {
                dg[i] += dy[r * d + i] * x[r * d + i] * ir;
            }
        }
    }
}

/// Rotates consecutive pairs `(x[2j], x[2j+1])` of every head in every row.
/// `cos`/`sin` hold `head_dim / 2` coefficients per row. With `inverse` the
/// rotation runs backwards, which is exactly the adjoint.
pub fn rope_rotate<T: Scalar>(x: &mut [T], cos: &[T], sin: &[T], width: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    let rows = x.len() / width;
    for r in 0..rows {
        let c = &cos[r * half..(r + 1) * half];
        let s = &sin[r * half..(r + 1) * half];
        for head in x[r * width..(r + 1) * width].chunks_exact_mut(head_dim) {
            for j in 0..half {
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                let sj = if inverse { -s[j] } else { s[j] };
                head[2 * j] = a * c[j] - b * sj;
                head[2 * j + 1] = a * sj + b * c[j];
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Layout of a batched multi-head attention input `[batch·seq, heads·head_dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnLayout {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn gather(&self, x: &[impl Scalar], b: usize, h: usize) -> Vec<f64> {
        let w = self.width();
        let mut out = Vec::with_capacity(self.seq * self.head_dim);
        for i in 0..self.seq {
            let base = (b * self.seq + i) * w + h * self.head_dim;
            out.extend(x[base..base + self.head_dim].iter().map(|v| v.to_f64()));
        }
        out
    }

    fn scatter_add<T: Scalar>(&self, dst: &mut [T], src: &[f64], b: usize, h: usize) {
        let w = self.width();
        for i in 0..self.seq {
            let base = (b * self.seq + i) * w + h * self.head_dim;
            for (d, s) in dst[base..base + self.head_dim]
                .iter_mut()
                .zip(&src[i * self.head_dim..(i + 1) * self.head_dim])
            {
                *d += T::from_f64(*s);
            }
        }
    }
}

/// Causal scaled dot-product attention, computed per (batch, head) in double
/// precision. Returns the output and, if requested, the probability matrices
/// laid out as `[batch][head][query][key]`.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lay: AttnLayout,
    keep_probs: bool,
) -> (Vec<T>, Option<Vec<f64>>) {
    let (n, dh) = (lay.seq, lay.head_dim);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![T::ZERO; q.len()];
    let mut all = keep_probs.then(|| Vec::with_capacity(lay.batch * lay.heads * n * n));
    let mut p = vec![0.0f64; n * n];
    for b in 0..lay.batch {
        for h in 0..lay.heads {
            let qh = lay.gather(q, b, h);
            let kh = lay.gather(k, b, h);
            let vh = lay.gather(v, b, h);
            causal_probs(&qh, &kh, n, dh, scale, &mut p);
            let mut oh = vec![0.0f64; n * dh];
            f64::gemm(
                n,
                n,
                dh,
                1.0,
                &p,
                n as isize,
                1,
                &vh,
                dh as isize,
                1,
                0.0,
                &mut oh,
                dh as isize,
                1,
            );
            lay.scatter_add(&mut out, &oh, b, h);
            if let Some(all) = all.as_mut() {
                all.extend_from_slice(&p);
            }
        }
    }
    (out, all)
}

/// Softmax(q kᵀ · scale) with the strict upper triangle masked out.
fn causal_probs(qh: &[f64], kh: &[f64], n: usize, dh: usize, scale: f64, p: &mut [f64]) {
    f64::gemm(
        n,
        dh,
        n,
        scale,
        qh,
        dh as isize,
        1,
        kh,
        1,
        dh as isize,
        0.0,
        p,
        n as isize,
        1,
    );
    for i in 0..n {
        let row = &mut p[i * n..(i + 1) * n];
        softmax_row(&mut row[..=i]);
        row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Gradients of [`attention_forward`]; `probs` must come from the same call.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[f64],
    dout: &[T],
    lay: AttnLayout,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (n, dh) = (lay.seq, lay.head_dim);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0f64; n * n];
    for b in 0..lay.batch {
        for h in 0..lay.heads {
            let p = &probs[(b * lay.heads + h) * n * n..(b * lay.heads + h + 1) * n * n];
            let qh = lay.gather(q, b, h);
            let kh = lay.gather(k, b, h);
            let vh = lay.gather(v, b, h);
            let doh = lay.gather(dout, b, h);
            // dV = Pᵀ dO
            let mut dvh = vec![0.0f64; n * dh];
            f64::gemm(
                n,
                n,
                dh,
                1.0,
                p,
                1,
                n as isize,
                &doh,
                dh as isize,
                1,
                0.0,
                &mut dvh,
                dh as isize,
                1,
            );
            // dP = dO Vᵀ
            f64::gemm(
                n,
                dh,
                n,
                1.0,
                &doh,
                dh as isize,
                1,
                &vh,
                1,
                dh as isize,
                0.0,
                &mut dp,
                n as isize,
                1,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled by the logit scale
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dr = &mut dp[i * n..(i + 1) * n];
                let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { 0.0 };
                }
            }
            let mut dqh = vec![0.0f64; n * dh];
            let mut dkh = vec![0.0f64; n * dh];
            f64::gemm(
                n,
                n,
                dh,
                1.0,
                &dp,
                n as isize,
                1,
                &kh,
                dh as isize,
                1,
                0.0,
                &mut dqh,
                dh as isize,
                1,
            );
            f64::gemm(
                n,
                n,
                dh,
                1.0,
                &dp,
                1,
                n as isize,
                &qh,
                dh as isize,
                1,
                0.0,
                &mut dkh,
                dh as isize,
                1,
            );
            lay.scatter_add(dq, &dqh, b, h);
            lay.scatter_add(dk, &dkh, b, h);
            lay.scatter_add(dv, &dvh, b, h);
        }
    }
}

/// One query row against `m` cached keys/values for a single head.
/// Returns the probability row and writes the output into `out`.
pub fn attend_one(q: &[f64], keys: &[f64], values: &[f64], head_dim: usize, out: &mut [f64]) -> Vec<f64> {
    let m = keys.len() / head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut p: Vec<f64> = keys
        .chunks_exact(head_dim)
        .map(|kr| kr.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    softmax_row(&mut p);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &pj) in p.iter().enumerate().take(m) {
        for (o, &vv) in out.iter_mut().zip(&values[j * head_dim..(j + 1) * head_dim]) {
            *o += pj * vv;
        }
    }
    p
}
