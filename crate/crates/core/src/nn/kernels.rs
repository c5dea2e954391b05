//! Row-major kernels over packed rows. Forward functions write their
//! outputs; backward functions overwrite input gradients and accumulate
//! into parameter gradients. Reductions run sequentially in index order.

use super::tensor::Float;
use crate::error::{ElmError, Result};

/// Contiguous row range of one sequence inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// `y = x · w + b` with `x: n × din`, `w: din × dout`.
pub fn affine_forward<T: Float>(
    x: &[T],
    n: usize,
    din: usize,
    w: &[T],
    dout: usize,
    b: Option<&[T]>,
    y: &mut [T],
) {
    T::gemm(n, din, dout, x, false, w, false, T::zero(), y);
    if let Some(b) = b {
        for row in y.chunks_exact_mut(dout).take(n) {
            for (yi, &bi) in row.iter_mut().zip(b) {
                *yi += bi;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn affine_backward<T: Float>(
    x: &[T],
    n: usize,
    din: usize,
    w: &[T],
    dout: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        T::gemm(n, dout, din, dy, false, w, true, T::zero(), dx);
    }
    if let Some(dw) = dw {
        T::gemm(din, n, dout, x, true, dy, false, T::one(), dw);
    }
    if let Some(db) = db {
        for row in dy.chunks_exact(dout).take(n) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
}

pub const RMS_EPS: f64 = 1e-6;

/// RMSNorm with a learned gain. Writes the per-row reciprocal RMS to `rstd`.
pub fn rmsnorm_forward<T: Float>(
    x: &[T],
    n: usize,
    d: usize,
    gain: &[T],
    y: &mut [T],
    rstd: &mut [T],
) {
    let eps = T::cast_from(RMS_EPS);
    let dt = T::cast_from(d as f64);
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        let mut ss = T::zero();
        for &v in xr {
            ss += v * v;
        }
        let r = T::one() / (ss / dt + eps).sqrt();
        rstd[i] = r;
        for ((o, &v), &g) in y[i * d..(i + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = v * r * g;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn rmsnorm_backward<T: Float>(
    x: &[T],
    n: usize,
    d: usize,
    gain: &[T],
    rstd: &[T],
    dy: &[T],
    dx: &mut [T],
    dgain: Option<&mut [T]>,
) {
    let dt = T::cast_from(d as f64);
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let r = rstd[i];
        let mut dot = T::zero();
        for j in 0..d {
            dot += dyr[j] * gain[j] * xr[j];
        }
        let coef = r * r * r / dt * dot;
        for j in 0..d {
            dx[i * d + j] = r * gain[j] * dyr[j] - xr[j] * coef;
        }
    }
    if let Some(dg) = dgain {
        for i in 0..n {
            let r = rstd[i];
            for j in 0..d {
                dg[j] += dy[i * d + j] * x[i * d + j] * r;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu_forward<T: Float>(x: &[T], y: &mut [T]) {
    let c = T::cast_from(GELU_C);
    let a = T::cast_from(GELU_A);
    let half = T::cast_from(0.5);
    for (o, &v) in y.iter_mut().zip(x) {
        let u = c * (v + a * v * v * v);
        *o = half * v * (T::one() + u.tanh());
    }
}

pub fn gelu_backward<T: Float>(x: &[T], dy: &[T], dx: &mut [T]) {
    let c = T::cast_from(GELU_C);
    let a = T::cast_from(GELU_A);
    let half = T::cast_from(0.5);
    let three = T::cast_from(3.0);
    for ((g, &v), &d) in dx.iter_mut().zip(x).zip(dy) {
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let du = c * (T::one() + three * a * v * v);
        let local = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
        *g = local * d;
    }
}

/// Causal multi-head attention core on packed `qkv` rows laid out as
/// `[q | k | v]` (width `3d`). Writes the attention mixture to `out`
/// (width `d`) and the attention probabilities to `probs`, which holds
/// `heads × len × len` entries per segment, segments back to back.
pub fn attention_forward<T: Float>(
    qkv: &[T],
    segments: &[Segment],
    d: usize,
    heads: usize,
    out: &mut [T],
    probs: &mut [T],
) {
    let hd = d / heads;
    let scale = T::one() / T::cast_from(hd as f64).sqrt();
    let w3 = 3 * d;
    let mut poff = 0;
    for seg in segments {
        let t = seg.len;
        for h in 0..heads {
            for i in 0..t {
                let qrow = (seg.start + i) * w3 + h * hd;
                let prow = poff + (h * t + i) * t;
                let mut maxv = T::neg_infinity();
                for j in 0..=i {
                    let krow = (seg.start + j) * w3 + d + h * hd;
                    let mut s = T::zero();
                    for c in 0..hd {
                        s += qkv[qrow + c] * qkv[krow + c];
                    }
                    s = s * scale;
                    probs[prow + j] = s;
                    if s > maxv {
                        maxv = s;
                    }
                }
                let mut z = T::zero();
                for j in 0..=i {
                    let e = (probs[prow + j] - maxv).exp();
                    probs[prow + j] = e;
                    z += e;
                }
                for j in 0..=i {
                    probs[prow + j] = probs[prow + j] / z;
                }
                for j in (i + 1)..t {
                    probs[prow + j] = T::zero();
                }
                let orow = (seg.start + i) * d + h * hd;
                for c in 0..hd {
                    out[orow + c] = T::zero();
                }
                for j in 0..=i {
                    let p = probs[prow + j];
                    let vrow = (seg.start + j) * w3 + 2 * d + h * hd;
                    for c in 0..hd {
                        out[orow + c] += p * qkv[vrow + c];
                    }
                }
            }
        }
        poff += heads * t * t;
    }
}

/// Backward of [`attention_forward`]; overwrites `dqkv`.
pub fn attention_backward<T: Float>(
    qkv: &[T],
    segments: &[Segment],
    d: usize,
    heads: usize,
    probs: &[T],
    dout: &[T],
    dqkv: &mut [T],
) {
    let hd = d / heads;
    let scale = T::one() / T::cast_from(hd as f64).sqrt();
    let w3 = 3 * d;
    for v in dqkv.iter_mut() {
        *v = T::zero();
    }
    let mut poff = 0;
    let mut dp: Vec<T> = Vec::new();
    for seg in segments {
        let t = seg.len;
        dp.resize(t, T::zero());
        for h in 0..heads {
            for i in 0..t {
                let prow = poff + (h * t + i) * t;
                let orow = (seg.start + i) * d + h * hd;
                // d(prob_ij) = dout_i · v_j ; dv_j += prob_ij * dout_i
                let mut dot = T::zero();
                for j in 0..=i {
                    let vrow = (seg.start + j) * w3 + 2 * d + h * hd;
                    let mut s = T::zero();
                    for c in 0..hd {
                        s += dout[orow + c] * qkv[vrow + c];
                    }
                    dp[j] = s;
                    let p = probs[prow + j];
                    dot += p * s;
                    for c in 0..hd {
                        dqkv[vrow + c] += p * dout[orow + c];
                    }
                }
                let qrow = (seg.start + i) * w3 + h * hd;
                for j in 0..=i {
                    let ds = probs[prow + j] * (dp[j] - dot) * scale;
                    let krow = (seg.start + j) * w3 + d + h * hd;
                    for c in 0..hd {
                        dqkv[qrow + c] += ds * qkv[krow + c];
                        dqkv[krow + c] += ds * qkv[qrow + c];
                    }
                }
            }
        }
        poff += heads * t * t;
    }
}

/// Total attention-probability storage for `segments`.
pub fn attention_probs_len(segments: &[Segment], heads: usize) -> usize {
    segments.iter().map(|s| heads * s.len * s.len).sum()
}

/// Mean masked softmax cross-entropy over rows of `logits` (`n × vocab`).
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_xent<T: Float>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    mask: &[T],
) -> Result<(f64, Vec<T>)> {
    let n = targets.len();
    if logits.len() != n * vocab || mask.len() != n {
        return Err(ElmError::config(format!(
            "cross-entropy shape mismatch: {} logits for {} targets over vocab {}",
            logits.len(),
            n,
            vocab
        )));
    }
    let total: f64 = mask.iter().map(|m| m.as_f64()).sum();
    if total <= 0.0 {
        return Err(ElmError::degenerate(
            "cross-entropy mask selects no positions",
        ));
    }
    let mut grad = vec![T::zero(); n * vocab];
    let mut loss = 0.0f64;
    let inv = T::cast_from(1.0 / total);
    for i in 0..n {
        let m = mask[i];
        if m == T::zero() {
            continue;
        }
        let tgt = targets[i];
        if tgt >= vocab {
            return Err(ElmError::data(format!(
                "target id {tgt} outside vocab {vocab}"
            )));
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let maxv = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &l in row {
            z += (l - maxv).exp();
        }
        let logz = z.ln() + maxv;
        loss += m.as_f64() * (logz - row[tgt]).as_f64();
        let g = &mut grad[i * vocab..(i + 1) * vocab];
        for (gj, &l) in g.iter_mut().zip(row) {
            *gj = (l - logz).exp() * m * inv;
        }
        g[tgt] = g[tgt] - m * inv;
    }
    Ok((loss / total, grad))
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax<T: Float>(row: &[T]) -> Vec<f64> {
    let maxv = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x.as_f64() - maxv).exp()).sum();
    let logz = z.ln() + maxv;
    row.iter().map(|x| x.as_f64() - logz).collect()
}
