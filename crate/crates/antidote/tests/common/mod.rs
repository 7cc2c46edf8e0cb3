//! Shared test oracles: naive f64 reference implementations of every layer
//! (straight-line loops, independent of the library's kernels) and central
//! finite differences. The f64 path makes the numeric derivative essentially
//! exact, so comparisons against the library's f32 analytic gradients are
//! meaningful at 1e-3 relative.

#![allow(dead_code)]

use antidote::rng::Rng;

pub const GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

/// Six-nested-loop cross-correlation in f64.
#[allow(clippy::too_many_arguments)]
pub fn ref_conv2d(
    x: &[f64],
    xd: Dims,
    weights: &[f64],
    c_out: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Dims) {
    let ho = (xd.h + 2 * pad - k) / stride + 1;
    let wo = (xd.w + 2 * pad - k) / stride + 1;
    let od = Dims { n: xd.n, c: c_out, h: ho, w: wo };
    let mut out = vec![0.0; od.len()];
    for b in 0..xd.n {
        for oc in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[oc];
                    for ic in 0..xd.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0
                                    && iy < xd.h as isize
                                    && ix >= 0
                                    && ix < xd.w as isize
                                {
                                    let xi = xd.at(b, ic, iy as usize, ix as usize);
                                    let wi = ((oc * xd.c + ic) * k + ky) * k + kx;
                                    acc += x[xi] * weights[wi];
                                }
                            }
                        }
                    }
                    out[od.at(b, oc, oy, ox)] = acc;
                }
            }
        }
    }
    (out, od)
}

pub fn ref_dense(x: &[f64], n: usize, in_f: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let out_f = bias.len();
    let mut out = vec![0.0; n * out_f];
    for b in 0..n {
        for o in 0..out_f {
            let mut acc = bias[o];
            for i in 0..in_f {
                acc += x[b * in_f + i] * weights[o * in_f + i];
            }
            out[b * out_f + o] = acc;
        }
    }
    out
}

pub fn ref_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn ref_maxpool2x2(x: &[f64], xd: Dims) -> (Vec<f64>, Dims) {
    let od = Dims { n: xd.n, c: xd.c, h: xd.h / 2, w: xd.w / 2 };
    let mut out = vec![0.0; od.len()];
    for b in 0..xd.n {
        for c in 0..xd.c {
            for py in 0..od.h {
                for px in 0..od.w {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(x[xd.at(b, c, py * 2 + dy, px * 2 + dx)]);
                        }
                    }
                    out[od.at(b, c, py, px)] = best;
                }
            }
        }
    }
    (out, od)
}

pub fn ref_gap(x: &[f64], xd: Dims) -> Vec<f64> {
    let mut out = vec![0.0; xd.n * xd.c];
    for b in 0..xd.n {
        for c in 0..xd.c {
            let mut acc = 0.0;
            for y in 0..xd.h {
                for xx in 0..xd.w {
                    acc += x[xd.at(b, c, y, xx)];
                }
            }
            out[b * xd.c + c] = acc / (xd.h * xd.w) as f64;
        }
    }
    out
}

/// Mean softmax cross-entropy over rows of logits.
pub fn ref_softmax_xent(logits: &[f64], n: usize, k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for b in 0..n {
        let row = &logits[b * k..(b + 1) * k];
        let maxv = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - maxv).exp()).sum();
        total -= (row[labels[b]] - maxv) - denom.ln();
    }
    total / n as f64
}

/// Elementwise multiply by fixed channel/spatial keep bits.
pub fn ref_mask_mul(x: &[f64], xd: Dims, ch_bits: &[bool], sp_bits: &[bool]) -> Vec<f64> {
    let mut out = x.to_vec();
    for b in 0..xd.n {
        for c in 0..xd.c {
            for y in 0..xd.h {
                for xx in 0..xd.w {
                    if !ch_bits[c] || !sp_bits[y * xd.w + xx] {
                        out[xd.at(b, c, y, xx)] = 0.0;
                    }
                }
            }
        }
    }
    out
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative-error check with a floor that keeps near-zero pairs comparable.
pub fn grads_close(analytic: &[f32], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let a = a as f64;
        let denom = a.abs().max(n.abs()).max(1e-4);
        let rel = (a - n).abs() / denom;
        assert!(
            rel <= tol,
            "{what}[{i}]: analytic {a} vs numeric {n} (rel {rel:.2e})"
        );
    }
}

/// N(0, 0.1) samples with entries nudged away from zero by `margin` so ReLU
/// kinks and max-pool ties stay clear of the finite-difference step.
pub fn gaussian_inputs(rng: &mut Rng, len: usize, margin: f32) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let v = rng.next_normal() * 0.1;
            if v.abs() < margin {
                margin * if v >= 0.0 { 1.0 } else { -1.0 } + v
            } else {
                v
            }
        })
        .collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
