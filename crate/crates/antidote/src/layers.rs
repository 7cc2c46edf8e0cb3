//! CNN layer primitives: convolution (dense and mask-skipping), dense,
//! ReLU, 2x2 max-pool, global average pooling, softmax cross-entropy,
//! plain SGD and the cosine learning-rate schedule.
//!
//! All activations are f32; accumulations run in f64. The masked conv is
//! numerically identical to the dense conv on a mask-zeroed input because
//! it skips exactly the terms that would contribute 0.0, in the same
//! iteration order.

use crate::attention::PruneMask;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor4;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    /// (c_out, c_in, kh, kw)
    pub weights: Tensor4,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(weights: Tensor4, bias: Vec<f32>, stride: usize, padding: usize) -> Result<Self> {
        let (c_out, ..) = weights.dims();
        if bias.len() != c_out {
            return Err(Error::InvalidShape {
                context: "Conv2dLayer::new",
                details: format!("bias length {} != c_out {c_out}", bias.len()),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidShape {
                context: "Conv2dLayer::new",
                details: "stride must be >= 1".into(),
            });
        }
        Ok(Self { weights, bias, stride, padding })
    }

    /// Kaiming fan-in initialization, zero bias.
    pub fn kaiming(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt() as f32;
        let data: Vec<f32> = (0..c_out * c_in * k * k).map(|_| rng.next_normal() * std).collect();
        let weights = Tensor4::from_vec((c_out, c_in, k, k), data)?;
        Self::new(weights, vec![0.0; c_out], stride, padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims().0
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims().1
    }

    pub fn kernel(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.weights.dims();
        (kh, kw)
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (_, _, kh, kw) = self.weights.dims();
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < kh || wp < kw {
            return Err(Error::InvalidShape {
                context: "Conv2dLayer::output_dims",
                details: format!("input {h}x{w} too small for kernel {kh}x{kw}"),
            });
        }
        Ok(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }

    /// Standard cross-correlation.
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.forward_inner(x, None).map(|(out, _)| out)
    }

    /// Convolution that skips masked input channels and masked input columns
    /// in its accumulation loops. Returns the output and the executed MAC
    /// count under the accounting convention (padding taps counted as dense:
    /// each kept input element is charged kh*kw taps per output channel).
    pub fn forward_masked(&self, x: &Tensor4, mask: &PruneMask) -> Result<(Tensor4, u64)> {
        let (_, c_in, h, w) = x.dims();
        if mask.channels() != c_in || mask.spatial_dims() != (h, w) {
            return Err(Error::InvalidShape {
                context: "conv2d_forward_masked",
                details: format!(
                    "mask ({}, {:?}) does not match input ({c_in}, ({h}, {w}))",
                    mask.channels(),
                    mask.spatial_dims()
                ),
            });
        }
        self.forward_inner(x, Some(mask))
    }

    fn forward_inner(&self, x: &Tensor4, mask: Option<&PruneMask>) -> Result<(Tensor4, u64)> {
        let (n, c_in, h, w) = x.dims();
        let (c_out, wc_in, kh, kw) = self.weights.dims();
        if c_in != wc_in {
            return Err(Error::InvalidShape {
                context: "conv2d_forward",
                details: format!("input channels {c_in} != weight channels {wc_in}"),
            });
        }
        let (h_out, w_out) = self.output_dims(h, w)?;
        let mut out = Tensor4::zeros((n, c_out, h_out, w_out))?;

        let mut macs: u64 = 0;
        if let Some(m) = mask {
            // Accounting loop: kh*kw taps per (kept element, output channel).
            for &keep_c in m.channel_bits() {
                if !keep_c {
                    continue;
                }
                for &keep_s in m.spatial_bits() {
                    if keep_s {
                        macs += (c_out * kh * kw) as u64;
                    }
                }
            }
            macs *= n as u64;
        } else {
            macs = (c_out * c_in * kh * kw * h_out * w_out * n) as u64;
        }

        if self.stride == 1 {
            self.forward_stride1(x, mask, &mut out, h_out, w_out);
        } else {
            self.forward_general(x, mask, &mut out, h_out, w_out);
        }
        Ok((out, macs))
    }

    /// Hot path: stride-1 convolution with contiguous inner spans and f64
    /// row accumulators. The masked variant iterates in the same order as
    /// the dense one and merely skips the zero contributions, so the two are
    /// bit-identical on a mask-zeroed input.
    fn forward_stride1(
        &self,
        x: &Tensor4,
        mask: Option<&PruneMask>,
        out: &mut Tensor4,
        h_out: usize,
        w_out: usize,
    ) {
        let (n, c_in, h, w) = x.dims();
        let (_, _, kh, kw) = self.weights.dims();
        let pad = self.padding as isize;
        let c_out = self.out_channels();

        if mask.is_none() && kw == 3 {
            // Dense fast path: input planes are converted to f64 once so the
            // fused row kernels run pure-f64 (the conversion is exact, so
            // this changes nothing numerically).
            let hw_out = h_out * w_out;
            let mut acc_all = vec![0.0f64; c_out * hw_out];
            let mut xf = vec![0.0f64; h * w];
            for b in 0..n {
                for oc in 0..c_out {
                    acc_all[oc * hw_out..(oc + 1) * hw_out]
                        .iter_mut()
                        .for_each(|v| *v = self.bias[oc] as f64);
                }
                for ic in 0..c_in {
                    for (dst, &src) in xf.iter_mut().zip(x.plane(b, ic)) {
                        *dst = src as f64;
                    }
                    for oc in 0..c_out {
                        let wk = self.weights.plane(oc, ic);
                        let acc = &mut acc_all[oc * hw_out..(oc + 1) * hw_out];
                        for ky in 0..kh {
                            let wrow = &wk[ky * 3..ky * 3 + 3];
                            let w012 = [wrow[0] as f64, wrow[1] as f64, wrow[2] as f64];
                            for oy in 0..h_out {
                                let iy = oy as isize + ky as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                fused3_row_f64(
                                    &mut acc[oy * w_out..oy * w_out + w_out],
                                    &xf[iy as usize * w..iy as usize * w + w],
                                    w012,
                                    self.padding,
                                    w,
                                );
                            }
                        }
                    }
                }
                for oc in 0..c_out {
                    let plane = out.plane_mut(b, oc);
                    for (o, &a) in plane.iter_mut().zip(&acc_all[oc * hw_out..]) {
                        *o = a as f32;
                    }
                }
            }
            return;
        }

        let mut acc = vec![0.0f64; h_out * w_out];
        for b in 0..n {
            for oc in 0..c_out {
                acc.iter_mut().for_each(|v| *v = self.bias[oc] as f64);
                for ic in 0..c_in {
                    if let Some(m) = mask {
                        if !m.channel_bits()[ic] {
                            continue;
                        }
                    }
                    let xp = x.plane(b, ic);
                    let wk = self.weights.plane(oc, ic);
                    for ky in 0..kh {
                        for oy in 0..h_out {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &xp[iy as usize * w..iy as usize * w + w];
                            let sp_row = mask
                                .map(|m| &m.spatial_bits()[iy as usize * w..iy as usize * w + w]);
                            let acc_row = &mut acc[oy * w_out..oy * w_out + w_out];
                            if kw == 3 {
                                let wrow = &wk[ky * 3..ky * 3 + 3];
                                fused3_row_fwd(acc_row, x_row, sp_row, wrow, self.padding, w);
                            } else {
                                for kx in 0..kw {
                                    let wv = wk[ky * kw + kx] as f64;
                                    let shift = kx as isize - pad;
                                    let lo = (-shift).max(0) as usize;
                                    let hi =
                                        (w as isize - shift).clamp(0, w_out as isize) as usize;
                                    if lo >= hi {
                                        continue;
                                    }
                                    let src_lo = (lo as isize + shift) as usize;
                                    let src_hi = (hi as isize + shift) as usize;
                                    match sp_row {
                                        None => {
                                            for (a, &xv) in acc_row[lo..hi]
                                                .iter_mut()
                                                .zip(&x_row[src_lo..src_hi])
                                            {
                                                *a += xv as f64 * wv;
                                            }
                                        }
                                        Some(sp) => {
                                            for ((a, &xv), &keep) in acc_row[lo..hi]
                                                .iter_mut()
                                                .zip(&x_row[src_lo..src_hi])
                                                .zip(&sp[src_lo..src_hi])
                                            {
                                                if keep {
                                                    *a += xv as f64 * wv;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let out_plane = out.plane_mut(b, oc);
                for (o, &a) in out_plane.iter_mut().zip(acc.iter()) {
                    *o = a as f32;
                }
            }
        }
    }

    /// General-stride gather loop (used by accounting-only architectures).
    fn forward_general(
        &self,
        x: &Tensor4,
        mask: Option<&PruneMask>,
        out: &mut Tensor4,
        h_out: usize,
        w_out: usize,
    ) {
        let (n, c_in, h, w) = x.dims();
        let (_, _, kh, kw) = self.weights.dims();
        let pad = self.padding as isize;
        let stride = self.stride;
        let c_out = self.out_channels();
        for b in 0..n {
            for oc in 0..c_out {
                let bias = self.bias[oc] as f64;
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = bias;
                        for ic in 0..c_in {
                            if let Some(m) = mask {
                                if !m.channel_bits()[ic] {
                                    continue;
                                }
                            }
                            let xp = x.plane(b, ic);
                            let wk = self.weights.plane(oc, ic);
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row_base = iy as usize * w;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let src = row_base + ix as usize;
                                    if let Some(m) = mask {
                                        if !m.spatial_bits()[src] {
                                            continue;
                                        }
                                    }
                                    acc += xp[src] as f64 * wk[ky * kw + kx] as f64;
                                }
                            }
                        }
                        out.set(b, oc, oy, ox, acc as f32);
                    }
                }
            }
        }
    }

    /// Gradients w.r.t. weights, bias and input.
    pub fn backward(&self, x: &Tensor4, grad_out: &Tensor4) -> Result<ConvGrads> {
        let (n, c_in, h, w) = x.dims();
        let (c_out, _, kh, kw) = self.weights.dims();
        let (h_out, w_out) = self.output_dims(h, w)?;
        if grad_out.dims() != (n, c_out, h_out, w_out) {
            return Err(Error::InvalidShape {
                context: "conv2d_backward",
                details: format!(
                    "grad dims {:?} != expected {:?}",
                    grad_out.dims(),
                    (n, c_out, h_out, w_out)
                ),
            });
        }
        let pad = self.padding as isize;
        let stride = self.stride;

        let mut grad_bias = vec![0.0f32; c_out];
        for (oc, gb) in grad_bias.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for b in 0..n {
                acc += grad_out.plane(b, oc).iter().map(|&g| g as f64).sum::<f64>();
            }
            *gb = acc as f32;
        }

        let mut grad_w = Tensor4::zeros((c_out, c_in, kh, kw))?;
        let mut grad_x = Tensor4::zeros((n, c_in, h, w))?;
        if stride == 1 && kw == 3 {
            // f64-scratch path: convert planes once per sample, then run the
            // fused row kernels in pure f64.
            let hw_out = h_out * w_out;
            let hw = h * w;
            let mut g64 = vec![0.0f64; c_out * hw_out];
            let mut x64 = vec![0.0f64; c_in * hw];
            let mut gw_acc = vec![0.0f64; c_out * c_in * kh * 3];
            let mut acc = vec![0.0f64; hw];
            for b in 0..n {
                for oc in 0..c_out {
                    for (dst, &src) in
                        g64[oc * hw_out..(oc + 1) * hw_out].iter_mut().zip(grad_out.plane(b, oc))
                    {
                        *dst = src as f64;
                    }
                }
                for ic in 0..c_in {
                    for (dst, &src) in x64[ic * hw..(ic + 1) * hw].iter_mut().zip(x.plane(b, ic)) {
                        *dst = src as f64;
                    }
                }
                // weight gradient
                for oc in 0..c_out {
                    let gp = &g64[oc * hw_out..(oc + 1) * hw_out];
                    for ic in 0..c_in {
                        let xp = &x64[ic * hw..(ic + 1) * hw];
                        for ky in 0..kh {
                            let mut accs = [0.0f64; 3];
                            for oy in 0..h_out {
                                let iy = oy as isize + ky as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                fused3_row_bwd_weights_f64(
                                    &mut accs,
                                    &gp[oy * w_out..oy * w_out + w_out],
                                    &xp[iy as usize * w..iy as usize * w + w],
                                    self.padding,
                                    w,
                                );
                            }
                            let base = ((oc * c_in + ic) * kh + ky) * 3;
                            for (kx, a) in accs.into_iter().enumerate() {
                                gw_acc[base + kx] += a;
                            }
                        }
                    }
                }
                // input gradient
                for ic in 0..c_in {
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    for oc in 0..c_out {
                        let gp = &g64[oc * hw_out..(oc + 1) * hw_out];
                        let wk = self.weights.plane(oc, ic);
                        for ky in 0..kh {
                            let wrow = &wk[ky * 3..ky * 3 + 3];
                            let w012 = [wrow[0] as f64, wrow[1] as f64, wrow[2] as f64];
                            for oy in 0..h_out {
                                let iy = oy as isize + ky as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                fused3_row_bwd_input_f64(
                                    &mut acc[iy as usize * w..iy as usize * w + w],
                                    &gp[oy * w_out..oy * w_out + w_out],
                                    w012,
                                    self.padding,
                                    w_out,
                                );
                            }
                        }
                    }
                    let plane = grad_x.plane_mut(b, ic);
                    for (o, &a) in plane.iter_mut().zip(acc.iter()) {
                        *o = a as f32;
                    }
                }
            }
            for (i, &a) in gw_acc.iter().enumerate() {
                grad_w.data_mut()[i] = a as f32;
            }
            return Ok(ConvGrads { weights: grad_w, bias: grad_bias, input: grad_x });
        }

        if stride == 1 {
            // dW[oc,ic,ky,kx] = sum over (b, oy, ox) of g * x at the shifted row
            for oc in 0..c_out {
                for ic in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let shift = kx as isize - pad;
                            let lo = (-shift).max(0) as usize;
                            let hi = (w as isize - shift).clamp(0, w_out as isize) as usize;
                            let mut acc = 0.0f64;
                            for b in 0..n {
                                let gp = grad_out.plane(b, oc);
                                let xp = x.plane(b, ic);
                                for oy in 0..h_out {
                                    let iy = oy as isize + ky as isize - pad;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    if lo >= hi {
                                        continue;
                                    }
                                    let grow = &gp[oy * w_out + lo..oy * w_out + hi];
                                    let src_lo = (lo as isize + shift) as usize;
                                    let xrow = &xp[iy as usize * w + src_lo
                                        ..iy as usize * w + src_lo + (hi - lo)];
                                    for (&g, &xv) in grow.iter().zip(xrow) {
                                        acc += g as f64 * xv as f64;
                                    }
                                }
                            }
                            grad_w.set(oc, ic, ky, kx, acc as f32);
                        }
                    }
                }
            }
            // dx[iy,ix] accumulates g[oy,ox] * w[ky,kx] over the valid taps
            let mut acc = vec![0.0f64; h * w];
            for b in 0..n {
                for ic in 0..c_in {
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    for oc in 0..c_out {
                        let gp = grad_out.plane(b, oc);
                        let wk = self.weights.plane(oc, ic);
                        for ky in 0..kh {
                            for oy in 0..h_out {
                                let iy = oy as isize + ky as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let grow = &gp[oy * w_out..oy * w_out + w_out];
                                let acc_row =
                                    &mut acc[iy as usize * w..iy as usize * w + w];
                                for kx in 0..kw {
                                    let wv = wk[ky * kw + kx] as f64;
                                    let shift = kx as isize - pad;
                                    let lo = (-shift).max(0) as usize;
                                    let hi =
                                        (w as isize - shift).clamp(0, w_out as isize) as usize;
                                    if lo >= hi {
                                        continue;
                                    }
                                    let src_lo = (lo as isize + shift) as usize;
                                    for (a, &g) in acc_row[src_lo..src_lo + (hi - lo)]
                                        .iter_mut()
                                        .zip(&grow[lo..hi])
                                    {
                                        *a += g as f64 * wv;
                                    }
                                }
                            }
                        }
                    }
                    let plane = grad_x.plane_mut(b, ic);
                    for (o, &a) in plane.iter_mut().zip(acc.iter()) {
                        *o = a as f32;
                    }
                }
            }
        } else {
            for oc in 0..c_out {
                for ic in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = 0.0f64;
                            for b in 0..n {
                                let gp = grad_out.plane(b, oc);
                                let xp = x.plane(b, ic);
                                for oy in 0..h_out {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let grow = &gp[oy * w_out..oy * w_out + w_out];
                                    let xrow = &xp[iy as usize * w..iy as usize * w + w];
                                    for (ox, &g) in grow.iter().enumerate() {
                                        let ix = (ox * stride + kx) as isize - pad;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += g as f64 * xrow[ix as usize] as f64;
                                    }
                                }
                            }
                            grad_w.set(oc, ic, ky, kx, acc as f32);
                        }
                    }
                }
            }
            for b in 0..n {
                for ic in 0..c_in {
                    for iy in 0..h {
                        for ix in 0..w {
                            let mut acc = 0.0f64;
                            for oc in 0..c_out {
                                let gp = grad_out.plane(b, oc);
                                let wk = self.weights.plane(oc, ic);
                                for ky in 0..kh {
                                    let oy_num = iy as isize + pad - ky as isize;
                                    if oy_num < 0 || oy_num % stride as isize != 0 {
                                        continue;
                                    }
                                    let oy = (oy_num / stride as isize) as usize;
                                    if oy >= h_out {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ox_num = ix as isize + pad - kx as isize;
                                        if ox_num < 0 || ox_num % stride as isize != 0 {
                                            continue;
                                        }
                                        let ox = (ox_num / stride as isize) as usize;
                                        if ox >= w_out {
                                            continue;
                                        }
                                        acc += gp[oy * w_out + ox] as f64
                                            * wk[ky * kw + kx] as f64;
                                    }
                                }
                            }
                            grad_x.set(b, ic, iy, ix, acc as f32);
                        }
                    }
                }
            }
        }

        Ok(ConvGrads { weights: grad_w, bias: grad_bias, input: grad_x })
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weights: Tensor4,
    pub bias: Vec<f32>,
    pub input: Tensor4,
}

/// Pure-f64 twin of `fused3_row_fwd` for pre-converted rows. Border and
/// interior expression trees match the f32 variant exactly.
#[inline]
fn fused3_row_f64(acc_row: &mut [f64], x_row: &[f64], w012: [f64; 3], padding: usize, w: usize) {
    let w_out = acc_row.len();
    let pad = padding as isize;
    let [w0, w1, w2] = w012;
    let int_lo = padding.min(w_out);
    let int_hi = ((w + padding) as isize - 2).clamp(0, w_out as isize) as usize;

    let mut border = |ox: usize| {
        let mut a = acc_row[ox];
        for (kx, wv) in [w0, w1, w2].into_iter().enumerate() {
            let src = ox as isize + kx as isize - pad;
            if src >= 0 && (src as usize) < w {
                a += x_row[src as usize] * wv;
            }
        }
        acc_row[ox] = a;
    };
    for ox in 0..int_lo {
        border(ox);
    }
    for ox in int_hi.max(int_lo)..w_out {
        border(ox);
    }

    if int_lo < int_hi {
        let len = int_hi - int_lo;
        let base = (int_lo as isize - pad) as usize;
        let x0 = &x_row[base..base + len];
        let x1 = &x_row[base + 1..base + 1 + len];
        let x2 = &x_row[base + 2..base + 2 + len];
        let acc = &mut acc_row[int_lo..int_hi];
        for i in 0..len {
            acc[i] += x0[i] * w0 + x1[i] * w1 + x2[i] * w2;
        }
    }
}

/// One 3-tap kernel row applied to one image row (stride 1): the interior,
/// where all three taps land inside the row, runs as a single fused pass;
/// border columns fall back to per-tap scalar adds. The masked variant keeps
/// the same per-element expression tree and replaces masked products with
/// 0.0, so it matches the dense pass on a mask-zeroed input bit for bit.
#[inline]
fn fused3_row_fwd(
    acc_row: &mut [f64],
    x_row: &[f32],
    sp_row: Option<&[bool]>,
    wrow: &[f32],
    padding: usize,
    w: usize,
) {
    let w_out = acc_row.len();
    let pad = padding as isize;
    let (w0, w1, w2) = (wrow[0] as f64, wrow[1] as f64, wrow[2] as f64);
    let int_lo = padding.min(w_out);
    let int_hi = ((w + padding) as isize - 2).clamp(0, w_out as isize) as usize;

    let mut border = |ox: usize| {
        let mut a = acc_row[ox];
        for (kx, wv) in [w0, w1, w2].into_iter().enumerate() {
            let src = ox as isize + kx as isize - pad;
            if src >= 0 && (src as usize) < w {
                let src = src as usize;
                let keep = sp_row.is_none_or(|sp| sp[src]);
                if keep {
                    a += x_row[src] as f64 * wv;
                }
            }
        }
        acc_row[ox] = a;
    };
    for ox in 0..int_lo {
        border(ox);
    }
    for ox in int_hi.max(int_lo)..w_out {
        border(ox);
    }

    if int_lo < int_hi {
        let len = int_hi - int_lo;
        let base = (int_lo as isize - pad) as usize;
        let x0 = &x_row[base..base + len];
        let x1 = &x_row[base + 1..base + 1 + len];
        let x2 = &x_row[base + 2..base + 2 + len];
        let acc = &mut acc_row[int_lo..int_hi];
        match sp_row {
            None => {
                for i in 0..len {
                    acc[i] += x0[i] as f64 * w0 + x1[i] as f64 * w1 + x2[i] as f64 * w2;
                }
            }
            Some(sp) => {
                let s0 = &sp[base..base + len];
                let s1 = &sp[base + 1..base + 1 + len];
                let s2 = &sp[base + 2..base + 2 + len];
                for i in 0..len {
                    let t0 = if s0[i] { x0[i] as f64 * w0 } else { 0.0 };
                    let t1 = if s1[i] { x1[i] as f64 * w1 } else { 0.0 };
                    let t2 = if s2[i] { x2[i] as f64 * w2 } else { 0.0 };
                    acc[i] += t0 + t1 + t2;
                }
            }
        }
    }
}

/// Mirror of `fused3_row_f64` for the input gradient: scatter one gradient
/// row through a 3-tap kernel row into the f64 accumulator row.
#[inline]
fn fused3_row_bwd_input_f64(
    acc_row: &mut [f64],
    g_row: &[f64],
    w012: [f64; 3],
    padding: usize,
    w_out: usize,
) {
    let w = acc_row.len();
    let pad = padding as isize;
    let [w0, w1, w2] = w012;
    // dx[ix] += g[ix + pad - kx] * w[kx]; interior needs all three in range
    let int_lo = (2 - pad).clamp(0, w as isize) as usize;
    let int_hi = (w_out as isize - pad).clamp(0, w as isize) as usize;

    let mut border = |ix: usize| {
        let mut a = acc_row[ix];
        for (kx, wv) in [w0, w1, w2].into_iter().enumerate() {
            let ox = ix as isize + pad - kx as isize;
            if ox >= 0 && (ox as usize) < w_out {
                a += g_row[ox as usize] * wv;
            }
        }
        acc_row[ix] = a;
    };
    for ix in 0..int_lo.min(w) {
        border(ix);
    }
    for ix in int_hi.max(int_lo)..w {
        border(ix);
    }

    if int_lo < int_hi {
        let len = int_hi - int_lo;
        let base = (int_lo as isize + pad - 2) as usize;
        let g2 = &g_row[base..base + len];
        let g1 = &g_row[base + 1..base + 1 + len];
        let g0 = &g_row[base + 2..base + 2 + len];
        let acc = &mut acc_row[int_lo..int_hi];
        for i in 0..len {
            acc[i] += g0[i] * w0 + g1[i] * w1 + g2[i] * w2;
        }
    }
}

/// Weight-gradient row pass for a 3-tap kernel row: three independent
/// accumulators advance together over one gradient row.
#[inline]
fn fused3_row_bwd_weights_f64(
    accs: &mut [f64; 3],
    g_row: &[f64],
    x_row: &[f64],
    padding: usize,
    w: usize,
) {
    let w_out = g_row.len();
    let pad = padding as isize;
    let int_lo = padding.min(w_out);
    let int_hi = ((w + padding) as isize - 2).clamp(0, w_out as isize) as usize;

    let border = |ox: usize, accs: &mut [f64; 3]| {
        let g = g_row[ox];
        for (kx, acc) in accs.iter_mut().enumerate() {
            let src = ox as isize + kx as isize - pad;
            if src >= 0 && (src as usize) < w {
                *acc += g * x_row[src as usize];
            }
        }
    };
    for ox in 0..int_lo {
        border(ox, accs);
    }
    for ox in int_hi.max(int_lo)..w_out {
        border(ox, accs);
    }

    if int_lo < int_hi {
        let len = int_hi - int_lo;
        let base = (int_lo as isize - pad) as usize;
        let x0 = &x_row[base..base + len];
        let x1 = &x_row[base + 1..base + 1 + len];
        let x2 = &x_row[base + 2..base + 2 + len];
        let g = &g_row[int_lo..int_hi];
        let (mut a0, mut a1, mut a2) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..len {
            let gv = g[i];
            a0 += gv * x0[i];
            a1 += gv * x1[i];
            a2 += gv * x2[i];
        }
        accs[0] += a0;
        accs[1] += a1;
        accs[2] += a2;
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// out x in, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub in_features: usize,
    pub out_features: usize,
}

impl DenseLayer {
    pub fn kaiming(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / in_features as f64).sqrt() as f32;
        let weights =
            (0..in_features * out_features).map(|_| rng.next_normal() * std).collect();
        Self { weights, bias: vec![0.0; out_features], in_features, out_features }
    }

    /// Input is flattened per sample; output is (n, out_features, 1, 1).
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let (n, c, h, w) = x.dims();
        if c * h * w != self.in_features {
            return Err(Error::InvalidShape {
                context: "dense_forward",
                details: format!("input features {} != {}", c * h * w, self.in_features),
            });
        }
        let mut out = Tensor4::zeros((n, self.out_features, 1, 1))?;
        for b in 0..n {
            let xs = x.sample(b);
            for o in 0..self.out_features {
                let row = &self.weights[o * self.in_features..(o + 1) * self.in_features];
                let mut acc = self.bias[o] as f64;
                for (xv, wv) in xs.iter().zip(row) {
                    acc += *xv as f64 * *wv as f64;
                }
                out.set(b, o, 0, 0, acc as f32);
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor4, grad_out: &Tensor4) -> Result<DenseGrads> {
        let (n, ..) = x.dims();
        if grad_out.dims() != (n, self.out_features, 1, 1) {
            return Err(Error::InvalidShape {
                context: "dense_backward",
                details: format!("grad dims {:?}", grad_out.dims()),
            });
        }
        let mut grad_w = vec![0.0f32; self.weights.len()];
        let mut grad_b = vec![0.0f32; self.out_features];
        let mut grad_x = Tensor4::zeros(x.dims())?;
        for (o, gb) in grad_b.iter_mut().enumerate() {
            let mut bacc = 0.0f64;
            for b in 0..n {
                bacc += grad_out.at(b, o, 0, 0) as f64;
            }
            *gb = bacc as f32;
        }
        for b in 0..n {
            let xs = x.sample(b);
            let gxs = grad_x.sample_mut(b);
            for o in 0..self.out_features {
                let g = grad_out.at(b, o, 0, 0);
                let row = &self.weights[o * self.in_features..(o + 1) * self.in_features];
                let wrow = &mut grad_w[o * self.in_features..(o + 1) * self.in_features];
                for i in 0..self.in_features {
                    wrow[i] += g * xs[i];
                    gxs[i] += g * row[i];
                }
            }
        }
        Ok(DenseGrads { weights: grad_w, bias: grad_b, input: grad_x })
    }
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub input: Tensor4,
}

// ---------------------------------------------------------------------------
// Activations and pooling
// ---------------------------------------------------------------------------

pub fn relu_fwd(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    out
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_bwd(x: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    if x.dims() != grad_out.dims() {
        return Err(Error::InvalidShape {
            context: "relu_bwd",
            details: format!("{:?} vs {:?}", x.dims(), grad_out.dims()),
        });
    }
    let mut out = grad_out.clone();
    for (g, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// 2x2 max pooling with stride 2. Ties route to the first maximal element in
/// row-major order; the returned argmax (offset 0..3 = dy*2+dx) feeds backward.
pub fn maxpool2x2_fwd(x: &Tensor4) -> Result<(Tensor4, Vec<u8>)> {
    let (n, c, h, w) = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            context: "maxpool2x2_fwd",
            details: format!("spatial dims must be even, got {h}x{w}"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor4::zeros((n, c, ho, wo))?;
    let mut argmax = vec![0u8; n * c * ho * wo];
    let mut k = 0;
    for b in 0..n {
        for ch in 0..c {
            let plane = x.plane(b, ch);
            for py in 0..ho {
                for px in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_off = 0u8;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = plane[(py * 2 + dy) * w + px * 2 + dx];
                            if v > best {
                                best = v;
                                best_off = (dy * 2 + dx) as u8;
                            }
                        }
                    }
                    out.set(b, ch, py, px, best);
                    argmax[k] = best_off;
                    k += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2x2_bwd(
    input_dims: (usize, usize, usize, usize),
    argmax: &[u8],
    grad_out: &Tensor4,
) -> Result<Tensor4> {
    let (n, c, h, w) = input_dims;
    let (gn, gc, ho, wo) = grad_out.dims();
    if gn != n || gc != c || ho != h / 2 || wo != w / 2 || argmax.len() != n * c * ho * wo {
        return Err(Error::InvalidShape {
            context: "maxpool2x2_bwd",
            details: "gradient/argmax dims do not match pooled input".into(),
        });
    }
    let mut grad_in = Tensor4::zeros(input_dims)?;
    let mut k = 0;
    for b in 0..n {
        for ch in 0..c {
            for py in 0..ho {
                for px in 0..wo {
                    let off = argmax[k] as usize;
                    let (dy, dx) = (off / 2, off % 2);
                    let g = grad_out.at(b, ch, py, px);
                    let i = grad_in.index(b, ch, py * 2 + dy, px * 2 + dx);
                    grad_in.data_mut()[i] += g;
                    k += 1;
                }
            }
        }
    }
    Ok(grad_in)
}

pub fn global_avg_pool_fwd(x: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = x.dims();
    let mut out = Tensor4::zeros((n, c, 1, 1))?;
    let inv = 1.0 / (h * w) as f64;
    for b in 0..n {
        for ch in 0..c {
            let sum: f64 = x.plane(b, ch).iter().map(|&v| v as f64).sum();
            out.set(b, ch, 0, 0, (sum * inv) as f32);
        }
    }
    Ok(out)
}

pub fn global_avg_pool_bwd(
    input_dims: (usize, usize, usize, usize),
    grad_out: &Tensor4,
) -> Result<Tensor4> {
    let (n, c, h, w) = input_dims;
    if grad_out.dims() != (n, c, 1, 1) {
        return Err(Error::InvalidShape {
            context: "global_avg_pool_bwd",
            details: format!("grad dims {:?}", grad_out.dims()),
        });
    }
    let mut grad_in = Tensor4::zeros(input_dims)?;
    let inv = 1.0 / (h * w) as f32;
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.at(b, ch, 0, 0) * inv;
            grad_in.plane_mut(b, ch).iter_mut().for_each(|v| *v = g);
        }
    }
    Ok(grad_in)
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the batch plus the softmax probabilities.
pub fn softmax_xent_fwd(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let (n, k, h, w) = logits.dims();
    if h != 1 || w != 1 {
        return Err(Error::InvalidShape {
            context: "softmax_xent_fwd",
            details: format!("logits must be (n, k, 1, 1), got {:?}", logits.dims()),
        });
    }
    if labels.len() != n {
        return Err(Error::InvalidShape {
            context: "softmax_xent_fwd",
            details: format!("{} labels for batch of {n}", labels.len()),
        });
    }
    let mut probs = Tensor4::zeros((n, k, 1, 1))?;
    let mut total = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::DataFormat { reason: format!("label {label} >= classes {k}") });
        }
        let row = logits.sample(b);
        let maxv = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v as f64) - maxv).exp();
        }
        let log_denom = denom.ln();
        for (i, &v) in row.iter().enumerate() {
            let logp = (v as f64 - maxv) - log_denom;
            probs.set(b, i, 0, 0, logp.exp() as f32);
            if i == label {
                total -= logp;
            }
        }
    }
    Ok((total / n as f64, probs))
}

/// dL/dlogits for the mean cross-entropy: (p - onehot) / n.
pub fn softmax_xent_bwd(probs: &Tensor4, labels: &[usize]) -> Result<Tensor4> {
    let (n, k, ..) = probs.dims();
    if labels.len() != n {
        return Err(Error::InvalidShape {
            context: "softmax_xent_bwd",
            details: format!("{} labels for batch of {n}", labels.len()),
        });
    }
    let mut grad = probs.clone();
    let scale = 1.0 / n as f32;
    for (b, &label) in labels.iter().enumerate() {
        for i in 0..k {
            let mut v = grad.at(b, i, 0, 0);
            if i == label {
                v -= 1.0;
            }
            grad.set(b, i, 0, 0, v * scale);
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// Cosine decay from lr0 at step 0 to exactly 0 at total_steps.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub lr0: f32,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr0: f32, total_steps: usize) -> Self {
        Self { lr0, total_steps }
    }

    pub fn lr(&self, step: usize) -> Result<f32> {
        if step > self.total_steps {
            return Err(Error::ScheduleStep { step, total: self.total_steps });
        }
        let progress = step as f64 / self.total_steps as f64;
        Ok((0.5 * self.lr0 as f64 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32)
    }
}

/// In-place vanilla SGD: params -= lr * grad.
pub fn sgd_step(params: &mut [f32], grads: &[f32], lr: f32) {
    debug_assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}
