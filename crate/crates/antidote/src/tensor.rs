//! Dense rank-4 tensor storage (batch, channel, height, width) and the
//! elementary reductions the attention machinery is built on.
//!
//! Layout is n-major NCHW over a flat `Vec<f32>`. Reductions accumulate in
//! f64 and round once at the end.

use std::io::{Read, Write};

use crate::attention::PruneMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    /// Tensor with every element equal to `fill`.
    pub fn filled(dims: (usize, usize, usize, usize), fill: f32) -> Result<Self> {
        let (n, c, h, w) = dims;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                context: "Tensor4::filled",
                details: format!("all dims must be >= 1, got ({n},{c},{h},{w})"),
            });
        }
        if !fill.is_finite() {
            return Err(Error::InvalidShape {
                context: "Tensor4::filled",
                details: format!("fill value {fill} is not finite"),
            });
        }
        Ok(Self { n, c, h, w, data: vec![fill; n * c * h * w] })
    }

    pub fn zeros(dims: (usize, usize, usize, usize)) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn from_vec(dims: (usize, usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let (n, c, h, w) = dims;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                context: "Tensor4::from_vec",
                details: format!("all dims must be >= 1, got ({n},{c},{h},{w})"),
            });
        }
        if data.len() != n * c * h * w {
            return Err(Error::InvalidShape {
                context: "Tensor4::from_vec",
                details: format!("data length {} != {}", data.len(), n * c * h * w),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidShape {
                context: "Tensor4::from_vec",
                details: format!("non-finite element {bad}"),
            });
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The (h*w)-length plane of one sample/channel pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let hw = self.h * self.w;
        let start = (n * self.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// The (c*h*w)-length slice of one sample.
    #[inline]
    pub fn sample(&self, n: usize) -> &[f32] {
        let chw = self.c * self.h * self.w;
        &self.data[n * chw..(n + 1) * chw]
    }

    #[inline]
    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let chw = self.c * self.h * self.w;
        &mut self.data[n * chw..(n + 1) * chw]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-sample spatial mean: out[n*c + ch] = mean over h*w of channel ch.
    pub fn mean_over_spatial(&self) -> Vec<f32> {
        let hw = (self.h * self.w) as f64;
        let mut out = Vec::with_capacity(self.n * self.c);
        for n in 0..self.n {
            for c in 0..self.c {
                let sum: f64 = self.plane(n, c).iter().map(|&v| v as f64).sum();
                out.push((sum / hw) as f32);
            }
        }
        out
    }

    /// Per-sample channel mean: out[n*h*w + y*w + x] = mean over channels at (y, x).
    pub fn mean_over_channels(&self) -> Vec<f32> {
        let hw = self.h * self.w;
        let inv_c = 1.0 / self.c as f64;
        let mut out = vec![0.0f32; self.n * hw];
        let mut acc = vec![0.0f64; hw];
        for n in 0..self.n {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..self.c {
                for (a, &v) in acc.iter_mut().zip(self.plane(n, c)) {
                    *a += v as f64;
                }
            }
            for (o, &a) in out[n * hw..(n + 1) * hw].iter_mut().zip(acc.iter()) {
                *o = (a * inv_c) as f32;
            }
        }
        out
    }

    /// Multiply every sample by a channel mask (length c) and a spatial mask
    /// (h*w, row-major), both read as {0, 1}. No other broadcasting exists;
    /// any other shape is an error.
    pub fn mul_masks(&self, channel_mask: &[bool], spatial_mask: &[bool]) -> Result<Tensor4> {
        if channel_mask.len() != self.c {
            return Err(Error::InvalidShape {
                context: "mul_masks",
                details: format!("channel mask length {} != c {}", channel_mask.len(), self.c),
            });
        }
        if spatial_mask.len() != self.h * self.w {
            return Err(Error::InvalidShape {
                context: "mul_masks",
                details: format!(
                    "spatial mask length {} != h*w {}",
                    spatial_mask.len(),
                    self.h * self.w
                ),
            });
        }
        let mut out = self.clone();
        for n in 0..self.n {
            for (c, &keep_c) in channel_mask.iter().enumerate() {
                let plane = out.plane_mut(n, c);
                if !keep_c {
                    plane.iter_mut().for_each(|v| *v = 0.0);
                    continue;
                }
                for (v, &keep_s) in plane.iter_mut().zip(spatial_mask) {
                    if !keep_s {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Raw serialization: four LE u32 dims followed by LE f32 data.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for d in [self.n, self.c, self.h, self.w] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor4> {
        let mut dim_buf = [0u8; 4];
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            r.read_exact(&mut dim_buf).map_err(|e| Error::io("tensor dims", e))?;
            *d = u32::from_le_bytes(dim_buf) as usize;
        }
        let count = dims.iter().product::<usize>();
        let mut data = vec![0f32; count];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|e| Error::io("tensor data", e))?;
            *v = f32::from_le_bytes(buf);
        }
        Tensor4::from_vec((dims[0], dims[1], dims[2], dims[3]), data)
    }
}

/// Feature map with masked channels and masked spatial columns zeroed,
/// each mask broadcast across the remaining axes.
pub fn elementwise_mul_broadcast(a: &Tensor4, mask: &PruneMask) -> Result<Tensor4> {
    a.mul_masks(mask.channel_bits(), mask.spatial_bits())
}
