//! Channel/spatial attention coefficients and their binarized top-k masks.
//!
//! Channel attention is the spatial mean of each channel; spatial attention
//! is the channel mean at each location. A mask keeps the top-k entries,
//! where k = trunc(p * count) clamped to [1, count] and p is the KEEP ratio.
//! User-facing configs speak in PRUNE ratios r and convert via p = 1 - r at
//! the boundary; everything below this module works in keep ratios.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{elementwise_mul_broadcast, Tensor4};

/// Attention coefficients of one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    /// Per-channel spatial means, length c.
    pub channel: Vec<f32>,
    /// Per-location channel means, row-major h*w.
    pub spatial: Vec<f32>,
    /// (c, h, w) of the source map.
    pub source_dims: (usize, usize, usize),
}

/// How the kept subset is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskCriterion {
    /// Keep the k largest attention entries.
    Attention,
    /// Keep a uniformly random k-subset, deterministic per seed.
    Random(u64),
    /// Keep the k smallest attention entries (prunes the most attended first).
    InverseAttention,
}

impl MaskCriterion {
    pub fn parse(s: &str) -> Option<MaskCriterion> {
        match s {
            "attention" => Some(MaskCriterion::Attention),
            "random" => Some(MaskCriterion::Random(0)),
            "inverse" => Some(MaskCriterion::InverseAttention),
            _ => None,
        }
    }
}

/// Binary channel + spatial mask with its keep-ratio provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    channel_mask: Vec<bool>,
    spatial_mask: Vec<bool>,
    spatial_h: usize,
    spatial_w: usize,
    pub channel_keep_ratio: f64,
    pub spatial_keep_ratio: f64,
    pub k_channel: usize,
    pub k_spatial: usize,
}

/// k = trunc(p * count) clamped to [1, count]; truncation matches the
/// integer cast in the mask definition, the lower clamp keeps at least one
/// survivor so no feature map collapses to all zeros.
pub fn keep_count(p: f64, count: usize) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) || !p.is_finite() {
        return Err(Error::InvalidRatio { value: p });
    }
    let k = (p * count as f64).trunc() as usize;
    Ok(k.clamp(1, count))
}

/// Indices of the k largest entries, ties broken by smaller index.
fn topk_indices_desc(att: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..att.len()).collect();
    order.sort_by(|&a, &b| {
        att[b].partial_cmp(&att[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Indices of the k smallest entries, ties broken by smaller index.
fn topk_indices_asc(att: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..att.len()).collect();
    order.sort_by(|&a, &b| {
        att[a].partial_cmp(&att[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn bits_from_indices(len: usize, kept: &[usize]) -> Vec<bool> {
    let mut bits = vec![false; len];
    for &i in kept {
        bits[i] = true;
    }
    bits
}

/// Channel attention of one sample: per-channel mean over the spatial plane.
pub fn channel_attention(f: &Tensor4, sample: usize) -> Result<Vec<f32>> {
    let (n, c, ..) = f.dims();
    if sample >= n {
        return Err(Error::SampleOutOfRange { sample, batch: n });
    }
    let means = f.mean_over_spatial();
    Ok(means[sample * c..(sample + 1) * c].to_vec())
}

/// Spatial attention of one sample: channel mean at each location, row-major.
pub fn spatial_attention(f: &Tensor4, sample: usize) -> Result<Vec<f32>> {
    let (n, _, h, w) = f.dims();
    if sample >= n {
        return Err(Error::SampleOutOfRange { sample, batch: n });
    }
    let means = f.mean_over_channels();
    Ok(means[sample * h * w..(sample + 1) * h * w].to_vec())
}

pub fn attention_stats(f: &Tensor4, sample: usize) -> Result<AttentionStats> {
    let (_, c, h, w) = f.dims();
    Ok(AttentionStats {
        channel: channel_attention(f, sample)?,
        spatial: spatial_attention(f, sample)?,
        source_dims: (c, h, w),
    })
}

/// Binary keep-mask over channels: true exactly at the k largest entries.
pub fn topk_channel_mask(att: &[f32], p: f64) -> Result<Vec<bool>> {
    let k = keep_count(p, att.len())?;
    Ok(bits_from_indices(att.len(), &topk_indices_desc(att, k)))
}

/// Binary keep-mask over locations; ties broken in row-major order.
pub fn topk_spatial_mask(att: &[f32], p: f64) -> Result<Vec<bool>> {
    let k = keep_count(p, att.len())?;
    Ok(bits_from_indices(att.len(), &topk_indices_desc(att, k)))
}

impl PruneMask {
    pub fn all_true(c: usize, h: usize, w: usize) -> PruneMask {
        PruneMask {
            channel_mask: vec![true; c],
            spatial_mask: vec![true; h * w],
            spatial_h: h,
            spatial_w: w,
            channel_keep_ratio: 1.0,
            spatial_keep_ratio: 1.0,
            k_channel: c,
            k_spatial: h * w,
        }
    }

    /// Assemble a mask from explicit bits (used when masks are transformed,
    /// e.g. pooled across a downsampling layer).
    pub fn from_bits(
        channel_mask: Vec<bool>,
        spatial_mask: Vec<bool>,
        h: usize,
        w: usize,
        channel_keep_ratio: f64,
        spatial_keep_ratio: f64,
    ) -> Result<PruneMask> {
        if spatial_mask.len() != h * w {
            return Err(Error::InvalidShape {
                context: "PruneMask::from_bits",
                details: format!("spatial bits {} != {h}x{w}", spatial_mask.len()),
            });
        }
        let k_channel = channel_mask.iter().filter(|&&b| b).count();
        let k_spatial = spatial_mask.iter().filter(|&&b| b).count();
        Ok(PruneMask {
            channel_mask,
            spatial_mask,
            spatial_h: h,
            spatial_w: w,
            channel_keep_ratio,
            spatial_keep_ratio,
            k_channel,
            k_spatial,
        })
    }

    pub fn channel_bits(&self) -> &[bool] {
        &self.channel_mask
    }

    pub fn spatial_bits(&self) -> &[bool] {
        &self.spatial_mask
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.spatial_h, self.spatial_w)
    }

    pub fn channels(&self) -> usize {
        self.channel_mask.len()
    }

    pub fn is_identity(&self) -> bool {
        self.k_channel == self.channel_mask.len() && self.k_spatial == self.spatial_mask.len()
    }

    /// Debug dump: "ch: 1100..." then one line of bits per spatial row.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        out.push_str("ch: ");
        for &b in &self.channel_mask {
            out.push(if b { '1' } else { '0' });
        }
        out.push('\n');
        out.push_str("sp:\n");
        for row in 0..self.spatial_h {
            for col in 0..self.spatial_w {
                out.push(if self.spatial_mask[row * self.spatial_w + col] { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Build the per-sample mask for a feature map under the given criterion.
///
/// Attention keeps the top-k coefficients, InverseAttention the bottom-k,
/// Random a seeded uniform k-subset. p = 1 on an axis keeps that axis whole.
pub fn make_mask(
    f: &Tensor4,
    sample: usize,
    p_ch: f64,
    p_sp: f64,
    criterion: MaskCriterion,
) -> Result<PruneMask> {
    let (_, c, h, w) = f.dims();
    let k_ch = keep_count(p_ch, c)?;
    let k_sp = keep_count(p_sp, h * w)?;
    let (channel_mask, spatial_mask) = match criterion {
        MaskCriterion::Attention => {
            let stats = attention_stats(f, sample)?;
            (
                bits_from_indices(c, &topk_indices_desc(&stats.channel, k_ch)),
                bits_from_indices(h * w, &topk_indices_desc(&stats.spatial, k_sp)),
            )
        }
        MaskCriterion::InverseAttention => {
            let stats = attention_stats(f, sample)?;
            (
                bits_from_indices(c, &topk_indices_asc(&stats.channel, k_ch)),
                bits_from_indices(h * w, &topk_indices_asc(&stats.spatial, k_sp)),
            )
        }
        MaskCriterion::Random(seed) => {
            let (n, ..) = f.dims();
            if sample >= n {
                return Err(Error::SampleOutOfRange { sample, batch: n });
            }
            let mut rng = Rng::new(seed);
            let ch = bits_from_indices(c, &rng.sample_indices(c, k_ch));
            let sp = bits_from_indices(h * w, &rng.sample_indices(h * w, k_sp));
            (ch, sp)
        }
    };
    Ok(PruneMask {
        channel_mask,
        spatial_mask,
        spatial_h: h,
        spatial_w: w,
        channel_keep_ratio: p_ch,
        spatial_keep_ratio: p_sp,
        k_channel: k_ch,
        k_spatial: k_sp,
    })
}

/// Zero out the masked channels and columns of a feature map.
pub fn apply_mask(f: &Tensor4, mask: &PruneMask) -> Result<Tensor4> {
    let (_, c, h, w) = f.dims();
    if mask.channels() != c || mask.spatial_dims() != (h, w) {
        return Err(Error::InvalidShape {
            context: "apply_mask",
            details: format!(
                "mask ({}, {:?}) does not match map ({c}, ({h}, {w}))",
                mask.channels(),
                mask.spatial_dims()
            ),
        });
    }
    elementwise_mul_broadcast(f, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(dims: (usize, usize, usize, usize), data: Vec<f32>) -> Tensor4 {
        Tensor4::from_vec(dims, data).unwrap()
    }

    #[test]
    fn channel_attention_examples() {
        let f = tensor((1, 2, 2, 2), vec![1.0, 1.0, 1.0, 1.0, 0.0, 2.0, 4.0, 2.0]);
        assert_eq!(channel_attention(&f, 0).unwrap(), vec![1.0, 2.0]);

        let f = Tensor4::filled((1, 3, 2, 2), 7.5).unwrap();
        assert_eq!(channel_attention(&f, 0).unwrap(), vec![7.5, 7.5, 7.5]);

        // one hot entry 8.0 in a 2x2 channel -> attention 2.0
        let f = tensor((1, 1, 2, 2), vec![8.0, 0.0, 0.0, 0.0]);
        assert_eq!(channel_attention(&f, 0).unwrap(), vec![2.0]);
    }

    #[test]
    fn spatial_attention_examples() {
        let f = tensor((1, 2, 1, 2), vec![1.0, 3.0, 3.0, 5.0]);
        assert_eq!(spatial_attention(&f, 0).unwrap(), vec![2.0, 4.0]);

        let f = tensor((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(spatial_attention(&f, 0).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);

        let f = Tensor4::filled((2, 3, 2, 2), -1.25).unwrap();
        assert!(spatial_attention(&f, 1).unwrap().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn sample_out_of_range() {
        let f = Tensor4::filled((2, 1, 1, 1), 0.0).unwrap();
        assert!(matches!(
            channel_attention(&f, 2),
            Err(Error::SampleOutOfRange { sample: 2, batch: 2 })
        ));
        assert!(spatial_attention(&f, 5).is_err());
    }

    #[test]
    fn topk_channel_examples() {
        let mask = topk_channel_mask(&[0.9, 0.1, 0.5, 0.3], 0.5).unwrap();
        assert_eq!(mask, vec![true, false, true, false]);

        // ties broken by smaller index
        let mask = topk_channel_mask(&[5.0, 5.0, 5.0, 5.0], 0.5).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);

        // k = int(0.9 * 5) = int(4.5) = 4 (truncation)
        let mask = topk_channel_mask(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.9).unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 4);
    }

    #[test]
    fn topk_invalid_ratio() {
        assert!(matches!(topk_channel_mask(&[1.0], 0.0), Err(Error::InvalidRatio { .. })));
        assert!(topk_channel_mask(&[1.0], -0.5).is_err());
        assert!(topk_channel_mask(&[1.0], 1.01).is_err());
        assert!(topk_spatial_mask(&[1.0], f64::NAN).is_err());
    }

    #[test]
    fn topk_spatial_examples() {
        // att [[4,1],[3,2]], p=0.5 -> keep (0,0) and (1,0)
        let mask = topk_spatial_mask(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap();
        assert_eq!(mask, vec![true, false, true, false]);

        let mask = topk_spatial_mask(&[4.0, 1.0, 3.0, 2.0], 1.0).unwrap();
        assert!(mask.iter().all(|&b| b));
    }

    fn sort_oracle(att: &[f32], k: usize) -> Vec<bool> {
        // full sort descending, stable on index, keep first k
        let mut pairs: Vec<(usize, f32)> = att.iter().copied().enumerate().collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut bits = vec![false; att.len()];
        for &(i, _) in pairs.iter().take(k) {
            bits[i] = true;
        }
        bits
    }

    #[test]
    fn topk_agrees_with_full_sort_oracle() {
        let mut rng = Rng::new(123);
        for _ in 0..200 {
            let len = 1 + rng.next_below(64);
            let att: Vec<f32> = (0..len).map(|_| rng.next_normal()).collect();
            let p = (rng.next_f64() * 0.99 + 0.01).min(1.0);
            let k = keep_count(p, len).unwrap();
            let mask = topk_channel_mask(&att, p).unwrap();
            assert_eq!(mask, sort_oracle(&att, k), "att={att:?} p={p}");
        }
    }

    #[test]
    fn make_mask_identity_and_inverse() {
        let f = tensor((1, 4, 1, 1), vec![0.9, 0.1, 0.5, 0.3]);
        let m = make_mask(&f, 0, 1.0, 1.0, MaskCriterion::Attention).unwrap();
        assert!(m.is_identity());

        let m = make_mask(&f, 0, 0.5, 1.0, MaskCriterion::InverseAttention).unwrap();
        assert_eq!(m.channel_bits(), &[false, true, false, true]);
    }

    #[test]
    fn random_mask_deterministic_per_seed() {
        let f = Tensor4::filled((1, 16, 4, 4), 1.0).unwrap();
        let a = make_mask(&f, 0, 0.5, 0.5, MaskCriterion::Random(99)).unwrap();
        let b = make_mask(&f, 0, 0.5, 0.5, MaskCriterion::Random(99)).unwrap();
        assert_eq!(a, b);
        let c = make_mask(&f, 0, 0.5, 0.5, MaskCriterion::Random(100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn apply_mask_examples() {
        let data: Vec<f32> = (0..16).map(|i| i as f32 - 4.0).collect();
        let f = tensor((1, 4, 2, 2), data);

        let id = PruneMask::all_true(4, 2, 2);
        assert_eq!(apply_mask(&f, &id).unwrap().data(), f.data());

        let m = make_mask(&f, 0, 0.5, 1.0, MaskCriterion::Attention).unwrap();
        let out = apply_mask(&f, &m).unwrap();
        for (ch, &keep) in m.channel_bits().iter().enumerate() {
            let plane = out.plane(0, ch);
            if keep {
                assert_eq!(plane, f.plane(0, ch));
            } else {
                assert!(plane.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn mask_order_commutes_bit_exact() {
        let data: Vec<f32> = (0..36).map(|i| (i as f32) * 0.5 - 7.0).collect();
        let f = tensor((1, 4, 3, 3), data);
        let m = make_mask(&f, 0, 0.5, 0.5, MaskCriterion::Attention).unwrap();
        // spatial-then-channel
        let sp_only = f.mul_masks(&[true; 4], m.spatial_bits()).unwrap();
        let a = sp_only.mul_masks(m.channel_bits(), &[true; 9]).unwrap();
        // channel-then-spatial
        let ch_only = f.mul_masks(m.channel_bits(), &[true; 9]).unwrap();
        let b = ch_only.mul_masks(&[true; 4], m.spatial_bits()).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), apply_mask(&f, &m).unwrap().data());
    }

    #[test]
    fn apply_mask_idempotent() {
        let data: Vec<f32> = (0..32).map(|i| (i as f32).sin()).collect();
        let f = tensor((1, 2, 4, 4), data);
        let m = make_mask(&f, 0, 0.5, 0.5, MaskCriterion::Attention).unwrap();
        let once = apply_mask(&f, &m).unwrap();
        let twice = apply_mask(&once, &m).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn apply_mask_shape_mismatch() {
        let f = Tensor4::filled((1, 2, 2, 2), 1.0).unwrap();
        let m = PruneMask::all_true(3, 2, 2);
        assert!(apply_mask(&f, &m).is_err());
    }

    #[test]
    fn dump_format() {
        let m = PruneMask::from_bits(
            vec![true, true, false, false],
            vec![true, false, false, true],
            2,
            2,
            0.5,
            0.5,
        )
        .unwrap();
        assert_eq!(m.dump(), "ch: 1100\nsp:\n10\n01\n");
    }

    #[test]
    fn keep_count_clamps_low() {
        // tiny p still keeps one survivor
        assert_eq!(keep_count(1e-6, 64).unwrap(), 1);
        assert_eq!(keep_count(1.0, 64).unwrap(), 64);
        assert_eq!(keep_count(0.5, 4).unwrap(), 2);
    }
}
