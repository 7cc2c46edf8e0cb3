//! Analytical FLOPs accounting (1 FLOP unit = 1 multiply-accumulate) plus
//! the instrumented-counter oracle from mask-skipping convolution runs.
//!
//! Conventions: conv cost is c_out*c_in*k*k*h_out*w_out MACs; dense layers
//! cost in*out and are never pruned; pooling/ReLU/attention cost zero inside
//! the totals (the attention and top-k work is reported separately as an
//! overhead line). A conv's dynamic cost scales by the keep fractions of the
//! dynamic-prune layer feeding its input map; the network input itself is
//! never pruned. Keep fractions are top-k-quantized (k / count). Padding
//! taps are counted as if dense, which overstates a real kernel's work by
//! under 5% for 3x3 same-padding maps of 8x8 and larger.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    effective_channel_keep, effective_spatial_keep, ExecMode, LayerSpec, Model, ModelSpec,
    PruneSettings,
};
use crate::tensor::Tensor4;

/// Per-block PRUNE ratios (user-facing convention; keep = 1 - prune).
#[derive(Debug, Clone, Default)]
pub struct PruneRatios {
    pub channel: Vec<f64>,
    pub spatial: Vec<f64>,
}

impl PruneRatios {
    pub fn zeros(blocks: usize) -> Self {
        Self { channel: vec![0.0; blocks], spatial: vec![0.0; blocks] }
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.channel.len() != blocks || self.spatial.len() != blocks {
            return Err(Error::BlockMismatch {
                expected: blocks,
                got: self.channel.len().max(self.spatial.len()),
            });
        }
        for &r in self.channel.iter().chain(&self.spatial) {
            if !(0.0..1.0).contains(&r) || !r.is_finite() {
                return Err(Error::InvalidRatio { value: 1.0 - r });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerFlops {
    pub name: String,
    pub dense: u64,
    pub dynamic: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopsReport {
    pub model: String,
    pub per_layer: Vec<LayerFlops>,
    pub dense_total: u64,
    pub dynamic_total: u64,
    pub reduction_pct: f64,
    /// Reduction attributable to channel pruning alone (spatial forced dense).
    pub channel_attrib_pct: f64,
    /// Reduction attributable to spatial pruning alone (channels forced dense).
    pub spatial_attrib_pct: f64,
    /// reduction - channel - spatial; the multiplicative overlap of the two.
    pub interaction_pct: f64,
    /// Attention pooling + top-k work per forward pass, outside the totals.
    pub overhead_macs: u64,
}

/// MAC count of one dense convolution.
pub fn dense_conv_flops(c_out: usize, c_in: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    (c_out * c_in * k * k * h_out * w_out) as u64
}

#[derive(Clone, Copy)]
enum Axes {
    Both,
    ChannelOnly,
    SpatialOnly,
}

/// Walk the layer chain accumulating per-layer dense and dynamic MACs.
/// `axes` selects which prune dimension is active (for attribution).
fn walk(spec: &ModelSpec, keep_ch: &[f64], keep_sp: &[f64], axes: Axes) -> Result<(Vec<LayerFlops>, f64, f64, u64)> {
    let layout = spec.validate()?;
    let mut per_layer = Vec::new();
    let mut dense_total = 0f64;
    let mut dyn_total = 0f64;
    let mut overhead = 0u64;
    // keep fractions describing the map currently flowing forward
    let mut cur = (1.0f64, 1.0f64);
    for (i, layer) in spec.layers.iter().enumerate() {
        let (c, h, w) = layout.layer_inputs[i];
        match layer {
            LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                let hp = h + 2 * padding;
                let wp = w + 2 * padding;
                let ho = (hp - kernel) / stride + 1;
                let wo = (wp - kernel) / stride + 1;
                let dense = dense_conv_flops(*out_channels, c, *kernel, ho, wo);
                let dynamic = dense as f64 * cur.0 * cur.1;
                per_layer.push(LayerFlops {
                    name: layout.layer_names[i].clone(),
                    dense,
                    dynamic: dynamic.round() as u64,
                });
                dense_total += dense as f64;
                dyn_total += dynamic;
                cur = (1.0, 1.0); // a conv output is dense until the next prune
            }
            LayerSpec::DynPrune => {
                let block = layout.dynprune_block[i];
                let p_ch = match axes {
                    Axes::SpatialOnly => 1.0,
                    _ => effective_channel_keep(keep_ch[block], c)?,
                };
                let p_sp = match axes {
                    Axes::ChannelOnly => 1.0,
                    _ => effective_spatial_keep(keep_sp[block], h, w)?,
                };
                cur = (p_ch, p_sp);
                // two pooled means over the map plus the top-k scans
                overhead += (2 * c * h * w + c + h * w) as u64;
            }
            LayerSpec::Dense { out_features } => {
                let dense = (c * h * w * out_features) as u64;
                per_layer.push(LayerFlops {
                    name: layout.layer_names[i].clone(),
                    dense,
                    dynamic: dense, // FC layers are counted but never pruned
                });
                dense_total += dense as f64;
                dyn_total += dense as f64;
                cur = (1.0, 1.0);
            }
            LayerSpec::GlobalAvgPool => cur = (1.0, 1.0),
            // keep fractions persist through relu and pooling
            LayerSpec::Relu | LayerSpec::MaxPool2x2 | LayerSpec::SoftmaxXent => {}
        }
    }
    for extra in &spec.extra_dense_convs {
        let dense = dense_conv_flops(extra.c_out, extra.c_in, extra.kernel, extra.h_out, extra.w_out);
        per_layer.push(LayerFlops { name: extra.name.clone(), dense, dynamic: dense });
        dense_total += dense as f64;
        dyn_total += dense as f64;
    }
    Ok((per_layer, dense_total, dyn_total, overhead))
}

/// Full report for a prune configuration, with channel/spatial attribution.
pub fn dynamic_flops(spec: &ModelSpec, ratios: &PruneRatios) -> Result<FlopsReport> {
    ratios.validate(spec.block_count())?;
    let keep_ch: Vec<f64> = ratios.channel.iter().map(|r| 1.0 - r).collect();
    let keep_sp: Vec<f64> = ratios.spatial.iter().map(|r| 1.0 - r).collect();

    let (per_layer, dense_total, dyn_total, overhead) =
        walk(spec, &keep_ch, &keep_sp, Axes::Both)?;
    let (_, _, dyn_ch, _) = walk(spec, &keep_ch, &keep_sp, Axes::ChannelOnly)?;
    let (_, _, dyn_sp, _) = walk(spec, &keep_ch, &keep_sp, Axes::SpatialOnly)?;

    let reduction_pct = 100.0 * (1.0 - dyn_total / dense_total);
    let channel_attrib_pct = 100.0 * (1.0 - dyn_ch / dense_total);
    let spatial_attrib_pct = 100.0 * (1.0 - dyn_sp / dense_total);
    Ok(FlopsReport {
        model: spec.name.clone(),
        per_layer,
        dense_total: dense_total.round() as u64,
        dynamic_total: dyn_total.round() as u64,
        reduction_pct,
        channel_attrib_pct,
        spatial_attrib_pct,
        interaction_pct: reduction_pct - channel_attrib_pct - spatial_attrib_pct,
        overhead_macs: overhead,
    })
}

/// Baseline (unpruned) report.
pub fn model_dense_flops(spec: &ModelSpec) -> Result<FlopsReport> {
    dynamic_flops(spec, &PruneRatios::zeros(spec.block_count()))
}

/// The (channel_pct, spatial_pct) attribution of a report.
pub fn redundancy_split(report: &FlopsReport) -> (f64, f64) {
    (report.channel_attrib_pct, report.spatial_attrib_pct)
}

/// Per-layer executed MAC counters from a mask-skipping forward pass, paired
/// with the exact per-mask analytical counts.
#[derive(Debug, Clone)]
pub struct MeasuredMacs {
    /// (layer name, counter from the conv loops, analytic from mask popcounts)
    pub per_layer: Vec<(String, u64, u64)>,
}

impl MeasuredMacs {
    pub fn measured_total(&self) -> u64 {
        self.per_layer.iter().map(|(_, m, _)| m).sum()
    }
    pub fn analytic_total(&self) -> u64 {
        self.per_layer.iter().map(|(_, _, a)| a).sum()
    }
}

/// Run a batch through mask-skipping convolutions and collect counters.
pub fn measured_macs(model: &Model, batch: &Tensor4, prune: &PruneSettings) -> Result<MeasuredMacs> {
    let (_, trace) = model.forward(batch, prune, ExecMode::Measure)?;
    Ok(MeasuredMacs {
        per_layer: trace
            .measured
            .into_iter()
            .map(|m| (m.name, m.measured, m.analytic))
            .collect(),
    })
}

impl FlopsReport {
    /// CSV rows "layer,dense,dynamic", then total and overhead lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,dense,dynamic\n");
        for l in &self.per_layer {
            out.push_str(&format!("{},{},{}\n", l.name, l.dense, l.dynamic));
        }
        out.push_str(&format!("total,{},{}\n", self.dense_total, self.dynamic_total));
        out.push_str(&format!("overhead,{0},{0}\n", self.overhead_macs));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}
