//! Training with targeted dropout: dynamic-prune layers stay active during
//! training, their prune ratios warm up small and ascend stepwise toward
//! per-block targets as the training loss plateaus. Also the block
//! sensitivity sweep and the attention/random/inverse criteria comparison.

use crate::attention::MaskCriterion;
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::layers::{softmax_xent_bwd, softmax_xent_fwd, CosineSchedule};
use crate::model::{ExecMode, Model, PruneSettings};
use crate::rng::Rng;
use crate::tensor::Tensor4;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Per-block target prune ratios plus the ascent schedule.
#[derive(Debug, Clone)]
pub struct PruneConfig {
    /// Target channel prune ratio per block, each in [0, 1).
    pub channel_prune: Vec<f64>,
    /// Target spatial-column prune ratio per block, each in [0, 1).
    pub spatial_prune: Vec<f64>,
    pub criterion: MaskCriterion,
    /// Starting prune ratio for every block (clamped by its target).
    pub warmup_ratio: f64,
    /// Ratio increment applied to every block on each ascent event.
    pub ascent_step: f64,
    /// Epochs of plateau required before an ascent/stop event.
    pub convergence_window: usize,
    /// Relative training-loss improvement below which the window counts as a
    /// plateau.
    pub convergence_eps: f64,
    /// Optional accuracy the run must reach before it may stop early.
    pub accuracy_target: Option<f64>,
}

impl PruneConfig {
    pub fn new(channel_prune: Vec<f64>, spatial_prune: Vec<f64>) -> Self {
        Self {
            channel_prune,
            spatial_prune,
            criterion: MaskCriterion::Attention,
            warmup_ratio: 0.1,
            ascent_step: 0.05,
            convergence_window: 3,
            convergence_eps: 1e-3,
            accuracy_target: None,
        }
    }

    /// No pruning at all: plain SGD training.
    pub fn none(blocks: usize) -> Self {
        Self::new(vec![0.0; blocks], vec![0.0; blocks])
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.channel_prune.len() != blocks || self.spatial_prune.len() != blocks {
            return Err(Error::BlockMismatch {
                expected: blocks,
                got: self.channel_prune.len().max(self.spatial_prune.len()),
            });
        }
        for &r in self.channel_prune.iter().chain(&self.spatial_prune) {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidRatio { value: 1.0 - r });
            }
        }
        if self.ascent_step <= 0.0 || !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config {
                reason: "warmup must be in [0,1) and ascent step positive".into(),
            });
        }
        if self.convergence_window == 0 {
            return Err(Error::Config { reason: "convergence window must be >= 1".into() });
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.channel_prune.len()
    }

    fn settings_at(&self, state: &RatioState) -> Result<PruneSettings> {
        PruneSettings::from_prune_ratios(
            self.block_count(),
            &state.channel,
            &state.spatial,
            self.criterion,
        )
    }

    /// Settings at the final target ratios.
    pub fn target_settings(&self) -> Result<PruneSettings> {
        PruneSettings::from_prune_ratios(
            self.block_count(),
            &self.channel_prune,
            &self.spatial_prune,
            self.criterion,
        )
    }
}

/// Current prune ratios during a run. Ratios are recomputed from the step
/// counter so repeated additions cannot drift, never decrease, and clamp to
/// their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioState {
    pub channel: Vec<f64>,
    pub spatial: Vec<f64>,
    steps: usize,
}

impl RatioState {
    pub fn warmup(config: &PruneConfig) -> Self {
        let mut s = Self {
            channel: vec![0.0; config.block_count()],
            spatial: vec![0.0; config.block_count()],
            steps: 0,
        };
        s.recompute(config);
        s
    }

    fn recompute(&mut self, config: &PruneConfig) {
        let level = config.warmup_ratio + self.steps as f64 * config.ascent_step;
        for b in 0..config.block_count() {
            self.channel[b] = level.min(config.channel_prune[b]);
            self.spatial[b] = level.min(config.spatial_prune[b]);
        }
    }

    /// One ascent event: every block steps toward its target simultaneously.
    pub fn ascend(&mut self, config: &PruneConfig) {
        self.steps += 1;
        self.recompute(config);
    }

    pub fn at_target(&self, config: &PruneConfig) -> bool {
        self.channel
            .iter()
            .zip(&config.channel_prune)
            .chain(self.spatial.iter().zip(&config.spatial_prune))
            .all(|(cur, target)| cur >= target)
    }
}

/// Plateau rule: relative improvement of the training loss across the last
/// `window` epochs fell below `eps`.
pub fn plateaued(losses: &[f64], window: usize, eps: f64) -> bool {
    if losses.len() < window + 1 {
        return false;
    }
    let then = losses[losses.len() - 1 - window];
    let now = losses[losses.len() - 1];
    (then - now) / then.abs().max(1e-12) < eps
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainParams {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub augment: AugmentConfig,
    pub eval_batch: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            lr0: 0.1,
            augment: AugmentConfig::default(),
            eval_batch: 128,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
    /// Test accuracy evaluated with pruning active at the epoch's ratios.
    pub accuracy: f64,
    pub channel_ratios: Vec<f64>,
    pub spatial_ratios: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainRun {
    pub fn final_accuracy(&self) -> f64 {
        self.history.last().map(|r| r.accuracy).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let blocks = self.history.first().map(|r| r.channel_ratios.len()).unwrap_or(0);
        let mut out = String::from("epoch,lr,loss,acc");
        for b in 0..blocks {
            out.push_str(&format!(",ch_r{b}"));
        }
        for b in 0..blocks {
            out.push_str(&format!(",sp_r{b}"));
        }
        out.push('\n');
        for r in &self.history {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}", r.epoch, r.lr, r.loss, r.accuracy));
            for v in &r.channel_ratios {
                out.push_str(&format!(",{v:.4}"));
            }
            for v in &r.spatial_ratios {
                out.push_str(&format!(",{v:.4}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Top-1 accuracy of the model over a dataset with the given prune settings.
/// Weights are untouched; the sample base keys each batch so per-sample
/// random masks do not depend on the batch slicing.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    settings: &PruneSettings,
    batch_size: usize,
) -> Result<f64> {
    let n = data.len();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (batch, labels) = data.gather(&indices)?;
        let batch_settings = settings.clone().with_sample_base(start as u64);
        let (logits, _) = model.forward(&batch, &batch_settings, ExecMode::Eval)?;
        correct += count_correct(&logits, &labels);
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

fn count_correct(logits: &Tensor4, labels: &[usize]) -> usize {
    let (_, k, ..) = logits.dims();
    let mut correct = 0;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.sample(b);
        let mut arg = 0;
        let mut best = row[0];
        for (i, &v) in row.iter().enumerate().take(k) {
            if v > best {
                best = v;
                arg = i;
            }
        }
        if arg == label {
            correct += 1;
        }
    }
    correct
}

/// Evaluate with pruning active at the config's target ratios.
pub fn evaluate_pruned(model: &Model, data: &Dataset, config: &PruneConfig) -> Result<f64> {
    config.validate(model.block_count())?;
    evaluate(model, data, &config.target_settings()?, 128)
}

/// TTD training loop. Pruning starts at the warm-up ratio; whenever the
/// training loss plateaus, every block's ratio ascends one step toward its
/// target; once every ratio sits at its target, the next plateau (plus the
/// optional accuracy gate) ends the run, as does the epoch budget.
pub fn ttd_train(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    config: &PruneConfig,
    params: &TrainParams,
) -> Result<TrainRun> {
    config.validate(model.block_count())?;
    let n = train.len();
    if n == 0 {
        return Err(Error::Config { reason: "empty training set".into() });
    }
    let batches_per_epoch = n.div_ceil(params.batch_size);
    let schedule = CosineSchedule::new(params.lr0, params.epochs * batches_per_epoch);
    let mut rng = Rng::new(params.seed);
    let mut state = RatioState::warmup(config);
    let mut history = Vec::new();
    let mut phase_losses: Vec<f64> = Vec::new();
    let mut global_step = 0usize;

    for epoch in 0..params.epochs {
        let lr_at_start = schedule.lr(global_step)?;
        let mut indices: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut indices);
        let mut epoch_loss = 0.0f64;

        for chunk in indices.chunks(params.batch_size) {
            let (raw_batch, labels) = train.gather(chunk)?;
            let batch = augment(&raw_batch, &params.augment, &mut rng)?;
            let settings = config
                .settings_at(&state)?
                .with_sample_base((global_step * params.batch_size) as u64);
            let (logits, trace) = model.forward(&batch, &settings, ExecMode::Train)?;
            let (loss, probs) = softmax_xent_fwd(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            let grad_logits = softmax_xent_bwd(&probs, &labels)?;
            let grads = model.backward(&trace, &grad_logits)?;
            let lr = schedule.lr(global_step)?;
            model.apply_grads(&grads, lr);
            global_step += 1;
        }
        epoch_loss /= n as f64;

        let eval_settings = config.settings_at(&state)?;
        let accuracy = evaluate(model, test, &eval_settings, params.eval_batch)?;
        history.push(EpochRecord {
            epoch,
            lr: lr_at_start,
            loss: epoch_loss,
            accuracy,
            channel_ratios: state.channel.clone(),
            spatial_ratios: state.spatial.clone(),
        });

        phase_losses.push(epoch_loss);
        if plateaued(&phase_losses, config.convergence_window, config.convergence_eps) {
            if state.at_target(config) {
                let accuracy_ok = config.accuracy_target.is_none_or(|t| accuracy >= t);
                if accuracy_ok {
                    break;
                }
            } else {
                state.ascend(config);
                phase_losses.clear();
            }
        }
    }

    Ok(TrainRun {
        seed: params.seed,
        batch_size: params.batch_size,
        epochs_run: history.len(),
        history,
    })
}

/// Plain SGD baseline: TTD with every target ratio at zero.
pub fn plain_train(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    params: &TrainParams,
) -> Result<TrainRun> {
    let config = PruneConfig::none(model.block_count());
    ttd_train(model, train, test, &config, params)
}

// ---------------------------------------------------------------------------
// Sensitivity analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SensitivityCurve {
    pub block: usize,
    /// (prune ratio, accuracy), ratios strictly increasing.
    pub points: Vec<(f64, f64)>,
}

/// One block's accuracy-vs-prune-ratio curve: channel pruning of that block
/// alone under the attention criterion, everything else untouched.
pub fn sensitivity_sweep(
    model: &Model,
    data: &Dataset,
    block: usize,
    ratio_grid: &[f64],
) -> Result<SensitivityCurve> {
    let blocks = model.block_count();
    if block >= blocks {
        return Err(Error::BlockMismatch { expected: blocks, got: block + 1 });
    }
    if ratio_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config { reason: "ratio grid must be strictly increasing".into() });
    }
    let mut points = Vec::with_capacity(ratio_grid.len());
    for &ratio in ratio_grid {
        let mut channel = vec![0.0; blocks];
        channel[block] = ratio;
        let settings = PruneSettings::from_prune_ratios(
            blocks,
            &channel,
            &vec![0.0; blocks],
            MaskCriterion::Attention,
        )?;
        let acc = evaluate(model, data, &settings, 128)?;
        points.push((ratio, acc));
    }
    Ok(SensitivityCurve { block, points })
}

pub fn sweep_csv(curves: &[SensitivityCurve]) -> String {
    let mut out = String::from("block,ratio,acc\n");
    for curve in curves {
        for (ratio, acc) in &curve.points {
            out.push_str(&format!("{},{ratio:.4},{acc:.6}\n", curve.block));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CriteriaComparison {
    pub block: usize,
    pub grid: Vec<f64>,
    pub attention: Vec<f64>,
    pub inverse: Vec<f64>,
    /// Accuracy per random seed, indexed [seed][grid point].
    pub random: Vec<Vec<f64>>,
    pub random_mean: Vec<f64>,
}

/// Channel pruning of one block under the three criteria over a shared grid;
/// the random criterion averages over the given seeds.
pub fn compare_criteria(
    model: &Model,
    data: &Dataset,
    block: usize,
    ratio_grid: &[f64],
    random_seeds: &[u64],
) -> Result<CriteriaComparison> {
    let blocks = model.block_count();
    if block >= blocks {
        return Err(Error::BlockMismatch { expected: blocks, got: block + 1 });
    }
    if random_seeds.is_empty() {
        return Err(Error::Config { reason: "need at least one random seed".into() });
    }
    let eval_at = |criterion: MaskCriterion, ratio: f64| -> Result<f64> {
        let mut channel = vec![0.0; blocks];
        channel[block] = ratio;
        let settings = PruneSettings::from_prune_ratios(
            blocks,
            &channel,
            &vec![0.0; blocks],
            criterion,
        )?;
        evaluate(model, data, &settings, 128)
    };

    let mut attention = Vec::new();
    let mut inverse = Vec::new();
    let mut random = vec![Vec::new(); random_seeds.len()];
    for &ratio in ratio_grid {
        attention.push(eval_at(MaskCriterion::Attention, ratio)?);
        inverse.push(eval_at(MaskCriterion::InverseAttention, ratio)?);
        for (s, &seed) in random_seeds.iter().enumerate() {
            random[s].push(eval_at(MaskCriterion::Random(seed), ratio)?);
        }
    }
    let random_mean = (0..ratio_grid.len())
        .map(|i| random.iter().map(|r| r[i]).sum::<f64>() / random.len() as f64)
        .collect();
    Ok(CriteriaComparison {
        block,
        grid: ratio_grid.to_vec(),
        attention,
        inverse,
        random,
        random_mean,
    })
}

impl CriteriaComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ratio,attention");
        for s in 0..self.random.len() {
            out.push_str(&format!(",random_s{s}"));
        }
        out.push_str(",random_mean,inverse\n");
        for (i, ratio) in self.grid.iter().enumerate() {
            out.push_str(&format!("{ratio:.4},{:.6}", self.attention[i]));
            for r in &self.random {
                out.push_str(&format!(",{:.6}", r[i]));
            }
            out.push_str(&format!(",{:.6},{:.6}\n", self.random_mean[i], self.inverse[i]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes;
    use crate::model::{build_model, toy_vgg_spec};

    #[test]
    fn ratio_ascent_sequence() {
        let mut config = PruneConfig::new(vec![0.3], vec![0.0]);
        config.warmup_ratio = 0.1;
        config.ascent_step = 0.05;
        let mut state = RatioState::warmup(&config);
        let mut seen = vec![state.channel[0]];
        for _ in 0..6 {
            state.ascend(&config);
            seen.push(state.channel[0]);
        }
        let expect = [0.1, 0.15, 0.2, 0.25, 0.3, 0.3, 0.3];
        for (got, want) in seen.iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "{seen:?}");
        }
        // spatial target 0 stays 0 throughout
        assert_eq!(state.spatial, vec![0.0]);
        assert!(state.at_target(&config));
    }

    #[test]
    fn ascent_monotone_and_clamped() {
        let config = PruneConfig::new(vec![0.25, 0.6], vec![0.1, 0.0]);
        let mut state = RatioState::warmup(&config);
        let mut prev = state.clone();
        for _ in 0..20 {
            state.ascend(&config);
            for b in 0..2 {
                assert!(state.channel[b] >= prev.channel[b]);
                assert!(state.channel[b] <= config.channel_prune[b] + 1e-12);
                assert!(state.spatial[b] >= prev.spatial[b]);
                assert!(state.spatial[b] <= config.spatial_prune[b] + 1e-12);
            }
            prev = state.clone();
        }
        assert!(state.at_target(&config));
    }

    #[test]
    fn plateau_rule() {
        assert!(!plateaued(&[1.0, 0.9], 3, 1e-3));
        assert!(!plateaued(&[1.0, 0.8, 0.6, 0.4], 3, 1e-3));
        assert!(plateaued(&[0.5, 0.5, 0.5, 0.49999], 3, 1e-3));
        // worsening loss also counts as a plateau
        assert!(plateaued(&[0.5, 0.5, 0.5, 0.51], 3, 1e-3));
    }

    #[test]
    fn config_validation() {
        let config = PruneConfig::new(vec![0.5], vec![0.0]);
        assert!(config.validate(1).is_ok());
        assert!(matches!(config.validate(2), Err(Error::BlockMismatch { .. })));
        let bad = PruneConfig::new(vec![1.0], vec![0.0]);
        assert!(bad.validate(1).is_err());
    }

    fn quick_params(epochs: usize) -> TrainParams {
        TrainParams {
            seed: 11,
            epochs,
            batch_size: 16,
            lr0: 0.05,
            augment: AugmentConfig { enabled: false, ..Default::default() },
            eval_batch: 64,
        }
    }

    #[test]
    fn identical_seeds_identical_history() {
        let train = synth_shapes(40, 10, 5).unwrap();
        let test = synth_shapes(20, 10, 6).unwrap();
        let config = PruneConfig::new(vec![0.2, 0.2], vec![0.0, 0.0]);

        let mut m1 = build_model(&toy_vgg_spec(), 3).unwrap();
        let run1 = ttd_train(&mut m1, &train, &test, &config, &quick_params(2)).unwrap();
        let mut m2 = build_model(&toy_vgg_spec(), 3).unwrap();
        let run2 = ttd_train(&mut m2, &train, &test, &config, &quick_params(2)).unwrap();

        assert_eq!(run1.to_csv(), run2.to_csv());
        assert_eq!(m1.weights_snapshot(), m2.weights_snapshot());
    }

    #[test]
    fn zero_targets_match_plain_sgd_bit_exact() {
        let train = synth_shapes(40, 10, 5).unwrap();
        let test = synth_shapes(20, 10, 6).unwrap();

        let mut m1 = build_model(&toy_vgg_spec(), 4).unwrap();
        let zero = PruneConfig::none(2);
        let run1 = ttd_train(&mut m1, &train, &test, &zero, &quick_params(2)).unwrap();

        let mut m2 = build_model(&toy_vgg_spec(), 4).unwrap();
        let run2 = plain_train(&mut m2, &train, &test, &quick_params(2)).unwrap();

        let l1: Vec<f64> = run1.history.iter().map(|r| r.loss).collect();
        let l2: Vec<f64> = run2.history.iter().map(|r| r.loss).collect();
        assert_eq!(l1, l2);
        assert_eq!(m1.weights_snapshot(), m2.weights_snapshot());
        // ratio columns all zero
        assert!(run1.history.iter().all(|r| r.channel_ratios.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn diverging_loss_aborts_with_diagnostic() {
        let train = synth_shapes(40, 10, 5).unwrap();
        let test = synth_shapes(20, 10, 6).unwrap();
        let mut model = build_model(&toy_vgg_spec(), 3).unwrap();
        let params = TrainParams { lr0: 1e9, ..quick_params(2) };
        let err = plain_train(&mut model, &train, &test, &params).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err:?}");
    }

    #[test]
    fn evaluate_pruned_leaves_weights_untouched() {
        let test = synth_shapes(20, 10, 6).unwrap();
        let model = build_model(&toy_vgg_spec(), 9).unwrap();
        let before = model.weights_snapshot();
        let config = PruneConfig::new(vec![0.5, 0.5], vec![0.25, 0.25]);
        let _ = evaluate_pruned(&model, &test, &config).unwrap();
        assert_eq!(model.weights_snapshot(), before);
    }

    #[test]
    fn zero_ratios_equal_unpruned_eval_exactly() {
        let test = synth_shapes(30, 10, 7).unwrap();
        let model = build_model(&toy_vgg_spec(), 10).unwrap();
        let unpruned = evaluate(&model, &test, &PruneSettings::disabled(2), 64).unwrap();
        let config = PruneConfig::none(2);
        let pruned = evaluate_pruned(&model, &test, &config).unwrap();
        assert_eq!(unpruned, pruned);
    }

    #[test]
    fn sweep_structure() {
        let test = synth_shapes(20, 10, 8).unwrap();
        let model = build_model(&toy_vgg_spec(), 12).unwrap();
        let baseline = evaluate(&model, &test, &PruneSettings::disabled(2), 64).unwrap();
        for block in 0..2 {
            let curve =
                sensitivity_sweep(&model, &test, block, &[0.0, 0.25, 0.5]).unwrap();
            assert_eq!(curve.points.len(), 3);
            assert_eq!(curve.points[0], (0.0, baseline));
        }
        assert!(sensitivity_sweep(&model, &test, 5, &[0.0]).is_err());
        assert!(sensitivity_sweep(&model, &test, 0, &[0.5, 0.5]).is_err());
        let curves = vec![sensitivity_sweep(&model, &test, 0, &[0.0, 0.5]).unwrap()];
        let csv = sweep_csv(&curves);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn compare_criteria_coincide_at_ratio_zero() {
        let test = synth_shapes(20, 10, 9).unwrap();
        let model = build_model(&toy_vgg_spec(), 13).unwrap();
        let cmp =
            compare_criteria(&model, &test, 1, &[0.0, 0.5], &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(cmp.attention[0], cmp.inverse[0]);
        assert_eq!(cmp.attention[0], cmp.random_mean[0]);
        for r in &cmp.random {
            assert_eq!(r[0], cmp.attention[0]);
        }
        let csv = cmp.to_csv();
        assert!(csv.starts_with("ratio,attention,random_s0"));
        assert_eq!(csv.lines().count(), 3);
    }
}
