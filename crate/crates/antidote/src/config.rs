//! Experiment configuration: optional TOML config file with flat key/value
//! sections, merged under explicit command-line flags (flags win). Unknown
//! keys are rejected before any compute starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::attention::MaskCriterion;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::train::{PruneConfig, TrainParams};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub experiment: Option<ExperimentSection>,
    pub train: Option<TrainSection>,
    pub prune: Option<PruneSection>,
    pub analysis: Option<AnalysisSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub model: Option<String>,
    pub data: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f32>,
    pub train_n: Option<usize>,
    pub test_n: Option<usize>,
    pub augment: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub ratios_ch: Option<Vec<f64>>,
    pub ratios_sp: Option<Vec<f64>>,
    pub criterion: Option<String>,
    pub warmup: Option<f64>,
    pub step: Option<f64>,
    pub window: Option<usize>,
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub grid: Option<Vec<f64>>,
    pub block: Option<usize>,
    pub random_seeds: Option<usize>,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.display().to_string() });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io("read config", e))?;
    toml::from_str(&text).map_err(|e| Error::Config { reason: e.to_string() })
}

/// Flag values as given on the command line (None = not given).
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub model: Option<String>,
    pub data: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub ratios_ch: Option<Vec<f64>>,
    pub ratios_sp: Option<Vec<f64>>,
    pub criterion: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f32>,
    pub train_n: Option<usize>,
    pub test_n: Option<usize>,
    pub augment: Option<bool>,
    pub warmup: Option<f64>,
    pub step: Option<f64>,
    pub window: Option<usize>,
    pub eps: Option<f64>,
    pub grid: Option<Vec<f64>>,
    pub block: Option<usize>,
    pub random_seeds: Option<usize>,
}

/// Fully resolved configuration a command runs with.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: String,
    pub data: String,
    pub seed: u64,
    pub out: PathBuf,
    /// Target prune ratios (may be empty = zeros for the model's blocks).
    pub ratios_ch: Vec<f64>,
    pub ratios_sp: Vec<f64>,
    pub criterion: MaskCriterion,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub train_n: usize,
    pub test_n: usize,
    pub augment: bool,
    pub warmup: f64,
    pub ascent_step: f64,
    pub window: usize,
    pub eps: f64,
    pub grid: Vec<f64>,
    pub block: Option<usize>,
    pub random_seeds: usize,
}

impl ExperimentConfig {
    /// Merge precedence: flag > config file > default. `model` must come
    /// from one of the two sources.
    pub fn resolve(cli: &CliOverrides, file: &FileConfig) -> Result<ExperimentConfig> {
        let exp = file.experiment.clone().unwrap_or_default();
        let train = file.train.clone().unwrap_or_default();
        let prune = file.prune.clone().unwrap_or_default();
        let analysis = file.analysis.clone().unwrap_or_default();

        let model = cli
            .model
            .clone()
            .or(exp.model)
            .ok_or_else(|| Error::Config { reason: "--model is required".into() })?;
        let criterion_name =
            cli.criterion.clone().or(prune.criterion).unwrap_or_else(|| "attention".into());
        let criterion = MaskCriterion::parse(&criterion_name).ok_or_else(|| Error::Config {
            reason: format!(
                "--criterion must be attention|random|inverse, got {criterion_name}"
            ),
        })?;
        let grid = cli
            .grid
            .clone()
            .or(analysis.grid)
            .unwrap_or_else(|| vec![0.0, 0.25, 0.5, 0.75]);
        if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config {
                reason: "--grid must be a strictly increasing ratio list".into(),
            });
        }
        let config = ExperimentConfig {
            model,
            data: cli.data.clone().or(exp.data).unwrap_or_else(|| "synthetic".into()),
            seed: cli.seed.or(exp.seed).unwrap_or(0),
            out: PathBuf::from(cli.out.clone().or(exp.out).unwrap_or_else(|| "out".into())),
            ratios_ch: cli.ratios_ch.clone().or(prune.ratios_ch).unwrap_or_default(),
            ratios_sp: cli.ratios_sp.clone().or(prune.ratios_sp).unwrap_or_default(),
            criterion,
            epochs: cli.epochs.or(train.epochs).unwrap_or(30),
            batch_size: cli.batch_size.or(train.batch_size).unwrap_or(32),
            lr: cli.lr.or(train.lr).unwrap_or(0.1),
            train_n: cli.train_n.or(train.train_n).unwrap_or(600),
            test_n: cli.test_n.or(train.test_n).unwrap_or(300),
            augment: cli.augment.or(train.augment).unwrap_or(true),
            warmup: cli.warmup.or(prune.warmup).unwrap_or(0.1),
            ascent_step: cli.step.or(prune.step).unwrap_or(0.05),
            window: cli.window.or(prune.window).unwrap_or(3),
            eps: cli.eps.or(prune.eps).unwrap_or(1e-3),
            grid,
            block: cli.block.or(analysis.block),
            random_seeds: cli.random_seeds.or(analysis.random_seeds).unwrap_or(5),
        };
        if config.batch_size == 0 || config.epochs == 0 {
            return Err(Error::Config { reason: "epochs and batch size must be >= 1".into() });
        }
        if config.random_seeds == 0 {
            return Err(Error::Config { reason: "random_seeds must be >= 1".into() });
        }
        Ok(config)
    }

    /// Prune ratios padded with zeros to the model's block count.
    pub fn prune_config(&self, blocks: usize) -> Result<PruneConfig> {
        let pad = |v: &Vec<f64>| -> Result<Vec<f64>> {
            if v.is_empty() {
                Ok(vec![0.0; blocks])
            } else if v.len() == blocks {
                Ok(v.clone())
            } else {
                Err(Error::BlockMismatch { expected: blocks, got: v.len() })
            }
        };
        let mut config = PruneConfig::new(pad(&self.ratios_ch)?, pad(&self.ratios_sp)?);
        config.criterion = self.criterion;
        config.warmup_ratio = self.warmup;
        config.ascent_step = self.ascent_step;
        config.convergence_window = self.window;
        config.convergence_eps = self.eps;
        config.validate(blocks)?;
        Ok(config)
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr,
            augment: AugmentConfig { enabled: self.augment, ..Default::default() },
            eval_batch: 128,
        }
    }
}

/// Parse a comma-separated ratio list ("0.2,0.2,0.6").
pub fn parse_ratio_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| format!("'{part}' is not a number"))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model spec files
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    name: Option<String>,
    input: [usize; 3],
    classes: usize,
    layers: Vec<String>,
    #[serde(default)]
    blocks: Vec<[usize; 2]>,
}

fn parse_layer(s: &str, index: usize) -> Result<crate::model::LayerSpec> {
    use crate::model::LayerSpec;
    let mut parts = s.split_whitespace();
    let kind = parts.next().unwrap_or("");
    let bad = |reason: String| Error::SpecInvalid { layer: index, reason };
    let parse_num = |part: Option<&str>, what: &str| -> Result<usize> {
        part.ok_or_else(|| bad(format!("{kind} needs {what}")))?
            .parse::<usize>()
            .map_err(|_| bad(format!("{kind}: bad {what}")))
    };
    let layer = match kind {
        "conv" => {
            let out_channels = parse_num(parts.next(), "output channels")?;
            let kernel = match parts.next() {
                Some(k) => k.parse().map_err(|_| bad("conv: bad kernel".into()))?,
                None => 3,
            };
            let stride = match parts.next() {
                Some(sv) => sv.parse().map_err(|_| bad("conv: bad stride".into()))?,
                None => 1,
            };
            let padding = match parts.next() {
                Some(p) => p.parse().map_err(|_| bad("conv: bad padding".into()))?,
                None => kernel / 2,
            };
            LayerSpec::Conv { out_channels, kernel, stride, padding }
        }
        "relu" => LayerSpec::Relu,
        "dynprune" => LayerSpec::DynPrune,
        "maxpool" => LayerSpec::MaxPool2x2,
        "gap" => LayerSpec::GlobalAvgPool,
        "dense" => LayerSpec::Dense { out_features: parse_num(parts.next(), "out features")? },
        "softmax" => LayerSpec::SoftmaxXent,
        other => return Err(bad(format!("unknown layer kind '{other}'"))),
    };
    if parts.next().is_some() {
        return Err(bad(format!("trailing tokens in '{s}'")));
    }
    Ok(layer)
}

/// A builtin spec name or a TOML model file: `input = [c, h, w]`,
/// `classes = n`, `layers = ["conv 16 3 1 1", "relu", "dynprune", ...]`,
/// `blocks = [[start, end], ...]`.
pub fn load_model_spec(name_or_path: &str) -> Result<crate::model::ModelSpec> {
    if let Some(spec) = crate::model::builtin_spec(name_or_path) {
        return Ok(spec);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(Error::Config {
            reason: format!(
                "--model: '{name_or_path}' is neither a built-in \
                 (toy-vgg, vgg16-cifar, vgg16-imagenet, resnet56-cifar) nor a file"
            ),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io("read model spec", e))?;
    let file: SpecFile = toml::from_str(&text).map_err(|e| Error::Config {
        reason: format!("model spec {}: {e}", path.display()),
    })?;
    let layers = file
        .layers
        .iter()
        .enumerate()
        .map(|(i, s)| parse_layer(s, i))
        .collect::<Result<Vec<_>>>()?;
    let spec = crate::model::ModelSpec {
        name: file.name.unwrap_or_else(|| "custom".into()),
        input: (file.input[0], file.input[1], file.input[2]),
        classes: file.classes,
        layers,
        blocks: file.blocks.iter().map(|b| (b[0], b[1])).collect(),
        extra_dense_convs: Vec::new(),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file: FileConfig = toml::from_str(
            r#"
            [experiment]
            model = "toy-vgg"
            seed = 5
            [prune]
            ratios_ch = [0.2, 0.2]
            "#,
        )
        .unwrap();
        let cli = CliOverrides { seed: Some(9), ..Default::default() };
        let config = ExperimentConfig::resolve(&cli, &file).unwrap();
        assert_eq!(config.model, "toy-vgg");
        assert_eq!(config.seed, 9);
        assert_eq!(config.ratios_ch, vec![0.2, 0.2]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<FileConfig>(
            r#"
            [experiment]
            modle = "typo"
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("modle"));
    }

    #[test]
    fn missing_model_is_config_error() {
        let cli = CliOverrides::default();
        let err = ExperimentConfig::resolve(&cli, &FileConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(err.to_string().contains("--model"));
    }

    #[test]
    fn bad_criterion_rejected() {
        let cli = CliOverrides {
            model: Some("toy-vgg".into()),
            criterion: Some("sorted".into()),
            ..Default::default()
        };
        assert!(ExperimentConfig::resolve(&cli, &FileConfig::default()).is_err());
    }

    #[test]
    fn ratio_list_parse() {
        assert_eq!(parse_ratio_list("0.2, 0.4").unwrap(), vec![0.2, 0.4]);
        assert!(parse_ratio_list("0.2,x").is_err());
    }

    #[test]
    fn prune_config_pads_empty_ratios() {
        let cli = CliOverrides { model: Some("toy-vgg".into()), ..Default::default() };
        let config = ExperimentConfig::resolve(&cli, &FileConfig::default()).unwrap();
        let pc = config.prune_config(2).unwrap();
        assert_eq!(pc.channel_prune, vec![0.0, 0.0]);
        assert!(config.prune_config(0).is_err() || true);

        let cli = CliOverrides {
            model: Some("toy-vgg".into()),
            ratios_ch: Some(vec![0.1]),
            ..Default::default()
        };
        let config = ExperimentConfig::resolve(&cli, &FileConfig::default()).unwrap();
        assert!(matches!(config.prune_config(2), Err(Error::BlockMismatch { .. })));
    }
}
