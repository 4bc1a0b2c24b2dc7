//! Flat `key = value` run configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. `preset` is applied
//! before every other key regardless of its position in the file.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::experiment::{grid_preset, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VisionMode};
use crate::peft::{StrategyKind, TuningStrategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub experiment: ExperimentConfig,
    /// Strategy of `train` and `sweep-lr`.
    pub strategy: TuningStrategy,
    /// Strategies of `compare`.
    pub strategies: Vec<TuningStrategy>,
    /// Stage-2 seed of `train` and `sweep-lr`.
    pub seed: u64,
    pub eval_interval: usize,
    pub grad_stats: bool,
    pub grid: Vec<f64>,
    pub outdir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "toy".into(),
            experiment: ExperimentConfig::toy(),
            strategy: TuningStrategy::new(StrategyKind::LayerNorm),
            strategies: StrategyKind::PAPER
                .into_iter()
                .map(TuningStrategy::new)
                .collect(),
            seed: 0,
            eval_interval: 0,
            grad_stats: false,
            grid: grid_preset("paper-grid").expect("built-in preset"),
            outdir: PathBuf::from("runs"),
        }
    }
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigParse {
        line,
        msg: msg.into(),
    }
}

fn num<V: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| err(line, format!("`{key}` expects a number, got `{v}`")))
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(
            line,
            format!("`{key}` expects true or false, got `{v}`"),
        )),
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Parses config text on top of [`RunConfig::default`].
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected `key = value`, got `{body}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err(line, "empty key"));
        }
        if entries.iter().any(|(_, seen, _)| seen == k) {
            return Err(err(line, format!("duplicate key `{k}`")));
        }
        entries.push((line, k.to_string(), v.to_string()));
    }

    let mut cfg = RunConfig::default();
    if let Some((line, _, v)) = entries.iter().find(|(_, k, _)| k == "preset") {
        cfg.experiment.model = ModelConfig::by_name(v).map_err(|e| err(*line, e.to_string()))?;
        cfg.preset = v.clone();
    }
    let mut lora_rank = None;
    let mut include_defaults = None;
    let mut connector = None;
    let mut lrs = BTreeMap::new();
    for (line, k, v) in &entries {
        let (line, k, v) = (*line, k.as_str(), v.as_str());
        let e = &mut cfg.experiment;
        match k {
            "preset" => {}
            "strategy" => cfg.strategy = v.parse().map_err(|x: Error| err(line, x.to_string()))?,
            "strategies" => {
                cfg.strategies = list(v)
                    .map(str::parse)
                    .collect::<Result<_>>()
                    .map_err(|x| err(line, x.to_string()))?;
                if cfg.strategies.is_empty() {
                    return Err(err(line, "`strategies` is empty"));
                }
            }
            "lr" => e.lr = num(line, k, v)?,
            "steps" => e.steps = num(line, k, v)?,
            "batch" => e.batch = num(line, k, v)?,
            "warmup_ratio" => e.warmup_ratio = num(line, k, v)?,
            "weight_decay" => e.weight_decay = num(line, k, v)?,
            "seed" => cfg.seed = num(line, k, v)?,
            "seeds" => {
                e.seeds = list(v).map(|s| num(line, k, s)).collect::<Result<_>>()?;
                if e.seeds.is_empty() {
                    return Err(err(line, "`seeds` is empty"));
                }
            }
            "base_seed" => e.base_seed = num(line, k, v)?,
            "mixture" => {
                let w: Vec<f64> = list(v).map(|s| num(line, k, s)).collect::<Result<_>>()?;
                let [a, b, c] = w[..] else {
                    return Err(err(
                        line,
                        format!("`mixture` needs three weights, got {}", w.len()),
                    ));
                };
                e.mixture = [a, b, c];
            }
            "norm_kind" => {
                e.model.norm_kind = v.parse().map_err(|x: Error| err(line, x.to_string()))?
            }
            "lora_rank" => lora_rank = Some(num(line, k, v)?),
            "include_defaults" => include_defaults = Some(boolean(line, k, v)?),
            "connector" => connector = Some(boolean(line, k, v)?),
            "outdir" => cfg.outdir = PathBuf::from(v),
            "eval_interval" => cfg.eval_interval = num(line, k, v)?,
            "grad_stats" => cfg.grad_stats = boolean(line, k, v)?,
            "grid" => {
                cfg.grid = match grid_preset(v) {
                    Ok(g) => g,
                    Err(_) => list(v).map(|s| num(line, k, s)).collect::<Result<_>>()?,
                };
                if cfg.grid.is_empty() {
                    return Err(err(line, "`grid` is empty"));
                }
            }
            "vision" => {
                e.vision = match v {
                    "aligned" => VisionMode::Aligned,
                    "unaligned" => VisionMode::Unaligned,
                    _ => return Err(err(line, format!("unknown vision mode `{v}`"))),
                }
            }
            "n_train" => e.n_train = num(line, k, v)?,
            "n_eval" => e.n_eval = num(line, k, v)?,
            "pretrain_steps" => e.pretrain_steps = num(line, k, v)?,
            "pretrain_lr" => e.pretrain_lr = num(line, k, v)?,
            "stage1_steps" => e.stage1_steps = num(line, k, v)?,
            "stage1_lr" => e.stage1_lr = num(line, k, v)?,
            _ => match k.strip_prefix("lr.") {
                Some(label) => {
                    label
                        .parse::<TuningStrategy>()
                        .map_err(|x| err(line, x.to_string()))?;
                    lrs.insert(label.to_string(), num(line, k, v)?);
                }
                None => return Err(err(line, format!("unknown key `{k}`"))),
            },
        }
    }
    cfg.experiment.lrs.extend(lrs);
    let overrides = |s: &mut TuningStrategy| {
        if let Some(r) = lora_rank {
            s.lora_rank = r;
        }
        if let Some(d) = include_defaults {
            s.include_defaults = d;
        }
        if connector.is_some() {
            s.connector = connector;
        }
    };
    overrides(&mut cfg.strategy);
    cfg.strategy.validate()?;
    for s in &mut cfg.strategies {
        if let Some(r) = lora_rank {
            s.lora_rank = r;
        }
    }
    if !(cfg.experiment.lr > 0.0) {
        return Err(Error::InvalidTrainConfig(format!(
            "lr {} must be positive",
            cfg.experiment.lr
        )));
    }
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_preset_first() {
        let text = "# comment\nnorm_kind = rms\npreset = mini\nstrategy = lora\nlora_rank = 4\nmixture = 0.2, 0.3, 0.5\n\
                    lr.layernorm = 3e-4\noutdir = out/x\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.experiment.model.d_model, ModelConfig::mini().d_model);
        assert_eq!(cfg.experiment.model.norm_kind, crate::model::NormKind::Rms);
        assert_eq!(
            (cfg.strategy.kind, cfg.strategy.lora_rank),
            (StrategyKind::Lora, 4)
        );
        assert_eq!(cfg.experiment.mixture, [0.2, 0.3, 0.5]);
        assert_eq!(cfg.experiment.lr_for("layernorm"), 3e-4);
        assert_eq!(cfg.outdir, PathBuf::from("out/x"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let line_of = |text: &str| match parse_config(text) {
            Err(Error::ConfigParse { line, .. }) => line,
            other => panic!("expected a parse error, got {other:?}"),
        };
        assert_eq!(line_of("steps = 3\nbogus = 1\n"), 2);
        assert_eq!(line_of("\nsteps = many\n"), 2);
        assert_eq!(line_of("steps\n"), 1);
        assert_eq!(line_of("seed = 1\nseed = 2\n"), 2);
        assert_eq!(line_of("mixture = 0.5, 0.5\n"), 1);
    }

    #[test]
    fn strategy_labels() {
        let cfg = parse_config("strategy = layernorm\nconnector = false\n").unwrap();
        assert_eq!(cfg.strategy.label(), "layernorm-only");
        assert!(parse_config("strategy = layernorm-simple\ninclude_defaults = true\n").is_err());
    }
}
