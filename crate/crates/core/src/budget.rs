//! Analytic trainable-parameter and optimizer-state accounting.
//!
//! Counts come from the same path selection rules the trainer uses, applied
//! to a `(path, shape)` inventory; no tensors are allocated.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MlpKind, ModelConfig, NormKind};
use crate::peft::{
    adapter_entries, select_paths, StrategyKind, TuningStrategy, DEFAULT_LORA_TARGETS,
};

/// Path of the frozen image encoder in budget inventories.
pub const VISION_PATH: &str = "vision.encoder";
pub const CLIP_VIT_L_PARAMS: usize = 303_500_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchPreset {
    pub name: String,
    pub llm: ModelConfig,
    /// Frozen vision-encoder parameter count; never trainable.
    pub vision_params: usize,
}

fn llama(name: &str, n_layers: usize, d_model: usize, n_heads: usize, d_ff: usize) -> ArchPreset {
    ArchPreset {
        name: name.into(),
        llm: ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            vocab_size: 32_000,
            max_seq: 2048,
            norm_kind: NormKind::Rms,
            mlp_kind: MlpKind::Gated,
            n_visual_tokens: 256,
            d_visual: 1024,
            tie_embeddings: false,
            learned_positions: false,
            norm_eps: 1e-6,
        },
        vision_params: CLIP_VIT_L_PARAMS,
    }
}

impl ArchPreset {
    pub fn llama7b() -> Self {
        llama("llama7b", 32, 4096, 32, 11008)
    }

    pub fn llama13b() -> Self {
        llama("llama13b", 40, 5120, 40, 13824)
    }

    /// A preset mirroring a toy model config, optionally with a frozen
    /// vision encoder of `vision_params` scalars.
    pub fn from_config(name: &str, llm: ModelConfig, vision_params: usize) -> Self {
        ArchPreset {
            name: name.into(),
            llm,
            vision_params,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "llama7b" => Ok(Self::llama7b()),
            "llama13b" => Ok(Self::llama13b()),
            other => ModelConfig::by_name(other)
                .map(|cfg| Self::from_config(other, cfg, 0))
                .map_err(|_| Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.llm.validate()
    }

    /// `(path, shape)` of every parameter, including the vision encoder and,
    /// for LoRA, the adapters a default injection would add.
    pub fn inventory(&self, strategy: &TuningStrategy) -> Vec<(String, Vec<usize>)> {
        let mut entries: Vec<(String, Vec<usize>)> = self
            .llm
            .inventory()
            .into_iter()
            .map(|s| (s.path, s.shape))
            .collect();
        if self.vision_params > 0 {
            entries.push((VISION_PATH.into(), vec![self.vision_params]));
        }
        if strategy.kind == StrategyKind::Lora {
            let adapters = adapter_entries(&entries, strategy.lora_rank, DEFAULT_LORA_TARGETS);
            entries.extend(adapters);
        }
        entries
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub preset: String,
    pub strategy: String,
    pub trainable: usize,
    pub total: usize,
    pub percentage: f64,
    pub bytes_per_param: usize,
    /// `trainable × bytes × 3` (gradient plus two Adam moments).
    pub optimizer_state_bytes: u64,
}

pub const OPTIMIZER_BUFFERS: u64 = 3;

pub fn optimizer_state_bytes(trainable: usize, bytes_per_param: usize) -> u64 {
    trainable as u64 * bytes_per_param as u64 * OPTIMIZER_BUFFERS
}

pub fn count(
    preset: &ArchPreset,
    strategy: &TuningStrategy,
    bytes_per_param: usize,
) -> Result<BudgetReport> {
    preset.validate()?;
    let entries = preset.inventory(strategy);
    let selected: HashSet<String> =
        select_paths(strategy, entries.iter().map(|(p, _)| p.as_str()))?
            .into_iter()
            .collect();
    let size = |shape: &[usize]| shape.iter().product::<usize>();
    let total: usize = entries.iter().map(|(_, s)| size(s)).sum();
    let trainable: usize = entries
        .iter()
        .filter(|(p, _)| selected.contains(p))
        .map(|(_, s)| size(s))
        .sum();
    Ok(BudgetReport {
        preset: preset.name.clone(),
        strategy: strategy.label(),
        trainable,
        total,
        percentage: 100.0 * trainable as f64 / total as f64,
        bytes_per_param,
        optimizer_state_bytes: optimizer_state_bytes(trainable, bytes_per_param),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Cell {
    pub preset: String,
    pub strategy: String,
    pub computed: f64,
    pub paper: f64,
    pub abs_diff: f64,
    /// `None` for rows reported without a gate.
    pub tolerance: Option<f64>,
    pub flagged: bool,
}

/// Published trainable percentages `(7B, 13B)` per strategy.
pub fn table2_paper_values(kind: StrategyKind) -> (f64, f64) {
    match kind {
        StrategyKind::Finetune => (95.70, 97.72),
        StrategyKind::Lora => (5.92, 4.30),
        StrategyKind::AttnQv => (19.02, 18.24),
        StrategyKind::AttnMlp => (65.21, 66.24),
        StrategyKind::LayerNorm => (3.78, 2.50),
        StrategyKind::LayerNormSimple => (0.004, 0.003),
        StrategyKind::Frozen => (0.0, 0.0),
    }
}

pub fn table2_tolerance(kind: StrategyKind) -> Option<f64> {
    match kind {
        StrategyKind::Lora => None,
        StrategyKind::LayerNormSimple => Some(0.002),
        _ => Some(0.5),
    }
}

/// LoRA rows beyond this gap are flagged without failing.
pub const LORA_FLAG_THRESHOLD: f64 = 0.5;

/// All twelve `(preset, strategy)` cells against the published values.
pub fn table2_reproduction(presets: &[ArchPreset; 2]) -> Result<Vec<Table2Cell>> {
    let mut cells = Vec::with_capacity(12);
    for kind in StrategyKind::PAPER {
        for (idx, preset) in presets.iter().enumerate() {
            let report = count(preset, &TuningStrategy::new(kind), 2)?;
            let (p7, p13) = table2_paper_values(kind);
            let paper = if idx == 0 { p7 } else { p13 };
            let abs_diff = (report.percentage - paper).abs();
            let tolerance = table2_tolerance(kind);
            let flagged = abs_diff > tolerance.unwrap_or(LORA_FLAG_THRESHOLD);
            cells.push(Table2Cell {
                preset: preset.name.clone(),
                strategy: kind.name().into(),
                computed: report.percentage,
                paper,
                abs_diff,
                tolerance,
                flagged,
            });
        }
    }
    Ok(cells)
}

pub fn table2_csv(cells: &[Table2Cell]) -> String {
    let mut s = String::from("preset,strategy,computed_pct,paper_pct,abs_diff,tolerance,flagged\n");
    for c in cells {
        let tol = c.tolerance.map_or("none".to_string(), |t| t.to_string());
        s.push_str(&format!(
            "{},{},{:.5},{},{:.5},{},{}\n",
            c.preset, c.strategy, c.computed, c.paper, c.abs_diff, tol, c.flagged
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layernorm_simple_7b_is_exact() {
        let r = count(
            &ArchPreset::llama7b(),
            &TuningStrategy::new(StrategyKind::LayerNormSimple),
            2,
        )
        .unwrap();
        assert_eq!(r.trainable, 32 * 2 * 4096 + 4096);
        assert_eq!(r.optimizer_state_bytes, r.trainable as u64 * 6);
    }

    #[test]
    fn vision_is_never_selected() {
        let r = count(
            &ArchPreset::llama7b(),
            &TuningStrategy::new(StrategyKind::Finetune),
            2,
        )
        .unwrap();
        assert_eq!(r.total - r.trainable, CLIP_VIT_L_PARAMS);
    }

    #[test]
    fn unknown_preset() {
        assert!(ArchPreset::by_name("llama70b").is_err());
        assert_eq!(ArchPreset::by_name("toy").unwrap().vision_params, 0);
    }
}
