//! Tuning strategies as trainable-path selections, plus LoRA adapters.

mod lora;
mod strategy;

pub use lora::{
    adapter_entries, inject_lora, matrix_targets, merge_lora, LoraAdapter, DEFAULT_LORA_TARGETS,
    LORA_SCALING,
};
pub use strategy::{
    glob_match, is_adapter_path, is_vision_path, select_paths, select_trainable, SelectionReport,
    StrategyKind, TuningStrategy, CONNECTOR_PATTERN, DEFAULT_LORA_RANK, DEFAULT_PATTERNS,
};

use rand::Rng;

use crate::error::Result;
use crate::model::ParamTree;
use crate::tensor::Element;

/// Prepares `tree` for `strategy`: injects default LoRA adapters when the
/// strategy needs them, then sets trainability.
pub fn apply_strategy<T: Element, R: Rng + ?Sized>(
    strategy: &TuningStrategy,
    tree: &mut ParamTree<T>,
    rng: &mut R,
) -> Result<(SelectionReport, Vec<LoraAdapter>)> {
    strategy.validate()?;
    let adapters = if strategy.kind == StrategyKind::Lora && tree.adapter_targets().next().is_none()
    {
        let targets = matrix_targets(tree, DEFAULT_LORA_TARGETS);
        inject_lora(tree, strategy.lora_rank, &targets, rng)?
    } else {
        Vec::new()
    };
    Ok((select_trainable(strategy, tree)?, adapters))
}
