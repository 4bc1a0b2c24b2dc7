use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamTree;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "finetune")]
    Finetune,
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "attn-qv")]
    AttnQv,
    #[serde(rename = "attn-mlp")]
    AttnMlp,
    #[serde(rename = "layernorm")]
    LayerNorm,
    #[serde(rename = "layernorm-simple")]
    LayerNormSimple,
    /// Nothing in the LLM trains; with `connector = Some(true)` this is the
    /// connector-only configuration.
    #[serde(rename = "frozen")]
    Frozen,
}

impl StrategyKind {
    pub const PAPER: [StrategyKind; 6] = [
        StrategyKind::Finetune,
        StrategyKind::Lora,
        StrategyKind::AttnQv,
        StrategyKind::AttnMlp,
        StrategyKind::LayerNorm,
        StrategyKind::LayerNormSimple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Finetune => "finetune",
            StrategyKind::Lora => "lora",
            StrategyKind::AttnQv => "attn-qv",
            StrategyKind::AttnMlp => "attn-mlp",
            StrategyKind::LayerNorm => "layernorm",
            StrategyKind::LayerNormSimple => "layernorm-simple",
            StrategyKind::Frozen => "frozen",
        }
    }

    /// Patterns that must each match at least one parameter.
    pub fn patterns(self) -> &'static [&'static str] {
        match self {
            StrategyKind::Finetune => &["*"],
            StrategyKind::Lora => &["*.lora_A", "*.lora_B"],
            StrategyKind::AttnQv => &["blocks.*.attn.q_proj.weight", "blocks.*.attn.v_proj.weight"],
            StrategyKind::AttnMlp => &["blocks.*.mlp.*"],
            StrategyKind::LayerNorm | StrategyKind::LayerNormSimple => &[
                "blocks.*.input_norm.*",
                "blocks.*.post_norm.*",
                "final_norm.*",
            ],
            StrategyKind::Frozen => &[],
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [StrategyKind::Frozen]
            .into_iter()
            .chain(StrategyKind::PAPER)
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidStrategy(format!("unknown strategy `{s}`")))
    }
}

/// Parameters activated alongside a strategy when `include_defaults` holds.
pub const DEFAULT_PATTERNS: [&str; 4] =
    ["connector.*", "embed.weight", "head.weight", "pos.weight"];
pub const CONNECTOR_PATTERN: &str = "connector.*";
pub const DEFAULT_LORA_RANK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningStrategy {
    pub kind: StrategyKind,
    pub lora_rank: usize,
    pub include_defaults: bool,
    /// Overrides the connector's trainability after defaults are applied.
    #[serde(default)]
    pub connector: Option<bool>,
}

impl TuningStrategy {
    /// Defaults on for every kind except `layernorm-simple` and `frozen`.
    pub fn new(kind: StrategyKind) -> Self {
        let include_defaults =
            !matches!(kind, StrategyKind::LayerNormSimple | StrategyKind::Frozen);
        TuningStrategy {
            kind,
            lora_rank: DEFAULT_LORA_RANK,
            include_defaults,
            connector: None,
        }
    }

    pub fn with_defaults(mut self, include: bool) -> Self {
        self.include_defaults = include;
        self
    }

    pub fn with_connector(mut self, connector: Option<bool>) -> Self {
        self.connector = connector;
        self
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.lora_rank = rank;
        self
    }

    /// LayerNorm plus the default-activated elements.
    pub fn layernorm_with_connector() -> Self {
        Self::new(StrategyKind::LayerNorm)
    }

    /// Only the connector trains.
    pub fn connector_only() -> Self {
        Self::new(StrategyKind::Frozen).with_connector(Some(true))
    }

    /// LayerNorm with embedding and head but a frozen connector.
    pub fn layernorm_only() -> Self {
        Self::new(StrategyKind::LayerNorm).with_connector(Some(false))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == StrategyKind::Lora && self.lora_rank == 0 {
            return Err(Error::InvalidStrategy(
                "lora_rank must be at least 1".into(),
            ));
        }
        if self.kind == StrategyKind::LayerNormSimple
            && (self.include_defaults || self.connector == Some(true))
        {
            return Err(Error::InvalidStrategy(
                "layernorm-simple keeps connector, embedding and head frozen".into(),
            ));
        }
        Ok(())
    }

    /// Short label distinguishing connector overrides, e.g. `layernorm-connector`.
    pub fn label(&self) -> String {
        match (self.kind, self.connector) {
            (StrategyKind::Frozen, Some(true)) => "connector-only".into(),
            (StrategyKind::LayerNorm, Some(false)) => "layernorm-only".into(),
            (k, _) => k.name().into(),
        }
    }
}

impl std::str::FromStr for TuningStrategy {
    type Err = Error;

    /// A kind name or one of the labels `connector-only`, `layernorm-only`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "connector-only" => Ok(Self::connector_only()),
            "layernorm-only" => Ok(Self::layernorm_only()),
            other => Ok(Self::new(other.parse()?)),
        }
    }
}

/// Glob match where `*` stands for one or more arbitrary characters.
pub fn glob_match(pattern: &str, path: &str) -> bool {
    fn go(p: &[u8], s: &[u8]) -> bool {
        match p.split_first() {
            None => s.is_empty(),
            Some((b'*', rest)) => (1..=s.len()).any(|i| go(rest, &s[i..])),
            Some((c, rest)) => s.first() == Some(c) && go(rest, &s[1..]),
        }
    }
    go(pattern.as_bytes(), path.as_bytes())
}

pub fn is_adapter_path(path: &str) -> bool {
    path.ends_with(".lora_A") || path.ends_with(".lora_B")
}

/// Frozen vision-encoder entries, present only in budget inventories.
pub fn is_vision_path(path: &str) -> bool {
    path == "vision" || path.starts_with("vision.")
}

/// Paths selected by `strategy` out of `paths`, in input order.
pub fn select_paths<'a, I>(strategy: &TuningStrategy, paths: I) -> Result<Vec<String>>
where
    I: IntoIterator<Item = &'a str>,
{
    strategy.validate()?;
    let paths: Vec<&str> = paths.into_iter().filter(|p| !is_vision_path(p)).collect();
    let mut chosen: HashSet<&str> = HashSet::new();
    for &pattern in strategy.kind.patterns() {
        let wants_adapters = is_adapter_path(pattern);
        let hits: Vec<&str> = paths
            .iter()
            .copied()
            .filter(|p| is_adapter_path(p) == wants_adapters && glob_match(pattern, p))
            .collect();
        if hits.is_empty() {
            return Err(Error::EmptyPattern(pattern.to_string()));
        }
        chosen.extend(hits);
    }
    let base = paths.iter().copied().filter(|p| !is_adapter_path(p));
    if strategy.include_defaults {
        chosen.extend(
            base.clone()
                .filter(|p| DEFAULT_PATTERNS.iter().any(|d| glob_match(d, p))),
        );
    }
    match strategy.connector {
        Some(true) => chosen.extend(base.filter(|p| glob_match(CONNECTOR_PATTERN, p))),
        Some(false) => chosen.retain(|p| !glob_match(CONNECTOR_PATTERN, p)),
        None => {}
    }
    Ok(paths
        .into_iter()
        .filter(|p| chosen.contains(p))
        .map(str::to_string)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub strategy: String,
    pub selected: Vec<String>,
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

impl SelectionReport {
    /// Recounts trainable scalars from the path list alone.
    pub fn recount<T: Element>(&self, tree: &ParamTree<T>) -> Result<usize> {
        self.selected
            .iter()
            .map(|p| tree.get(p).map(|t| t.numel()))
            .sum()
    }
}

/// Sets trainability flags on `tree` according to `strategy`.
///
/// LoRA strategies need their adapters injected beforehand.
pub fn select_trainable<T: Element>(
    strategy: &TuningStrategy,
    tree: &mut ParamTree<T>,
) -> Result<SelectionReport> {
    let selected = select_paths(strategy, tree.paths())?;
    tree.freeze_all();
    for p in &selected {
        tree.set_trainable(p, true)?;
    }
    let (trainable, total) = (tree.trainable_count(), tree.total_count());
    Ok(SelectionReport {
        strategy: strategy.label(),
        selected,
        trainable,
        total,
        fraction: trainable as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_semantics() {
        assert!(glob_match("blocks.*.mlp.*", "blocks.12.mlp.fc1.weight"));
        assert!(!glob_match("blocks.*.mlp.*", "blocks.1.mlp."));
        assert!(glob_match("*.lora_A", "blocks.0.attn.q_proj.weight.lora_A"));
        assert!(!glob_match("final_norm.*", "final_norm"));
        assert!(glob_match("embed.weight", "embed.weight"));
    }

    #[test]
    fn names_round_trip() {
        for k in StrategyKind::PAPER {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("lorax".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn simple_rejects_defaults() {
        let s = TuningStrategy::new(StrategyKind::LayerNormSimple).with_defaults(true);
        assert!(s.validate().is_err());
        assert!(TuningStrategy::new(StrategyKind::Lora)
            .with_rank(0)
            .validate()
            .is_err());
    }

    #[test]
    fn empty_pattern_is_an_error() {
        let paths = ["embed.weight", "head.weight"];
        let err = select_paths(&TuningStrategy::new(StrategyKind::AttnQv), paths).unwrap_err();
        assert!(matches!(err, Error::EmptyPattern(p) if p.contains("q_proj")));
    }
}
