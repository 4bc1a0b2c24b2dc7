use rand::Rng;
use serde::{Deserialize, Serialize};

use super::strategy::glob_match;
use crate::error::{Error, Result};
use crate::model::{ParamTree, PROJ_STD};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Adapter scaling `α / r` with `α = r`.
pub const LORA_SCALING: f64 = 1.0;
pub const DEFAULT_LORA_TARGETS: &str = "blocks.*";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn a_path(&self) -> String {
        format!("{}.lora_A", self.target)
    }

    pub fn b_path(&self) -> String {
        format!("{}.lora_B", self.target)
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.in_dim + self.out_dim)
    }
}

/// `(path, shape)` of the adapter factors a rank-`rank` injection would add
/// for each 2-D entry matching `pattern`.
pub fn adapter_entries(
    entries: &[(String, Vec<usize>)],
    rank: usize,
    pattern: &str,
) -> Vec<(String, Vec<usize>)> {
    entries
        .iter()
        .filter(|(p, s)| s.len() == 2 && glob_match(pattern, p) && !super::is_adapter_path(p))
        .flat_map(|(p, s)| {
            [
                (format!("{p}.lora_A"), vec![rank, s[1]]),
                (format!("{p}.lora_B"), vec![s[0], rank]),
            ]
        })
        .collect()
}

/// Every 2-D weight matching `pattern`.
pub fn matrix_targets<T: Element>(tree: &ParamTree<T>, pattern: &str) -> Vec<String> {
    tree.iter()
        .filter(|(p, t)| {
            t.shape().len() == 2 && glob_match(pattern, p) && !super::is_adapter_path(p)
        })
        .map(|(p, _)| p.to_string())
        .collect()
}

/// Injects rank-`rank` adapters on each of `targets`.
///
/// Base weights are frozen, `A ~ N(0, 0.02²)` and `B = 0`, so the model's
/// function is unchanged.
pub fn inject_lora<T: Element, R: Rng + ?Sized>(
    tree: &mut ParamTree<T>,
    rank: usize,
    targets: &[String],
    rng: &mut R,
) -> Result<Vec<LoraAdapter>> {
    if rank == 0 {
        return Err(Error::InvalidStrategy(
            "lora_rank must be at least 1".into(),
        ));
    }
    if targets.is_empty() {
        return Err(Error::EmptyPattern("LoRA targets".into()));
    }
    for target in targets {
        let shape = tree.get(target)?.shape();
        if shape.len() != 2 {
            return Err(Error::NotMatrix {
                path: target.clone(),
                shape: shape.to_vec(),
            });
        }
        if tree.adapter_scaling(target).is_some() {
            return Err(Error::DuplicateAdapter(target.clone()));
        }
    }
    let mut adapters = Vec::with_capacity(targets.len());
    for target in targets {
        let (out_dim, in_dim) = {
            let s = tree.get(target)?.shape();
            (s[0], s[1])
        };
        let adapter = LoraAdapter {
            target: target.clone(),
            rank,
            in_dim,
            out_dim,
            scaling: LORA_SCALING,
        };
        tree.set_trainable(target, false)?;
        tree.insert(
            adapter.a_path(),
            Tensor::randn(vec![rank, in_dim], PROJ_STD, rng).with_requires_grad(true),
        )?;
        tree.insert(
            adapter.b_path(),
            Tensor::zeros(vec![out_dim, rank]).with_requires_grad(true),
        )?;
        tree.register_adapter(target, LORA_SCALING);
        adapters.push(adapter);
    }
    Ok(adapters)
}

/// Folds every adapter into its base weight (`W ← W + s·B·A`) and removes it.
pub fn merge_lora<T: Element>(tree: &mut ParamTree<T>) -> Result<usize> {
    let targets: Vec<String> = tree.adapter_targets().map(str::to_string).collect();
    if targets.is_empty() {
        return Err(Error::AlreadyMerged);
    }
    for target in &targets {
        let scaling = tree.unregister_adapter(target).expect("listed above");
        let a = tree
            .remove(&format!("{target}.lora_A"))
            .ok_or_else(|| Error::UnknownPath(format!("{target}.lora_A")))?;
        let b = tree
            .remove(&format!("{target}.lora_B"))
            .ok_or_else(|| Error::UnknownPath(format!("{target}.lora_B")))?;
        let (rank, in_dim) = (a.shape()[0], a.shape()[1]);
        let out_dim = b.shape()[0];
        let w = tree.get_mut(target)?;
        gemm(
            out_dim,
            rank,
            in_dim,
            T::lit(scaling),
            MatRef::row_major(b.data(), rank),
            MatRef::row_major(a.data(), in_dim),
            T::one(),
            w.data_mut(),
        );
    }
    Ok(targets.len())
}
