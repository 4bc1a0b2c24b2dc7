use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Inputs, Model};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over batch and sequence positions.
    #[default]
    Mean,
    /// Mean over the batch of the final position only.
    LastToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeInfo {
    pub dataset: String,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub matrix: Vec<Vec<f64>>,
    /// Mean of the strict upper triangle.
    pub average: f64,
    pub probe: ProbeInfo,
}

impl SimilarityReport {
    pub fn layers(&self) -> usize {
        self.matrix.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.matrix {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// One `d_model` vector per layer from `[batch, seq, d]` outputs.
pub fn pool_layer_outputs<T: Element>(
    outputs: &[Tensor<T>],
    pooling: Pooling,
) -> Result<Vec<Vec<f64>>> {
    outputs
        .iter()
        .map(|t| {
            let &[batch, seq, d] = t.shape() else {
                return Err(Error::InvalidConfig(format!(
                    "layer output must be 3-D, got {:?}",
                    t.shape()
                )));
            };
            let mut acc = vec![0.0; d];
            let mut count = 0usize;
            for (r, row) in t.data().chunks(d).enumerate() {
                if pooling == Pooling::LastToken && r % seq != seq - 1 {
                    continue;
                }
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
                count += 1;
            }
            debug_assert!(
                count
                    == if pooling == Pooling::Mean {
                        batch * seq
                    } else {
                        batch
                    }
            );
            Ok(acc.into_iter().map(|a| a / count as f64).collect())
        })
        .collect()
}

/// Pairwise cosine similarities; zero-norm representations are rejected.
pub fn cosine_matrix(reps: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let norms: Vec<f64> = reps
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(Error::ZeroNormRepresentation(i));
    }
    let l = reps.len();
    let mut m = vec![vec![0.0; l]; l];
    for i in 0..l {
        m[i][i] = 1.0;
        for j in i + 1..l {
            let dot: f64 = reps[i].iter().zip(&reps[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

fn upper_mean(m: &[Vec<f64>]) -> f64 {
    let l = m.len();
    let pairs = l * l.saturating_sub(1) / 2;
    if pairs == 0 {
        return 1.0;
    }
    (0..l)
        .flat_map(|i| (i + 1..l).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j])
        .sum::<f64>()
        / pairs as f64
}

impl SimilarityReport {
    pub fn from_representations(reps: &[Vec<f64>], probe: ProbeInfo) -> Result<Self> {
        if reps.is_empty() {
            return Err(Error::Empty("layer representations"));
        }
        let matrix = cosine_matrix(reps)?;
        let average = upper_mean(&matrix);
        Ok(SimilarityReport {
            matrix,
            average,
            probe,
        })
    }
}

/// Similarity of pooled block outputs of `model` on a probe batch.
pub fn layer_similarity<T: Element>(
    model: &Model<T>,
    inputs: Inputs<'_, T>,
    pooling: Pooling,
    probe: ProbeInfo,
) -> Result<SimilarityReport> {
    if inputs.tokens.is_empty() || inputs.batch == 0 {
        return Err(Error::Empty("probe batch"));
    }
    let outputs = model.capture_layer_outputs(inputs)?;
    SimilarityReport::from_representations(&pool_layer_outputs(&outputs, pooling)?, probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityComparison {
    pub reference: String,
    pub other: String,
    pub reference_average: f64,
    pub other_average: f64,
    /// `(reference − other) / reference`.
    pub relative_difference: f64,
}

/// Relative difference of averages for every ordered pair `(i < j)`.
pub fn compare_similarity(
    runs: &[(String, SimilarityReport)],
) -> Result<Vec<SimilarityComparison>> {
    let mut rows = Vec::new();
    for (i, (name_a, a)) in runs.iter().enumerate() {
        for (name_b, b) in &runs[i + 1..] {
            if a.layers() != b.layers() {
                return Err(Error::LayerCountMismatch(a.layers(), b.layers()));
            }
            rows.push(SimilarityComparison {
                reference: name_a.clone(),
                other: name_b.clone(),
                reference_average: a.average,
                other_average: b.average,
                relative_difference: (a.average - b.average) / a.average,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Table5Row {
    pub model: &'static str,
    pub layernorm: f64,
    pub finetune: f64,
}

impl Table5Row {
    pub fn relative_drop(&self) -> f64 {
        (self.finetune - self.layernorm) / self.finetune
    }
}

/// Published average layer similarities of three 7B multimodal models.
pub fn table5_rows() -> [Table5Row; 3] {
    [
        Table5Row {
            model: "MM-Vicuna",
            layernorm: 0.585,
            finetune: 0.624,
        },
        Table5Row {
            model: "MM-LLaMA2",
            layernorm: 0.504,
            finetune: 0.591,
        },
        Table5Row {
            model: "MM-LLaMA2-chat",
            layernorm: 0.550,
            finetune: 0.617,
        },
    ]
}
