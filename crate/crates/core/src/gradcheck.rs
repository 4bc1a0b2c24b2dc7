//! Central finite-difference checks for recorded ops.
//!
//! The numeric side only ever runs ops forward, so it stays independent of
//! the backward kernels it is checking.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Op, OpKind, Tape};
use crate::error::Result;
use crate::tensor::{numel, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// One op invocation to check.
#[derive(Clone, Debug)]
pub struct OpCase {
    pub op: Op,
    pub inputs: Vec<Tensor<f64>>,
    /// Which inputs to differentiate (index tensors never are).
    pub differentiable: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub kind: OpKind,
    /// Worst `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)` over inputs.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

fn randn<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Scalar probe `Σ w ⊙ op(inputs)`, evaluated forward only.
fn probe(op: &Op, inputs: &[Tensor<f64>], weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = tape.apply(op.clone(), &vars)?;
    Ok(tape
        .value(out)
        .iter()
        .zip(weights)
        .map(|(a, b)| a * b)
        .sum())
}

fn numeric_grad(
    op: &Op,
    inputs: &[Tensor<f64>],
    weights: &[f64],
    which: usize,
    step: f64,
) -> Result<Vec<f64>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let n = work[which].numel();
    let mut grad = Vec::with_capacity(n);
    for j in 0..n {
        let orig = work[which].data()[j];
        work[which].data_mut()[j] = orig + step;
        let plus = probe(op, &work, weights)?;
        work[which].data_mut()[j] = orig - step;
        let minus = probe(op, &work, weights)?;
        work[which].data_mut()[j] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

fn analytic_grads(case: &OpCase, weights: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    let mut tape = Tape::new();
    let vars: Vec<_> = case
        .inputs
        .iter()
        .zip(&case.differentiable)
        .map(|(t, &d)| tape.leaf(&t.clone().with_requires_grad(d)))
        .collect();
    let out = tape.apply(case.op.clone(), &vars)?;
    let w = tape.constant(tape.shape(out).to_vec(), weights.to_vec())?;
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod, None)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
        .collect())
}

fn output_len(case: &OpCase) -> Result<usize> {
    let mut tape = Tape::new();
    let vars: Vec<_> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = tape.apply(case.op.clone(), &vars)?;
    Ok(numel(tape.shape(out)))
}

pub fn check_case<R: Rng + ?Sized>(case: &OpCase, step: f64, rng: &mut R) -> Result<GradCheck> {
    let weights: Vec<f64> = (0..output_len(case)?)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let analytic = analytic_grads(case, &weights)?;
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        if !case.differentiable[i] {
            continue;
        }
        let numeric = numeric_grad(&case.op, &case.inputs, &weights, i, step)?;
        let zeros = vec![0.0; numeric.len()];
        let a = a.as_deref().unwrap_or(&zeros);
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = a
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        max_abs = max_abs.max(diff);
        if scale > 0.0 {
            max_rel = max_rel.max(diff / scale);
        }
    }
    Ok(GradCheck {
        kind: case.op.kind(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
    })
}

/// Randomized invocations of `kind` over small (about 8-element) inputs,
/// covering each of its attribute variants.
pub fn random_cases<R: Rng + ?Sized>(kind: OpKind, rng: &mut R) -> Vec<OpCase> {
    let case = |op: Op, inputs: Vec<Tensor<f64>>, differentiable: Vec<bool>| OpCase {
        op,
        inputs,
        differentiable,
    };
    match kind {
        OpKind::Leaf => Vec::new(),
        OpKind::MatMul => vec![
            case(
                Op::MatMul { trans_b: false },
                vec![randn(vec![2, 4], rng), randn(vec![4, 2], rng)],
                vec![true, true],
            ),
            case(
                Op::MatMul { trans_b: true },
                vec![randn(vec![2, 4], rng), randn(vec![2, 4], rng)],
                vec![true, true],
            ),
            case(
                Op::MatMul { trans_b: false },
                vec![randn(vec![2, 2, 2], rng), randn(vec![2, 2], rng)],
                vec![true, true],
            ),
            case(
                Op::MatMul { trans_b: true },
                vec![randn(vec![2, 2, 2], rng), randn(vec![2, 2, 2], rng)],
                vec![true, true],
            ),
        ],
        OpKind::Add | OpKind::Mul => {
            let op = if kind == OpKind::Add {
                Op::Add
            } else {
                Op::Mul
            };
            vec![
                case(
                    op.clone(),
                    vec![randn(vec![8], rng), randn(vec![8], rng)],
                    vec![true, true],
                ),
                case(
                    op.clone(),
                    vec![randn(vec![2, 4], rng), randn(vec![4], rng)],
                    vec![true, true],
                ),
                case(
                    op,
                    vec![randn(vec![8], rng), randn(vec![], rng)],
                    vec![true, true],
                ),
            ]
        }
        OpKind::EmbedLookup => {
            let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
            vec![case(
                Op::EmbedLookup {
                    ids,
                    batch_shape: vec![2, 3],
                },
                vec![randn(vec![4, 2], rng)],
                vec![true],
            )]
        }
        OpKind::Softmax => vec![
            case(
                Op::Softmax { causal: false },
                vec![randn(vec![2, 4], rng)],
                vec![true],
            ),
            case(
                Op::Softmax { causal: true },
                vec![randn(vec![2, 2, 2], rng)],
                vec![true],
            ),
            case(
                Op::Softmax { causal: true },
                vec![randn(vec![3, 3], rng)],
                vec![true],
            ),
        ],
        OpKind::Silu => vec![case(Op::Silu, vec![randn(vec![8], rng)], vec![true])],
        OpKind::LayerNorm => [0.0, 1e-5]
            .into_iter()
            .map(|eps| {
                case(
                    Op::LayerNorm { eps },
                    vec![
                        randn(vec![2, 4], rng),
                        randn(vec![4], rng),
                        randn(vec![4], rng),
                    ],
                    vec![true, true, true],
                )
            })
            .collect(),
        OpKind::RmsNorm => [0.0, 1e-5]
            .into_iter()
            .map(|eps| {
                case(
                    Op::RmsNorm { eps },
                    vec![randn(vec![2, 4], rng), randn(vec![4], rng)],
                    vec![true, true],
                )
            })
            .collect(),
        OpKind::CrossEntropy => {
            let t0 = rng.random_range(0..4);
            let t1 = rng.random_range(0..4);
            vec![
                case(
                    Op::CrossEntropy {
                        targets: vec![Some(t0), Some(t1)],
                    },
                    vec![randn(vec![2, 4], rng)],
                    vec![true],
                ),
                case(
                    Op::CrossEntropy {
                        targets: vec![None, Some(t1)],
                    },
                    vec![randn(vec![2, 4], rng)],
                    vec![true],
                ),
            ]
        }
        OpKind::Transpose => vec![
            case(
                Op::Transpose { perm: vec![1, 0] },
                vec![randn(vec![2, 4], rng)],
                vec![true],
            ),
            case(
                Op::Transpose {
                    perm: vec![2, 0, 1],
                },
                vec![randn(vec![2, 2, 2], rng)],
                vec![true],
            ),
            case(
                Op::Transpose {
                    perm: vec![1, 0, 2],
                },
                vec![randn(vec![2, 2, 2], rng)],
                vec![true],
            ),
        ],
        OpKind::Reshape => vec![case(
            Op::Reshape { shape: vec![4, 2] },
            vec![randn(vec![2, 4], rng)],
            vec![true],
        )],
        OpKind::Mean | OpKind::Sum => [None, Some(0), Some(1)]
            .into_iter()
            .map(|axis| {
                let op = if kind == OpKind::Mean {
                    Op::Mean { axis }
                } else {
                    Op::Sum { axis }
                };
                case(op, vec![randn(vec![2, 4], rng)], vec![true])
            })
            .collect(),
        OpKind::Concat => vec![
            case(
                Op::Concat { axis: 0 },
                vec![randn(vec![2, 2], rng), randn(vec![1, 2], rng)],
                vec![true, true],
            ),
            case(
                Op::Concat { axis: 1 },
                vec![randn(vec![2, 1, 2], rng), randn(vec![2, 3, 2], rng)],
                vec![true, true],
            ),
        ],
    }
}

/// Worst relative error over all cases of `kind` for one RNG draw.
pub fn check_kind<R: Rng + ?Sized>(kind: OpKind, step: f64, rng: &mut R) -> Result<GradCheck> {
    let mut worst = GradCheck {
        kind,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for case in random_cases(kind, rng) {
        let r = check_case(&case, step, rng)?;
        worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
        worst.max_abs_error = worst.max_abs_error.max(r.max_abs_error);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_kind_has_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in OpKind::RECORDED {
            assert!(!random_cases(kind, &mut rng).is_empty(), "{kind}");
        }
    }

    #[test]
    fn every_kind_passes_one_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in OpKind::RECORDED {
            let r = check_kind(kind, DEFAULT_STEP, &mut rng).unwrap();
            assert!(r.max_rel_error <= 1e-5, "{kind}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Silu gradient checked against a probe of a *different* op must disagree.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(vec![8], &mut rng);
        let w: Vec<f64> = vec![1.0; 8];
        let numeric =
            numeric_grad(&Op::Silu, std::slice::from_ref(&x), &w, 0, DEFAULT_STEP).unwrap();
        let wrong: Vec<f64> = x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let diff = numeric
            .iter()
            .zip(&wrong)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-3);
    }
}
