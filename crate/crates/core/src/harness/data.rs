//! Synthetic attribute-grounded tasks.
//!
//! Every sample owns a latent vector of `K` attributes with `M` values each.
//! `text-pretrain` samples state the latent in a text context before the
//! body; `mm-adapt` samples carry it only through visual features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const SEP: usize = 3;
    pub const Q: usize = 4;
    pub const USER: usize = 5;
    pub const ASSIST: usize = 6;
    pub const DESCRIBE: usize = 7;
    pub const COMPARE: usize = 8;
    pub const YES: usize = 9;
    pub const NO: usize = 10;
    pub const NAME_BASE: usize = 16;
    pub const VALUE_BASE: usize = 32;

    pub fn name(k: usize) -> usize {
        NAME_BASE + k
    }

    pub fn value(k: usize, v: usize, n_values: usize) -> usize {
        VALUE_BASE + k * n_values + v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TextPretrain,
    MmAdapt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Conversation,
    Description,
    Reasoning,
}

impl Category {
    pub const ALL: [Category; 3] = [
        Category::Conversation,
        Category::Description,
        Category::Reasoning,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Weights over conversation, description, reasoning.
    pub mixture: [f64; 3],
    pub n_samples: usize,
    pub seq_len: usize,
    /// Number of latent attributes `K`.
    pub latent_dim: usize,
    /// Values per attribute `M`.
    pub n_values: usize,
    pub seed: u64,
    /// Id of the first sample; disjoint ranges keep per-sample streams of
    /// different splits apart.
    #[serde(default)]
    pub first_id: u64,
}

pub const DEFAULT_LATENT_DIM: usize = 4;
pub const DEFAULT_VALUES: usize = 8;

impl TaskSpec {
    pub fn new(
        kind: TaskKind,
        mixture: [f64; 3],
        n_samples: usize,
        seq_len: usize,
        seed: u64,
    ) -> Self {
        TaskSpec {
            kind,
            mixture,
            n_samples,
            seq_len,
            latent_dim: DEFAULT_LATENT_DIM,
            n_values: DEFAULT_VALUES,
            seed,
            first_id: 0,
        }
    }

    /// Smallest vocabulary that holds every token the task emits.
    pub fn min_vocab(&self) -> usize {
        vocab::VALUE_BASE + self.latent_dim * self.n_values
    }

    /// Longest body or context the task can emit.
    pub fn max_len(&self) -> usize {
        let k = self.latent_dim;
        let body = (4 + 2 * k).max(11).max(7);
        match self.kind {
            TaskKind::TextPretrain => 2 + 2 * k + body,
            TaskKind::MmAdapt => 1 + body,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidTask("n_samples must be positive".into()));
        }
        if self.mixture.iter().any(|w| !(*w >= 0.0))
            || (self.mixture.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidTask(format!(
                "mixture {:?} must be non-negative and sum to 1",
                self.mixture
            )));
        }
        if self.latent_dim < 2
            || self.latent_dim > vocab::VALUE_BASE - vocab::NAME_BASE
            || self.n_values < 2
        {
            return Err(Error::InvalidTask(
                "need 2..=16 attributes and at least 2 values".into(),
            ));
        }
        if self.seq_len < self.max_len() {
            return Err(Error::InvalidTask(format!(
                "seq_len {} is below the longest sample {}",
                self.seq_len,
                self.max_len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub category: Category,
    pub latent: Vec<usize>,
    /// Padded to `seq_len`.
    pub tokens: Vec<usize>,
    /// True at answer tokens, the ones determined by the latent.
    pub answer_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn category_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.samples {
            c[s.category as usize] += 1;
        }
        c
    }
}

fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ id.wrapping_add(0x1234_5678),
    )
}

fn pick_category<R: Rng + ?Sized>(mixture: &[f64; 3], rng: &mut R) -> Category {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, w) in Category::ALL.into_iter().zip(mixture) {
        acc += w;
        if u < acc {
            return c;
        }
    }
    // Round-off leaves `u` just above the total: take the last weighted category.
    Category::ALL
        .into_iter()
        .zip(mixture)
        .rev()
        .find(|(_, w)| **w > 0.0)
        .map(|(c, _)| c)
        .expect("weights sum to 1")
}

struct Builder {
    tokens: Vec<usize>,
    answer: Vec<bool>,
}

impl Builder {
    fn push(&mut self, t: usize) {
        self.tokens.push(t);
        self.answer.push(false);
    }

    fn answer(&mut self, t: usize) {
        self.tokens.push(t);
        self.answer.push(true);
    }
}

fn body<R: Rng + ?Sized>(
    b: &mut Builder,
    category: Category,
    latent: &[usize],
    m: usize,
    rng: &mut R,
) {
    let k = latent.len();
    match category {
        Category::Conversation => {
            let mut attrs: Vec<usize> = (0..k).collect();
            attrs.shuffle(rng);
            for &a in &attrs[..2] {
                b.push(vocab::USER);
                b.push(vocab::Q);
                b.push(vocab::name(a));
                b.push(vocab::ASSIST);
                b.answer(vocab::value(a, latent[a], m));
            }
        }
        Category::Description => {
            b.push(vocab::USER);
            b.push(vocab::DESCRIBE);
            b.push(vocab::ASSIST);
            for (a, &v) in latent.iter().enumerate() {
                b.push(vocab::name(a));
                b.answer(vocab::value(a, v, m));
            }
        }
        Category::Reasoning => {
            let x = rng.random_range(0..k);
            let y = (x + rng.random_range(1..k)) % k;
            b.push(vocab::USER);
            b.push(vocab::COMPARE);
            b.push(vocab::name(x));
            b.push(vocab::name(y));
            b.push(vocab::Q);
            b.push(vocab::ASSIST);
            b.answer(if latent[x] > latent[y] {
                vocab::YES
            } else {
                vocab::NO
            });
        }
    }
    b.push(vocab::EOS);
}

/// One sample, a pure function of `(spec, id)`.
pub fn generate_sample(spec: &TaskSpec, id: u64) -> Sample {
    let mut rng = sample_rng(spec.seed, id);
    let category = pick_category(&spec.mixture, &mut rng);
    let latent: Vec<usize> = (0..spec.latent_dim)
        .map(|_| rng.random_range(0..spec.n_values))
        .collect();
    let mut b = Builder {
        tokens: Vec::with_capacity(spec.seq_len),
        answer: Vec::with_capacity(spec.seq_len),
    };
    b.push(vocab::BOS);
    if spec.kind == TaskKind::TextPretrain {
        let mut order: Vec<usize> = (0..spec.latent_dim).collect();
        order.shuffle(&mut rng);
        for a in order {
            b.push(vocab::name(a));
            b.push(vocab::value(a, latent[a], spec.n_values));
        }
        b.push(vocab::SEP);
    }
    body(&mut b, category, &latent, spec.n_values, &mut rng);
    b.tokens.resize(spec.seq_len, vocab::PAD);
    b.answer.resize(spec.seq_len, false);
    Sample {
        id,
        category,
        latent,
        tokens: b.tokens,
        answer_mask: b.answer,
    }
}

pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let ids = spec.first_id..spec.first_id + spec.n_samples as u64;
    let samples = ids.map(|id| generate_sample(spec, id)).collect();
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind, mixture: [f64; 3]) -> TaskSpec {
        TaskSpec::new(kind, mixture, 50, 24, 9)
    }

    #[test]
    fn deterministic_and_labelled() {
        let s = spec(TaskKind::MmAdapt, [1.0, 0.0, 0.0]);
        let a = generate(&s).unwrap();
        assert_eq!(a, generate(&s).unwrap());
        assert!(a
            .samples
            .iter()
            .all(|x| x.category == Category::Conversation));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&TaskSpec {
            n_samples: 0,
            ..spec(TaskKind::MmAdapt, [1.0, 0.0, 0.0])
        })
        .is_err());
        assert!(generate(&spec(TaskKind::MmAdapt, [0.5, 0.0, 0.0])).is_err());
        assert!(generate(&TaskSpec {
            seq_len: 8,
            ..spec(TaskKind::TextPretrain, [0.0, 1.0, 0.0])
        })
        .is_err());
    }

    #[test]
    fn samples_fit_and_pad() {
        let s = spec(TaskKind::TextPretrain, [0.3, 0.4, 0.3]);
        for x in generate(&s).unwrap().samples {
            assert_eq!(x.tokens.len(), 24);
            assert_eq!(x.tokens[0], vocab::BOS);
            let eos = x.tokens.iter().position(|&t| t == vocab::EOS).unwrap();
            assert!(x.tokens[eos + 1..].iter().all(|&t| t == vocab::PAD));
            assert!(x.tokens.iter().all(|&t| t < s.min_vocab()));
        }
    }
}
