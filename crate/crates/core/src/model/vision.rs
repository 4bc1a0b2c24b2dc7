use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisionMode {
    /// Each attribute value owns a fixed code vector added to one token,
    /// so a linear map can read the latent back out.
    Aligned,
    /// Every token is `tanh` of its own random projection of the whole
    /// one-hot latent.
    Unaligned,
}

impl std::str::FromStr for VisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(VisionMode::Aligned),
            "unaligned" => Ok(VisionMode::Unaligned),
            other => Err(Error::InvalidConfig(format!(
                "unknown vision mode `{other}`"
            ))),
        }
    }
}

/// Frozen synthetic feature source standing in for an image encoder.
///
/// Features for a sample are a function of `(seed, sample_id, latent)`;
/// the stub has no trainable state.
#[derive(Clone, Debug)]
pub struct VisionStub {
    mode: VisionMode,
    seed: u64,
    n_tokens: usize,
    d_visual: usize,
    n_values: usize,
    noise: f64,
    /// `[attribute][value]` code vectors (aligned) or
    /// `[token][attribute * n_values + value]` projection columns (unaligned),
    /// each of length `d_visual`.
    tables: Vec<Vec<f64>>,
    n_attributes: usize,
}

pub const DEFAULT_VISION_NOISE: f64 = 0.1;

impl VisionStub {
    pub fn new(
        mode: VisionMode,
        seed: u64,
        n_tokens: usize,
        d_visual: usize,
        n_attributes: usize,
        n_values: usize,
    ) -> Result<Self> {
        if n_tokens == 0 || d_visual == 0 || n_attributes == 0 || n_values == 0 {
            return Err(Error::InvalidConfig(
                "vision stub dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_f00d);
        let columns = match mode {
            VisionMode::Aligned => n_attributes * n_values,
            VisionMode::Unaligned => n_tokens * n_attributes * n_values,
        };
        let tables = (0..columns)
            .map(|_| {
                (0..d_visual)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Ok(VisionStub {
            mode,
            seed,
            n_tokens,
            d_visual,
            n_values,
            noise: DEFAULT_VISION_NOISE,
            tables,
            n_attributes,
        })
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn mode(&self) -> VisionMode {
        self.mode
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn d_visual(&self) -> usize {
        self.d_visual
    }

    /// `n_tokens × d_visual` features, row-major.
    pub fn features(&self, sample_id: u64, latent: &[usize]) -> Result<Vec<f64>> {
        if latent.len() != self.n_attributes {
            return Err(Error::LengthMismatch {
                expected: self.n_attributes,
                actual: latent.len(),
            });
        }
        if let Some(&v) = latent.iter().find(|&&v| v >= self.n_values) {
            return Err(Error::InvalidTask(format!(
                "latent value {v} out of range {}",
                self.n_values
            )));
        }
        let d = self.d_visual;
        let mut out = vec![0.0; self.n_tokens * d];
        match self.mode {
            VisionMode::Aligned => {
                for (k, &v) in latent.iter().enumerate() {
                    let row = &mut out[(k % self.n_tokens) * d..][..d];
                    let code = &self.tables[k * self.n_values + v];
                    row.iter_mut().zip(code).for_each(|(o, c)| *o += c);
                }
            }
            VisionMode::Unaligned => {
                let per_token = self.n_attributes * self.n_values;
                let scale = 1.0 / (self.n_attributes as f64).sqrt();
                for (t, row) in out.chunks_mut(d).enumerate() {
                    for (k, &v) in latent.iter().enumerate() {
                        let col = &self.tables[t * per_token + k * self.n_values + v];
                        row.iter_mut().zip(col).for_each(|(o, c)| *o += c * scale);
                    }
                    row.iter_mut().for_each(|o| *o = (2.0 * *o).tanh());
                }
            }
        }
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ sample_id,
            );
            for o in &mut out {
                let z: f64 = StandardNormal.sample(&mut rng);
                *o += self.noise * z;
            }
        }
        Ok(out)
    }

    /// Stacks per-sample features into a `[batch, n_tokens, d_visual]` tensor.
    pub fn batch<T: Element>(&self, samples: &[(u64, &[usize])]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(samples.len() * self.n_tokens * self.d_visual);
        for &(id, latent) in samples {
            data.extend(self.features(id, latent)?.into_iter().map(T::lit));
        }
        Tensor::new(vec![samples.len(), self.n_tokens, self.d_visual], data)
    }
}
