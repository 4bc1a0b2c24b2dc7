use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{vocab, Dataset, TaskKind};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::{lr_schedule, DEFAULT_WARMUP_RATIO};
use crate::analysis::{record_grad_stats, GradTrace};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Inputs, Model, VisionStub};
use crate::peft::{apply_strategy, SelectionReport, TuningStrategy};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: TuningStrategy,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Held-out evaluation every this many steps; 0 evaluates only at the end.
    pub eval_interval: usize,
    /// Record gradient statistics of trainable norm parameters every step.
    pub grad_stats: bool,
}

impl TrainConfig {
    pub fn new(strategy: TuningStrategy, lr: f64, steps: usize) -> Self {
        TrainConfig {
            strategy,
            lr,
            steps,
            batch: 32,
            warmup_ratio: DEFAULT_WARMUP_RATIO,
            weight_decay: 0.0,
            seed: 0,
            eval_interval: 0,
            grad_stats: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidTrainConfig(format!(
                "lr {} must be finite and non-negative",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidTrainConfig(format!(
                "warmup_ratio {} must lie in [0, 1)",
                self.warmup_ratio
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidTrainConfig("batch must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidTrainConfig(
                "weight_decay must be non-negative".into(),
            ));
        }
        self.strategy.validate()
    }
}

/// A dataset and, for multimodal tasks, the feature source for its samples.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub data: &'a Dataset,
    pub vision: Option<&'a VisionStub>,
}

impl<'a> Split<'a> {
    pub fn new(data: &'a Dataset, vision: Option<&'a VisionStub>) -> Result<Self> {
        if data.spec.kind == TaskKind::MmAdapt && vision.is_none() {
            return Err(Error::InvalidTask(
                "mm-adapt data needs a vision stub".into(),
            ));
        }
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        Ok(Split {
            data,
            vision: if data.spec.kind == TaskKind::MmAdapt {
                vision
            } else {
                None
            },
        })
    }
}

/// Model inputs and next-token targets for a list of samples.
pub struct Batch<T> {
    pub tokens: Vec<usize>,
    pub size: usize,
    pub visual: Option<Tensor<T>>,
    /// One entry per `(sample, combined position)` row of the logits.
    pub targets: Vec<Option<usize>>,
}

impl<T: Element> Batch<T> {
    pub fn inputs(&self) -> Inputs<'_, T> {
        Inputs {
            tokens: &self.tokens,
            batch: self.size,
            visual: self.visual.as_ref(),
        }
    }

    pub fn n_targets(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Builds a batch trimmed to its longest non-pad sample; every position
/// predicts the following non-pad text token.
pub fn make_batch<T: Element>(split: Split<'_>, indices: &[usize]) -> Result<Batch<T>> {
    let samples: Vec<_> = indices.iter().map(|&i| &split.data.samples[i]).collect();
    let len = samples
        .iter()
        .map(|s| {
            s.tokens
                .iter()
                .rposition(|&t| t != vocab::PAD)
                .map_or(1, |p| p + 1)
        })
        .max()
        .unwrap_or(1);
    let visual = match split.vision {
        Some(stub) => {
            let pairs: Vec<(u64, &[usize])> = samples
                .iter()
                .map(|s| (s.id, s.latent.as_slice()))
                .collect();
            Some(stub.batch::<T>(&pairs)?)
        }
        None => None,
    };
    let prefix = split.vision.map_or(0, VisionStub::n_tokens);
    let seq = prefix + len;
    let mut tokens = Vec::with_capacity(samples.len() * len);
    let mut targets = Vec::with_capacity(samples.len() * seq);
    for s in &samples {
        let text = &s.tokens[..len];
        tokens.extend_from_slice(text);
        targets.extend(std::iter::repeat_n(None, prefix));
        for t in 0..len {
            targets.push(text.get(t + 1).copied().filter(|&next| next != vocab::PAD));
        }
    }
    Ok(Batch {
        tokens,
        size: samples.len(),
        visual,
        targets,
    })
}

/// Token-weighted mean cross-entropy over the whole split.
pub fn evaluate<T: Element>(model: &Model<T>, split: Split<'_>, batch: usize) -> Result<f64> {
    let n = split.data.len();
    let mut total = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let b = make_batch::<T>(split, chunk)?;
        let k = b.n_targets();
        if k == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, b.inputs())?;
        let loss = tape.cross_entropy(out.logits, b.targets)?;
        total += tape.value(loss)[0].as_f64() * k as f64;
        count += k;
    }
    if count == 0 {
        return Err(Error::Empty("evaluation targets"));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLoss {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: Option<String>,
    pub grad_trace_csv: Option<String>,
    pub similarity: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub strategy: String,
    pub train_losses: Vec<StepLoss>,
    pub eval_losses: Vec<EvalLoss>,
    pub final_eval_loss: f64,
    pub selection: SelectionReport,
    pub wall_clock_secs: f64,
    pub artifacts: Artifacts,
    #[serde(skip)]
    pub grad_trace: Option<GradTrace>,
}

impl RunRecord {
    /// `step,split,loss,lr` rows; eval rows carry the lr of their step.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,split,loss,lr\n");
        for r in &self.train_losses {
            s.push_str(&format!("{},train,{:.8},{:e}\n", r.step, r.loss, r.lr));
        }
        for e in &self.eval_losses {
            let lr = self
                .train_losses
                .iter()
                .find(|r| r.step == e.step)
                .map_or(0.0, |r| r.lr);
            s.push_str(&format!("{},eval,{:.8},{:e}\n", e.step, e.loss, lr));
        }
        s
    }
}

/// Applies `cfg.strategy` to `model` and trains the selected parameters.
///
/// Step `s` (0-based) uses the schedule value at `s + 1`, so the first
/// update is non-zero and the last uses the cosine endpoint.
pub fn train<T: Element>(
    model: &mut Model<T>,
    train: Split<'_>,
    eval: Split<'_>,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (selection, _) = apply_strategy(&cfg.strategy, &mut model.params, &mut rng)?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let norm_paths: Vec<String> = selection
        .selected
        .iter()
        .filter(|p| p.contains("norm."))
        .cloned()
        .collect();
    let mut trace = cfg.grad_stats.then(GradTrace::default);
    let mut train_losses = Vec::with_capacity(cfg.steps);
    let mut eval_losses = Vec::new();
    let n = train.data.len();
    for step in 0..cfg.steps {
        let lr = lr_schedule(step + 1, cfg.steps, cfg.warmup_ratio, cfg.lr)?;
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..n)).collect();
        let batch = make_batch::<T>(train, &idx)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, batch.inputs())?;
        let loss = tape.cross_entropy(out.logits, batch.targets)?;
        let loss_value = tape.value(loss)[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: loss_value,
            });
        }
        tape.backward(loss)?;
        model.params.zero_grads();
        model.params.accumulate_grads(&tape, &out.bindings)?;
        if let Some(trace) = trace.as_mut() {
            record_grad_stats(trace, step, &model.params, &norm_paths)?;
        }
        opt.step(&mut model.params, lr);
        train_losses.push(StepLoss {
            step,
            loss: loss_value,
            lr,
        });
        if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 && step + 1 < cfg.steps {
            eval_losses.push(EvalLoss {
                step,
                loss: evaluate(model, eval, cfg.batch)?,
            });
        }
    }
    model.params.zero_grads();
    let final_eval_loss = evaluate(model, eval, cfg.batch)?;
    eval_losses.push(EvalLoss {
        step: cfg.steps.saturating_sub(1),
        loss: final_eval_loss,
    });
    Ok(RunRecord {
        config: cfg.clone(),
        strategy: cfg.strategy.label(),
        train_losses,
        eval_losses,
        final_eval_loss,
        selection,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        artifacts: Artifacts::default(),
        grad_trace: trace,
    })
}
