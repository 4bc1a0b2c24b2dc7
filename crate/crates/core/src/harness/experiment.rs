//! Two-stage adaptation experiments, strategy comparisons, and lr sweeps.
//!
//! A text-pretrained model first learns its connector on multimodal data
//! (stage 1); each strategy then adapts a copy of that model (stage 2).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::{generate, Dataset, TaskKind, TaskSpec};
use super::schedule::DEFAULT_WARMUP_RATIO;
use super::train::{evaluate, train, RunRecord, Split, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, VisionMode, VisionStub};
use crate::peft::{select_paths, SelectionReport, StrategyKind, TuningStrategy};
use crate::tensor::Element;

/// The learning-rate grid searched per strategy at 7B/13B scale.
pub const PAPER_GRID: [f64; 11] = [
    2e-3, 1e-3, 6e-4, 3e-4, 1e-4, 5e-5, 2e-5, 1e-5, 6e-6, 1e-6, 1e-7,
];

pub const DEFAULT_STAGE1_LR: f64 = 2e-3;

pub fn grid_preset(name: &str) -> Result<Vec<f64>> {
    match name {
        "paper-grid" => Ok(PAPER_GRID.to_vec()),
        other => Err(Error::InvalidConfig(format!(
            "unknown lr grid preset `{other}`"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub vision: VisionMode,
    /// Seed of the pretrained model, the vision stub, and the data streams.
    pub base_seed: u64,
    pub mixture: [f64; 3],
    pub n_train: usize,
    pub n_eval: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Stage-2 lr for strategies without an entry in `lrs`.
    pub lr: f64,
    /// Stage-2 lr per strategy label.
    pub lrs: BTreeMap<String, f64>,
    /// One stage-2 run per seed and strategy.
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// The default toy protocol: 2,000 pretraining steps, 500 adaptation
    /// steps, batch 32.
    pub fn toy() -> Self {
        ExperimentConfig {
            model: ModelConfig::toy(),
            vision: VisionMode::Unaligned,
            base_seed: 0,
            mixture: [0.4, 0.3, 0.3],
            n_train: 2048,
            n_eval: 256,
            pretrain_steps: 2000,
            pretrain_lr: 1e-3,
            stage1_steps: 200,
            stage1_lr: DEFAULT_STAGE1_LR,
            steps: 500,
            batch: 32,
            warmup_ratio: DEFAULT_WARMUP_RATIO,
            weight_decay: 0.0,
            lr: 1e-3,
            lrs: BTreeMap::new(),
            seeds: vec![0, 1, 2],
        }
    }

    /// A seconds-scale protocol on the `mini` model for tests and smoke runs.
    pub fn mini() -> Self {
        ExperimentConfig {
            model: ModelConfig::mini(),
            n_train: 512,
            n_eval: 128,
            pretrain_steps: 300,
            stage1_steps: 50,
            steps: 100,
            batch: 16,
            ..Self::toy()
        }
    }

    pub fn lr_for(&self, label: &str) -> f64 {
        self.lrs.get(label).copied().unwrap_or(self.lr)
    }

    fn task(&self, kind: TaskKind, n: usize, seed: u64, first_id: u64) -> TaskSpec {
        let mut spec = TaskSpec::new(kind, self.mixture, n, 0, seed);
        spec.seq_len = spec.max_len();
        spec.first_id = first_id;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        let probe = self.task(TaskKind::TextPretrain, 1, 0, 0);
        probe.validate()?;
        if probe.min_vocab() > self.model.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} is below the task vocabulary {}",
                self.model.vocab_size,
                probe.min_vocab()
            )));
        }
        let mm = self.task(TaskKind::MmAdapt, 1, 0, 0);
        if probe.seq_len.max(self.model.n_visual_tokens + mm.seq_len) > self.model.max_seq {
            return Err(Error::InvalidConfig(format!(
                "max_seq {} is too short for the tasks",
                self.model.max_seq
            )));
        }
        Ok(())
    }
}

/// Everything shared by the stage-2 runs of one experiment.
pub struct Workbench<T> {
    pub config: ExperimentConfig,
    pub vision: VisionStub,
    pub pretrain: Dataset,
    pub mm_train: Dataset,
    pub mm_eval: Dataset,
    /// Text-pretrained model with a stage-1 connector.
    pub base: Model<T>,
    pub pretrain_record: RunRecord,
    pub stage1_record: RunRecord,
    /// Held-out mm loss of `base`: the frozen reference.
    pub frozen_loss: f64,
}

impl<T: Element> Workbench<T> {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.base_seed;
        let n = config.n_train as u64;
        let pretrain = generate(&config.task(TaskKind::TextPretrain, config.n_train, seed, 0))?;
        let mm_train = generate(&config.task(TaskKind::MmAdapt, config.n_train, seed, n))?;
        let mm_eval = generate(&config.task(TaskKind::MmAdapt, config.n_eval, seed, 2 * n))?;
        let m = &config.model;
        let vision = VisionStub::new(
            config.vision,
            seed,
            m.n_visual_tokens,
            m.d_visual,
            mm_train.spec.latent_dim,
            mm_train.spec.n_values,
        )?;
        let text = Split::new(&pretrain, None)?;
        let mut base = Model::<T>::build(config.model.clone(), seed)?;
        let mut pre_cfg = TrainConfig::new(
            TuningStrategy::new(StrategyKind::Finetune),
            config.pretrain_lr,
            config.pretrain_steps,
        );
        pre_cfg.batch = config.batch;
        pre_cfg.seed = seed;
        pre_cfg.weight_decay = config.weight_decay;
        let pretrain_record = train(&mut base, text, text, &pre_cfg)?;
        let mm = Split::new(&mm_train, Some(&vision))?;
        let held_out = Split::new(&mm_eval, Some(&vision))?;
        let mut s1_cfg = TrainConfig::new(
            TuningStrategy::connector_only(),
            config.stage1_lr,
            config.stage1_steps,
        );
        s1_cfg.batch = config.batch;
        s1_cfg.seed = seed;
        let stage1_record = train(&mut base, mm, held_out, &s1_cfg)?;
        let frozen_loss = stage1_record.final_eval_loss;
        Ok(Workbench {
            config,
            vision,
            pretrain,
            mm_train,
            mm_eval,
            base,
            pretrain_record,
            stage1_record,
            frozen_loss,
        })
    }

    pub fn splits(&self) -> Result<(Split<'_>, Split<'_>)> {
        Ok((
            Split::new(&self.mm_train, Some(&self.vision))?,
            Split::new(&self.mm_eval, Some(&self.vision))?,
        ))
    }

    pub fn stage2_config(&self, strategy: &TuningStrategy, lr: f64, seed: u64) -> TrainConfig {
        let c = &self.config;
        let mut cfg = TrainConfig::new(strategy.clone(), lr, c.steps);
        cfg.batch = c.batch;
        cfg.warmup_ratio = c.warmup_ratio;
        cfg.weight_decay = c.weight_decay;
        cfg.seed = seed;
        cfg
    }

    /// Adapts a fresh copy of the stage-1 model.
    pub fn adapt(&self, cfg: &TrainConfig) -> Result<(Model<T>, RunRecord)> {
        let (train_split, eval_split) = self.splits()?;
        let mut model = self.base.clone();
        let record = train(&mut model, train_split, eval_split, cfg)?;
        Ok((model, record))
    }

    /// Evaluation without training, for selections that train nothing.
    fn frozen_record(&self, strategy: &TuningStrategy, seed: u64) -> Result<RunRecord> {
        let paths = select_paths(strategy, self.base.params.paths())?;
        let total = self.base.params.total_count();
        let (_, eval_split) = self.splits()?;
        Ok(RunRecord {
            config: self.stage2_config(strategy, 0.0, seed),
            strategy: strategy.label(),
            train_losses: Vec::new(),
            eval_losses: Vec::new(),
            final_eval_loss: evaluate(&self.base, eval_split, self.config.batch)?,
            selection: SelectionReport {
                strategy: strategy.label(),
                selected: paths,
                trainable: 0,
                total,
                fraction: 0.0,
            },
            wall_clock_secs: 0.0,
            artifacts: Default::default(),
            grad_trace: None,
        })
    }
}

/// `(L_frozen − L) / (L_frozen − L_finetune)`.
pub fn adaptation_gain(frozen: f64, finetune: f64, loss: f64) -> f64 {
    (frozen - loss) / (frozen - finetune)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub seed: u64,
    pub lr: f64,
    pub final_eval_loss: f64,
    pub gain: f64,
    pub trainable: usize,
    pub trainable_fraction: f64,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub median_gain: f64,
    pub median_loss: f64,
    pub trainable_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config: ExperimentConfig,
    pub frozen_loss: f64,
    pub stage1_loss: Vec<f64>,
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<StrategySummary>,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "strategy,seed,lr,final_eval_loss,gain,trainable,trainable_fraction,wall_clock_secs\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:e},{:.8},{:.6},{},{:.8},{:.3}\n",
                r.strategy,
                r.seed,
                r.lr,
                r.final_eval_loss,
                r.gain,
                r.trainable,
                r.trainable_fraction,
                r.wall_clock_secs
            ));
        }
        s
    }

    pub fn summary_for(&self, label: &str) -> Option<&StrategySummary> {
        self.summary.iter().find(|s| s.strategy == label)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Runs every strategy once per seed against the shared stage-1 model.
///
/// Full finetuning always runs as the gain reference and appears in the
/// report even when absent from `strategies`.
pub fn compare_strategies<T: Element>(
    bench: &Workbench<T>,
    strategies: &[TuningStrategy],
) -> Result<ComparisonReport> {
    let finetune = TuningStrategy::new(StrategyKind::Finetune);
    let mut order: Vec<TuningStrategy> = Vec::with_capacity(strategies.len() + 1);
    if !strategies.contains(&finetune) {
        order.push(finetune.clone());
    }
    order.extend(strategies.iter().cloned());
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &seed in &bench.config.seeds {
        let mut seed_rows = Vec::with_capacity(order.len());
        for strategy in &order {
            let label = strategy.label();
            let lr = bench.config.lr_for(&label);
            let trains_nothing = select_paths(strategy, bench.base.params.paths())?.is_empty();
            let record = if trains_nothing {
                bench.frozen_record(strategy, seed)?
            } else {
                bench.adapt(&bench.stage2_config(strategy, lr, seed))?.1
            };
            seed_rows.push(ComparisonRow {
                strategy: label,
                seed,
                lr: if trains_nothing { 0.0 } else { lr },
                final_eval_loss: record.final_eval_loss,
                gain: f64::NAN,
                trainable: record.selection.trainable,
                trainable_fraction: record.selection.fraction,
                wall_clock_secs: record.wall_clock_secs,
            });
            records.push(record);
        }
        let ft_label = finetune.label();
        let ft_loss = seed_rows
            .iter()
            .find(|r| r.strategy == ft_label)
            .map(|r| r.final_eval_loss)
            .expect("reference run");
        for row in &mut seed_rows {
            row.gain = if row.strategy == ft_label {
                1.0
            } else if row.trainable == 0 {
                0.0
            } else {
                adaptation_gain(bench.frozen_loss, ft_loss, row.final_eval_loss)
            };
        }
        rows.extend(seed_rows);
    }
    let summary = order
        .iter()
        .map(|s| {
            let label = s.label();
            let mine: Vec<&ComparisonRow> = rows.iter().filter(|r| r.strategy == label).collect();
            StrategySummary {
                median_gain: median(&mine.iter().map(|r| r.gain).collect::<Vec<_>>()),
                median_loss: median(&mine.iter().map(|r| r.final_eval_loss).collect::<Vec<_>>()),
                trainable_fraction: mine[0].trainable_fraction,
                strategy: label,
            }
        })
        .collect();
    Ok(ComparisonReport {
        config: bench.config.clone(),
        frozen_loss: bench.frozen_loss,
        stage1_loss: bench
            .stage1_record
            .train_losses
            .iter()
            .map(|s| s.loss)
            .collect(),
        rows,
        summary,
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lr: f64,
    pub final_eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_lr: f64,
    pub best_loss: f64,
    pub table: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lr,final_eval_loss,best\n");
        for p in &self.table {
            s.push_str(&format!(
                "{:e},{:.8},{}\n",
                p.lr,
                p.final_eval_loss,
                p.lr == self.best_lr
            ));
        }
        s
    }
}

/// Argmin of the final eval loss over `grid`, ties going to the smaller lr.
pub fn sweep_lr(grid: &[f64], mut run: impl FnMut(f64) -> Result<f64>) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Empty("lr grid"));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &lr in grid {
        table.push(SweepPoint {
            lr,
            final_eval_loss: run(lr)?,
        });
    }
    let best = table
        .iter()
        .min_by(|a, b| {
            a.final_eval_loss
                .total_cmp(&b.final_eval_loss)
                .then(a.lr.total_cmp(&b.lr))
        })
        .expect("non-empty grid");
    Ok(SweepResult {
        best_lr: best.lr,
        best_loss: best.final_eval_loss,
        table,
    })
}

/// Sweeps the stage-2 lr of one strategy with a shared seed.
pub fn sweep_strategy_lr<T: Element>(
    bench: &Workbench<T>,
    strategy: &TuningStrategy,
    grid: &[f64],
    seed: u64,
) -> Result<SweepResult> {
    sweep_lr(grid, |lr| {
        Ok(bench
            .adapt(&bench.stage2_config(strategy, lr, seed))?
            .1
            .final_eval_loss)
    })
}
