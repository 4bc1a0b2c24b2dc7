use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use normadapt::analysis::{
    compare_similarity, layer_similarity, Pooling, ProbeInfo, SimilarityReport,
};
use normadapt::budget::{count, table2_csv, table2_reproduction, ArchPreset};
use normadapt::harness::{
    compare_strategies, load_config, make_batch, sweep_strategy_lr, RunConfig, RunRecord, Split,
    Workbench,
};
use normadapt::model::checkpoint;
use normadapt::normmath::{
    check_projection, variance_bound_check, variance_scaling_study, SamplerSpec, Upstream,
};
use normadapt::peft::{StrategyKind, TuningStrategy};

#[derive(Parser)]
#[command(
    name = "normadapt",
    version,
    about = "Selective-parameter finetuning experiments on toy multimodal models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, fit the connector, then adapt with the configured strategy.
    Train(ConfigArgs),
    /// Sweep the adaptation learning rate of the configured strategy.
    SweepLr(ConfigArgs),
    /// Adapt with every configured strategy and seed and report gains.
    Compare(ConfigArgs),
    /// Trainable-parameter and optimizer-state accounting.
    Budget {
        #[arg(long, default_value = "llama7b")]
        preset: String,
        #[arg(long, default_value = "layernorm")]
        strategy: String,
        #[arg(long, default_value_t = 2)]
        bytes_per_param: usize,
        /// Emit every published percentage cell as CSV instead.
        #[arg(long)]
        table2: bool,
    },
    /// Layer-similarity matrices of saved or freshly adapted models.
    Similarity {
        #[command(flatten)]
        args: ConfigArgs,
        /// Checkpoints to analyse; without any, adapts with finetune and layernorm.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = PoolingArg::Mean)]
        pooling: PoolingArg,
    },
    /// Per-step gradient statistics of norm parameters during adaptation.
    GradStats {
        #[command(flatten)]
        args: ConfigArgs,
        /// Strategies to trace; defaults to finetune and layernorm.
        #[arg(long = "strategy")]
        strategies: Vec<String>,
    },
    /// Numerical checks of the closed-form normalization backward pass.
    Normcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
        n_grid: Vec<usize>,
        /// Also write the scaling study as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `outdir` from the config.
    #[arg(long)]
    outdir: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PoolingArg {
    Mean,
    LastToken,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.outdir {
            cfg.outdir = o.clone();
        }
        fs::create_dir_all(&cfg.outdir)
            .with_context(|| format!("creating {}", cfg.outdir.display()))?;
        Ok(cfg)
    }
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf> {
    write(dir, name, serde_json::to_string_pretty(value)? + "\n")
}

fn prepare(cfg: &RunConfig) -> Result<Workbench<f32>> {
    eprintln!(
        "preparing {} model: {} pretrain steps, {} connector steps",
        cfg.preset, cfg.experiment.pretrain_steps, cfg.experiment.stage1_steps
    );
    Ok(Workbench::prepare(cfg.experiment.clone())?)
}

fn stage2(
    bench: &Workbench<f32>,
    cfg: &RunConfig,
    strategy: &TuningStrategy,
    grad_stats: bool,
) -> Result<(normadapt::model::Model<f32>, RunRecord)> {
    let mut tc = bench.stage2_config(strategy, bench.config.lr_for(&strategy.label()), cfg.seed);
    tc.eval_interval = cfg.eval_interval;
    tc.grad_stats = grad_stats;
    Ok(bench.adapt(&tc)?)
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let bench = prepare(&cfg)?;
    let (model, mut record) = stage2(&bench, &cfg, &cfg.strategy, cfg.grad_stats)?;
    let ckpt = cfg.outdir.join("checkpoint.bin");
    checkpoint::save(&model, &ckpt)?;
    record.artifacts.checkpoint = Some(ckpt.display().to_string());
    if let Some(trace) = &record.grad_trace {
        record.artifacts.grad_trace_csv = Some(
            write(&cfg.outdir, "grad_stats.csv", trace.to_csv())?
                .display()
                .to_string(),
        );
    }
    write(&cfg.outdir, "metrics.csv", record.metrics_csv())?;
    write_json(&cfg.outdir, "run.json", &record)?;
    println!(
        "{} final eval loss {:.6} (frozen {:.6})",
        record.strategy, record.final_eval_loss, bench.frozen_loss
    );
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let bench = prepare(&cfg)?;
    let result = sweep_strategy_lr(&bench, &cfg.strategy, &cfg.grid, cfg.seed)?;
    write(&cfg.outdir, "sweep.csv", result.to_csv())?;
    write_json(
        &cfg.outdir,
        "sweep.json",
        &json!({ "strategy": cfg.strategy.label(), "result": result }),
    )?;
    println!(
        "{} best lr {:e} (eval loss {:.6})",
        cfg.strategy.label(),
        result.best_lr,
        result.best_loss
    );
    Ok(())
}

fn cmd_compare(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let bench = prepare(&cfg)?;
    let report = compare_strategies(&bench, &cfg.strategies)?;
    write(&cfg.outdir, "comparison.csv", report.to_csv())?;
    write_json(&cfg.outdir, "comparison.json", &report)?;
    for s in &report.summary {
        println!(
            "{:<18} median gain {:>8.4}  median loss {:.6}",
            s.strategy, s.median_gain, s.median_loss
        );
    }
    Ok(())
}

fn cmd_budget(preset: &str, strategy: &str, bytes: usize, table2: bool) -> Result<()> {
    if table2 {
        let cells = table2_reproduction(&[ArchPreset::llama7b(), ArchPreset::llama13b()])?;
        print!("{}", table2_csv(&cells));
        return Ok(());
    }
    let strategy: TuningStrategy = strategy.parse()?;
    let report = count(&ArchPreset::by_name(preset)?, &strategy, bytes)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_similarity(args: &ConfigArgs, checkpoints: &[PathBuf], pooling: PoolingArg) -> Result<()> {
    let cfg = args.load()?;
    let pooling = match pooling {
        PoolingArg::Mean => Pooling::Mean,
        PoolingArg::LastToken => Pooling::LastToken,
    };
    let bench = prepare(&cfg)?;
    let split = Split::new(&bench.mm_eval, Some(&bench.vision))?;
    let probe_size = cfg.experiment.batch.min(bench.mm_eval.len());
    let batch = make_batch::<f32>(split, &(0..probe_size).collect::<Vec<_>>())?;
    let probe = ProbeInfo {
        dataset: "mm-adapt held-out".into(),
        batch: probe_size,
        seed: cfg.experiment.base_seed,
    };
    let mut runs: Vec<(String, SimilarityReport)> = Vec::new();
    if checkpoints.is_empty() {
        for kind in [StrategyKind::Finetune, StrategyKind::LayerNorm] {
            let (model, _) = stage2(&bench, &cfg, &TuningStrategy::new(kind), false)?;
            runs.push((
                kind.name().into(),
                layer_similarity(&model, batch.inputs(), pooling, probe.clone())?,
            ));
        }
    } else {
        for path in checkpoints {
            let model = checkpoint::load::<f32>(path)
                .with_context(|| format!("loading {}", path.display()))?;
            let name = path.file_stem().map_or_else(
                || path.display().to_string(),
                |s| s.to_string_lossy().into_owned(),
            );
            runs.push((
                name,
                layer_similarity(&model, batch.inputs(), pooling, probe.clone())?,
            ));
        }
    }
    for (name, report) in &runs {
        write(
            &cfg.outdir,
            &format!("similarity_{name}.csv"),
            report.to_csv(),
        )?;
        println!("{name:<18} average similarity {:.6}", report.average);
    }
    let comparisons = compare_similarity(&runs)?;
    write_json(
        &cfg.outdir,
        "similarity.json",
        &json!({ "runs": runs, "comparisons": comparisons }),
    )?;
    Ok(())
}

fn cmd_grad_stats(args: &ConfigArgs, strategies: &[String]) -> Result<()> {
    let cfg = args.load()?;
    let strategies: Vec<TuningStrategy> = if strategies.is_empty() {
        vec![
            TuningStrategy::new(StrategyKind::Finetune),
            TuningStrategy::new(StrategyKind::LayerNorm),
        ]
    } else {
        strategies
            .iter()
            .map(|s| s.parse())
            .collect::<normadapt::Result<_>>()?
    };
    let bench = prepare(&cfg)?;
    let mut csv = String::from("strategy,step,path,mean,variance\n");
    for strategy in &strategies {
        let (_, record) = stage2(&bench, &cfg, strategy, true)?;
        let trace = record.grad_trace.expect("grad stats enabled");
        for r in &trace.records {
            csv.push_str(&format!(
                "{},{},{},{:e},{:e}\n",
                record.strategy, r.step, r.path, r.mean, r.variance
            ));
        }
        eprintln!(
            "{}: {} gradient records",
            record.strategy,
            trace.records.len()
        );
    }
    write(&cfg.outdir, "grad_stats.csv", csv)?;
    Ok(())
}

const PROJECTION_GRID: [usize; 6] = [3, 8, 16, 64, 256, 512];
const BOUND_GRID: [usize; 3] = [8, 64, 512];
const BOUND_DRAWS: usize = 1000;

fn cmd_normcheck(seed: u64, trials: usize, n_grid: &[usize], csv: Option<&Path>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = SamplerSpec::new(Upstream::Iid, seed);
    let mut projections = Vec::new();
    for n in PROJECTION_GRID {
        let (inst, _) = sampler.draw(n, &mut rng)?;
        projections.push(check_projection(&inst)?);
    }
    let mut bounds = Vec::new();
    for n in BOUND_GRID {
        let mut violations = 0usize;
        let mut worst_ratio = 0.0f64;
        for _ in 0..BOUND_DRAWS {
            let (inst, b) = sampler.draw(n, &mut rng)?;
            let r = variance_bound_check(&inst, &b)?;
            violations += usize::from(!r.holds);
            worst_ratio = worst_ratio.max(r.scaled_norm_sq / r.centered_b_norm_sq);
        }
        bounds.push(json!({ "n": n, "draws": BOUND_DRAWS, "violations": violations, "worst_ratio": worst_ratio }));
    }
    let iid = variance_scaling_study(n_grid, sampler, trials)?;
    let reduced = variance_scaling_study(
        n_grid,
        SamplerSpec::new(Upstream::MeanReduced, seed),
        trials,
    )?;
    if let Some(path) = csv {
        let mut s = String::from("sampler,N,variance\n");
        for (name, study) in [("iid", &iid), ("mean-reduced", &reduced)] {
            for r in &study.rows {
                s.push_str(&format!("{name},{},{:e}\n", r.n, r.variance));
            }
        }
        fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    }
    let out = json!({
        "projection": projections,
        "contraction": bounds,
        "variance_scaling": [iid, reduced],
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

/// Kernels run on the calling thread; the cap is accepted for interface
/// compatibility and validated.
fn check_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NORMADAPT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {}
            _ => bail!("NORMADAPT_THREADS must be a positive integer, got `{v}`"),
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    check_threads()?;
    match Cli::parse().command {
        Command::Train(a) => cmd_train(&a),
        Command::SweepLr(a) => cmd_sweep(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Budget {
            preset,
            strategy,
            bytes_per_param,
            table2,
        } => cmd_budget(&preset, &strategy, bytes_per_param, table2),
        Command::Similarity {
            args,
            checkpoints,
            pooling,
        } => cmd_similarity(&args, &checkpoints, pooling),
        Command::GradStats { args, strategies } => cmd_grad_stats(&args, &strategies),
        Command::Normcheck {
            seed,
            trials,
            n_grid,
            csv,
        } => cmd_normcheck(seed, trials, &n_grid, csv.as_deref()),
    }
}
