use std::sync::OnceLock;

use normadapt::harness::{
    compare_strategies, generate, lr_schedule, median, train, vocab, warmup_steps, Category,
    ExperimentConfig, Sample, Split, TaskKind, TaskSpec, Workbench,
};
use normadapt::model::ParamTree;
use normadapt::peft::{StrategyKind, TuningStrategy};

fn bench() -> &'static Workbench<f32> {
    static BENCH: OnceLock<Workbench<f32>> = OnceLock::new();
    BENCH.get_or_init(|| Workbench::prepare(ExperimentConfig::mini()).unwrap())
}

fn snapshot(tree: &ParamTree<f32>) -> Vec<(String, Vec<f32>)> {
    tree.iter()
        .map(|(p, t)| (p.to_string(), t.data().to_vec()))
        .collect()
}

/// Reads every answer token back from the sample's latent and its prompt.
fn oracle_answers(s: &Sample, n_values: usize) -> Vec<usize> {
    let t = &s.tokens;
    let name_of = |tok: usize| {
        tok.checked_sub(vocab::NAME_BASE)
            .filter(|k| *k < s.latent.len())
    };
    (0..t.len())
        .filter(|&i| s.answer_mask[i])
        .map(|i| match s.category {
            Category::Conversation => {
                let k = name_of(t[i - 2]).unwrap();
                vocab::value(k, s.latent[k], n_values)
            }
            Category::Description => {
                let k = name_of(t[i - 1]).unwrap();
                vocab::value(k, s.latent[k], n_values)
            }
            Category::Reasoning => {
                let (a, b) = (name_of(t[i - 4]).unwrap(), name_of(t[i - 3]).unwrap());
                if s.latent[a] > s.latent[b] {
                    vocab::YES
                } else {
                    vocab::NO
                }
            }
        })
        .collect()
}

#[test]
fn oracle_decoder_recovers_every_answer() {
    let spec = TaskSpec::new(TaskKind::MmAdapt, [0.34, 0.33, 0.33], 600, 14, 17);
    let data = generate(&spec).unwrap();
    let mut answers = 0;
    for s in &data.samples {
        let truth: Vec<usize> = s
            .tokens
            .iter()
            .zip(&s.answer_mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| *t)
            .collect();
        assert_eq!(oracle_answers(s, spec.n_values), truth, "sample {}", s.id);
        answers += truth.len();
    }
    assert!(answers > 600);
}

#[test]
fn category_counts_follow_the_mixture() {
    let mixture = [0.2, 0.5, 0.3];
    let n = 4000;
    let data = generate(&TaskSpec::new(TaskKind::TextPretrain, mixture, n, 24, 3)).unwrap();
    for (count, p) in data.category_counts().iter().zip(mixture) {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (*count as f64 - n as f64 * p).abs() <= 4.0 * sd,
            "{count} vs {}",
            n as f64 * p
        );
    }
    let again = generate(&TaskSpec::new(TaskKind::TextPretrain, mixture, n, 24, 3)).unwrap();
    assert_eq!(data, again);
}

#[test]
fn schedule_matches_closed_form_for_every_total_up_to_ten_thousand() {
    let base = 2e-3;
    let ratio = 0.03;
    for total in 1..=10_000usize {
        let w = (ratio * total as f64).ceil() as usize;
        assert_eq!(warmup_steps(total, ratio), w);
        for step in 0..=total {
            let want = if step < w {
                base * step as f64 / w as f64
            } else if total == w {
                base
            } else {
                base * 0.5
                    * (1.0 + (std::f64::consts::PI * (step - w) as f64 / (total - w) as f64).cos())
            };
            let got = lr_schedule(step, total, ratio, base).unwrap();
            assert!(
                (got - want).abs() <= 1e-15 * base,
                "total {total} step {step}"
            );
        }
        assert!(lr_schedule(total + 1, total, ratio, base).is_err());
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let b = bench();
    let before = snapshot(&b.base.params);
    let (model, record) = b
        .adapt(&b.stage2_config(&TuningStrategy::new(StrategyKind::Finetune), 0.0, 0))
        .unwrap();
    assert_eq!(snapshot(&model.params), before);
    assert!(record.train_losses.iter().all(|l| l.loss.is_finite()));
}

#[test]
fn unselected_parameters_stay_bitwise_identical() {
    let b = bench();
    let before = snapshot(&b.base.params);
    let mut strategies: Vec<TuningStrategy> = StrategyKind::PAPER
        .into_iter()
        .map(TuningStrategy::new)
        .collect();
    strategies.push(TuningStrategy::connector_only());
    strategies.push(TuningStrategy::layernorm_only());
    for s in strategies {
        let mut cfg = b.stage2_config(&s, 1e-3, 0);
        cfg.steps = 5;
        let (model, record) = b.adapt(&cfg).unwrap();
        let mut moved = 0;
        for (path, data) in &before {
            let now = model.params.get(path).unwrap().data();
            if record.selection.selected.contains(path) {
                moved += usize::from(now != data.as_slice());
            } else {
                assert_eq!(now, data.as_slice(), "{} moved {path}", s.label());
            }
        }
        assert!(
            moved > 0 || s.kind == StrategyKind::Lora,
            "{} trained nothing",
            s.label()
        );
        if s.kind == StrategyKind::LayerNormSimple {
            assert_eq!(
                model.params.get("embed.weight").unwrap().data(),
                b.base.params.get("embed.weight").unwrap().data()
            );
        }
    }
}

#[test]
fn identical_seeds_reproduce_the_loss_curve_bitwise() {
    let b = bench();
    let mut cfg = b.stage2_config(&TuningStrategy::new(StrategyKind::LayerNorm), 1e-3, 4);
    cfg.steps = 20;
    cfg.grad_stats = true;
    let (_, r1) = b.adapt(&cfg).unwrap();
    let (_, r2) = b.adapt(&cfg).unwrap();
    assert_eq!(r1.train_losses, r2.train_losses);
    assert_eq!(r1.final_eval_loss, r2.final_eval_loss);
    let trace = r1.grad_trace.unwrap();
    assert_eq!(trace.steps(), (0..20).collect::<Vec<_>>());
    assert!(trace.records.iter().all(|r| r.path.contains("norm.")));
}

fn smoothed_drop(losses: &[f64]) -> f64 {
    let window = 25;
    let head = losses[..window].iter().sum::<f64>() / window as f64;
    let tail = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    head - tail
}

#[test]
fn five_hundred_step_runs_reduce_the_loss() {
    let b = bench();
    for kind in [StrategyKind::LayerNorm, StrategyKind::AttnQv] {
        let drops: Vec<f64> = (0..3)
            .map(|seed| {
                let mut cfg = b.stage2_config(&TuningStrategy::new(kind), 1e-3, seed);
                cfg.steps = 500;
                let (_, r) = b.adapt(&cfg).unwrap();
                smoothed_drop(&r.train_losses.iter().map(|l| l.loss).collect::<Vec<_>>())
            })
            .collect();
        assert!(median(&drops) > 0.0, "{kind}: {drops:?}");
    }
}

#[test]
fn comparison_reports_reference_rows() {
    let b = bench();
    let mut cfg = b.config.clone();
    cfg.steps = 10;
    cfg.seeds = vec![0];
    let small = Workbench {
        config: cfg,
        ..clone_bench(b)
    };
    let frozen = TuningStrategy::new(StrategyKind::Frozen);
    let report = compare_strategies(
        &small,
        &[frozen, TuningStrategy::new(StrategyKind::LayerNormSimple)],
    )
    .unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(labels, ["finetune", "frozen", "layernorm-simple"]);
    assert_eq!(report.rows[0].gain, 1.0);
    assert_eq!(report.rows[1].gain, 0.0);
    assert_eq!(report.rows[1].final_eval_loss, b.frozen_loss);
    assert!(report.to_csv().lines().count() == 4);

    let only_ft =
        compare_strategies(&small, &[TuningStrategy::new(StrategyKind::Finetune)]).unwrap();
    assert_eq!(only_ft.rows.len(), 1);
    assert_eq!(only_ft.summary[0].median_gain, 1.0);
}

fn clone_bench(b: &Workbench<f32>) -> Workbench<f32> {
    Workbench {
        config: b.config.clone(),
        vision: b.vision.clone(),
        pretrain: b.pretrain.clone(),
        mm_train: b.mm_train.clone(),
        mm_eval: b.mm_eval.clone(),
        base: b.base.clone(),
        pretrain_record: b.pretrain_record.clone(),
        stage1_record: b.stage1_record.clone(),
        frozen_loss: b.frozen_loss,
    }
}

#[test]
fn text_split_needs_no_vision() {
    let b = bench();
    assert!(Split::new(&b.pretrain, None).is_ok());
    assert!(Split::new(&b.mm_train, None).is_err());
    let mut model = b.base.clone();
    let mut cfg = b.stage2_config(&TuningStrategy::new(StrategyKind::LayerNorm), -1.0, 0);
    let split = Split::new(&b.pretrain, None).unwrap();
    assert!(train(&mut model, split, split, &cfg).is_err());
    cfg.lr = 1e-3;
    cfg.warmup_ratio = 1.0;
    assert!(train(&mut model, split, split, &cfg).is_err());
}
