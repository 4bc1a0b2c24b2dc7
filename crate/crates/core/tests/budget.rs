use normadapt::budget::{count, optimizer_state_bytes, table2_reproduction, ArchPreset};
use normadapt::model::{Model, ModelConfig, NormKind};
use normadapt::peft::{apply_strategy, StrategyKind, TuningStrategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn all_strategies() -> Vec<TuningStrategy> {
    let mut v: Vec<TuningStrategy> = StrategyKind::PAPER
        .into_iter()
        .map(TuningStrategy::new)
        .collect();
    v.push(TuningStrategy::connector_only());
    v.push(TuningStrategy::layernorm_only());
    v
}

#[test]
fn analytic_counts_match_instantiated_models() {
    for cfg in [
        ModelConfig::mini(),
        ModelConfig {
            norm_kind: NormKind::Rms,
            ..ModelConfig::mini()
        },
    ] {
        let preset = ArchPreset::from_config("mini", cfg.clone(), 0);
        for strategy in all_strategies() {
            let mut model = Model::<f32>::build(cfg.clone(), 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (report, _) = apply_strategy(&strategy, &mut model.params, &mut rng).unwrap();
            let budget = count(&preset, &strategy, 4).unwrap();
            assert_eq!(budget.trainable, report.trainable, "{}", strategy.label());
            assert_eq!(budget.total, report.total, "{}", strategy.label());
        }
    }
}

#[test]
fn published_cells_within_tolerance() {
    let cells = table2_reproduction(&[ArchPreset::llama7b(), ArchPreset::llama13b()]).unwrap();
    assert_eq!(cells.len(), 12);
    for c in &cells {
        match c.tolerance {
            Some(tol) => assert!(
                c.abs_diff <= tol,
                "{} {}: {} vs {}",
                c.preset,
                c.strategy,
                c.computed,
                c.paper
            ),
            None => assert_eq!(c.strategy, "lora"),
        }
    }
}

#[test]
fn trainable_share_grows_with_selection() {
    let preset = ArchPreset::llama7b();
    let pct = |k| {
        count(&preset, &TuningStrategy::new(k), 2)
            .unwrap()
            .percentage
    };
    let order = [
        StrategyKind::LayerNormSimple,
        StrategyKind::LayerNorm,
        StrategyKind::AttnQv,
        StrategyKind::AttnMlp,
        StrategyKind::Finetune,
    ];
    for w in order.windows(2) {
        assert!(pct(w[0]) < pct(w[1]), "{} !< {}", w[0], w[1]);
    }
    let mut rank_pct = Vec::new();
    for r in [4, 8, 16, 32, 64] {
        rank_pct.push(
            count(
                &preset,
                &TuningStrategy::new(StrategyKind::Lora).with_rank(r),
                2,
            )
            .unwrap()
            .trainable,
        );
    }
    assert!(rank_pct.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn optimizer_memory_is_linear() {
    for bytes in [1, 2, 4] {
        let r = count(
            &ArchPreset::llama13b(),
            &TuningStrategy::new(StrategyKind::LayerNorm),
            bytes,
        )
        .unwrap();
        assert_eq!(
            r.optimizer_state_bytes,
            optimizer_state_bytes(r.trainable, 1) * bytes as u64
        );
    }
    assert_eq!(
        optimizer_state_bytes(2 * 1000, 2),
        2 * optimizer_state_bytes(1000, 2)
    );
    assert_eq!(optimizer_state_bytes(0, 4), 0);
}
