"""Smoke test for the normadapt_py extension.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`
or `pip install crates/python --no-build-isolation`.
"""

import math

import normadapt_py as na


def main():
    model = na.Model("mini", seed=1)
    total = model.param_count()
    report = model.apply_strategy("layernorm-simple")
    assert report["trainable"] == model.trainable_count()
    assert all("norm" in p for p in report["selected"]), report["selected"]

    shape, logits = model.logits([1, 2, 3, 4, 5, 6], batch=2)
    assert shape == [2, 3, model.config["vocab_size"]]
    assert all(math.isfinite(v) for v in logits)

    lora = na.Model("mini", seed=1)
    before = lora.logits([1, 2, 3], batch=1)[1]
    lora.apply_strategy("lora", seed=3)
    assert lora.logits([1, 2, 3], batch=1)[1] == before
    assert lora.param_count() > total
    assert lora.merge_lora() > 0

    cells = na.table2()
    assert len(cells) == 12
    ln7 = next(c for c in cells if c["preset"] == "llama7b" and c["strategy"] == "layernorm")
    assert abs(ln7["computed"] - 3.78) < 0.5

    budget = na.budget("llama7b", "layernorm-simple")
    assert budget["trainable"] == 32 * 2 * 4096 + 4096

    assert na.lr_schedule(30, 1000) == 2e-3
    a = na.ln_backward([0.3, -1.2, 2.5, 0.9], [1.0, 0.0, -2.0, 0.5])
    assert abs(sum(a)) < 1e-12
    assert na.check_projection([0.1, 0.7, -0.4, 2.0, 1.1])["idempotency_defect"] < 1e-12

    study = na.variance_scaling([16, 64], upstream="mean-reduced", trials=50)
    assert study["strictly_decreasing"]

    samples = na.generate("mm-adapt", 5, 14, seed=2, mixture=(1.0, 0.0, 0.0))
    assert all(s["category"] == "conversation" for s in samples)

    cfg = na.parse_config("preset = mini\nstrategy = layernorm\nlr = 3e-4\n")
    assert cfg["experiment"]["lr"] == 3e-4

    sim = model.layer_similarity([1, 2, 3, 4, 5, 6], batch=2)
    assert len(sim["matrix"]) == model.config["n_layers"]

    print("normadapt_py smoke test passed:", repr(model))


if __name__ == "__main__":
    main()
