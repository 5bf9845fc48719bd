"""Smoke test for the Python bindings. Run with `python3 python/smoke_test.py` or pytest."""

import os
import tempfile

import flexidit


def test_lora_reproduces_base_samples():
    cfg = flexidit.ModelConfig.tiny()
    base = flexidit.Model.init(cfg, seed=1, random=True)
    lora = base.flexify("lora", seed=2)
    assert lora.mode == "lora" and lora.supported() == [2, 4]
    plan = flexidit.Plan(f"weak:0,powerful:{cfg.steps}")
    a = base.sample(plan, [0, 1], [5, 6])
    b = lora.sample(plan, [0, 1], [5, 6])
    assert a == b
    assert len(a[0]) == cfg.image_shape[1] * cfg.image_shape[2]


def test_plan_compute_fraction():
    cfg = flexidit.ModelConfig.tiny()
    model = flexidit.Model.init(cfg, seed=3).flexify("lora")
    plan = flexidit.Plan(f"weak:40,powerful:{cfg.steps - 40}")
    assert str(plan).startswith("weak:40")
    assert plan.cond_sizes()[:40] == [4] * 40
    r = model.flops(plan)
    assert 0.0 < r["compute_fraction"] < 1.0
    assert r["total"] < r["baseline"]


def test_merge_matches_predictions():
    cfg = flexidit.ModelConfig.tiny()
    model = flexidit.Model.init(cfg, seed=4, random=True).flexify("lora", seed=5)
    model.randomize_adapters(6, 0.3)
    merged = model.merge_loras(4)
    x = [0.01 * k for k in range(64)]
    a = model.predict(x, t=10, p=4, class_label=2)
    b = merged.predict(x, t=10, p=4, class_label=2)
    assert max(abs(u - v) for u, v in zip(a, b)) < 1e-9


def test_training_and_checkpoints():
    data = flexidit.Dataset.synthetic("height = 8\nwidth = 8\ncount = 24\nsigma = 1.0")
    assert len(data) == 24 and len(data[0][0]) == 64
    trainer = flexidit.Trainer(flexidit.Model.init(flexidit.ModelConfig.tiny(), seed=7), "steps = 4\nbatch = 3")
    losses = trainer.run(data)
    assert len(losses) == 4 and trainer.step == 4 and trainer.flops > 0
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.fxck")
        trainer.save(path)
        loaded = flexidit.Model.load(path, ema=False)
        x = [0.0] * 64
        assert loaded.predict(x, 3, 2, 1) == trainer.model(ema=False).predict(x, 3, 2, 1)
        assert flexidit.run_cli(["flops", "-o", os.path.join(d, "flops")]) == 0
        assert flexidit.run_cli(["sample", "--bogus"]) == 2


def test_statistics():
    same = flexidit.mmd2([[0.0], [1.0], [2.0]], [[0.0], [1.0], [2.0]], [1.0])
    far = flexidit.mmd2([[0.0], [0.1], [0.2]], [[5.0], [5.1], [5.2]], [1.0])
    assert far > same
    assert flexidit.spearman([1, 2, 3], [3, 2, 1]) == -1.0


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"{name} ok")
