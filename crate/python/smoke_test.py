"""Smoke test for the `hvc` extension module.

Build and install first:  maturin develop -m crates/py/Cargo.toml
(or `pip install crates/py`), then run:  python python/smoke_test.py
"""

import json
import math
import os
import tempfile

import hvc


def main():
    assert "att-bilstm" in hvc.presets()
    config = json.loads(hvc.preset_config("att-bilstm"))
    config["encoder"]["hidden"] = 8
    config["optimizer"]["epochs"] = 2
    config_json = json.dumps(config)

    spec = json.dumps({"classes": 12, "coarse_classes": 3, "visual_dim": 8, "audio_dim": 2, "seed": 3})
    with tempfile.TemporaryDirectory() as d:
        train = os.path.join(d, "train.sgv")
        valid = os.path.join(d, "valid.sgv")
        sums = hvc.generate_dataset(train, 120, spec_json=spec)
        hvc.generate_dataset(valid, 40, skip=10_000, spec_json=spec)
        assert len(sums) == 120 and len(sums[0]) == 64

        videos = hvc.read_records(valid)
        assert len(videos) == 40 and videos[0].frames == len(videos[0].visual)
        copy = os.path.join(d, "copy.sgv")
        assert hvc.write_records(copy, videos) == hvc.write_records(os.path.join(d, "again.sgv"), videos)

        ckpt = os.path.join(d, "m.sgc")
        report = json.loads(hvc.train(config_json, train, valid, ckpt))
        assert len(report["epochs"]) == 2
        assert all(math.isfinite(e["train_loss"]) for e in report["epochs"])

        model = hvc.Model.load(ckpt)
        assert model.checkpoint_id() == report["checkpoint_id"]
        scores = model.scores(videos[0])
        assert len(scores) == model.classes == 12
        assert all(0.0 <= s <= 1.0 for s in scores)
        assert len(model.top_k(videos[0], 5)) == 5

        preds = os.path.join(d, "p.sgp")
        hvc.predict(ckpt, valid, preds, k=5)
        gap = hvc.evaluate(preds, valid, k=5)
        assert 0.0 <= gap <= 1.0

        avg = os.path.join(d, "avg.sgp")
        hvc.ensemble(avg, [preds, preds])
        assert hvc.read_predictions(avg) == hvc.read_predictions(preds)

        truth = {v.id: v.labels for v in videos}
        perfect = {v.id: [(c, 1.0) for c in v.labels] for v in videos}
        assert hvc.gap_at_k(perfect, truth, 20) == 1.0

    fresh = hvc.Model("chain", 4, 1, [0, 0, 1, 1, 2, 2], seed=1)
    assert fresh.num_parameters > 0
    assert hvc.gradcheck("hmoe", trials=10) < 1e-4

    try:
        hvc.Model.load("/nonexistent.sgc")
    except hvc.HvcError:
        pass
    else:
        raise AssertionError("loading a missing checkpoint must raise")

    print(f"smoke test passed (validation GAP@5 after 2 epochs: {gap:.4f})")


if __name__ == "__main__":
    main()
