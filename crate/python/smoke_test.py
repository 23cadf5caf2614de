"""Smoke test for the advclr extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import json
import math
import tempfile
from pathlib import Path

import numpy as np

import advclr


def main():
    train = advclr.Dataset.synthetic(4, 16, 8, seed=0)
    test = advclr.Dataset.synthetic(4, 8, 8, seed=5000, split="test")
    assert len(train) == 64 and train.num_classes == 4
    assert train.class_counts() == [16] * 4
    x = train.images().numpy()
    assert x.shape == (64, 3, 8, 8) and 0.0 <= x.min() and x.max() <= 1.0

    spec = advclr.EncoderSpec.toy_conv([8, 16], 8)
    cfg = advclr.PretrainConfig(2, seed=1)
    cfg.batch_size = 32
    cfg.lr0 = 0.05
    cfg.projection_dim = 16
    cfg.pgd = advclr.AttackConfig("pgd", 0.03, num_steps=3, objective="contrastive")
    cfg.cw = advclr.AttackConfig("cw", 0.03, num_steps=3, objective="embedding_margin")
    cfg.set_augment(crop_pad=1)
    assert json.loads(cfg.to_json())["batch_size"] == 32

    model, log = advclr.pretrain(train, spec, cfg)
    records = [json.loads(line) for line in log]
    assert len(records) == 2 and all(math.isfinite(r["loss"]) for r in records)
    again, _ = advclr.pretrain(train, spec, cfg)
    assert again.get("classifier.weight").tolist() == model.get("classifier.weight").tolist()
    assert again.scope_values("encoder") == model.scope_values("encoder")

    probe, _ = advclr.finetune(train, model, advclr.FinetuneConfig(3, seed=1, lr=1e-2))
    assert probe.scope_values("encoder") == model.scope_values("encoder")

    z = model.project(model.encode(train.take(8).images())).numpy()
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-4)
    zt = advclr.Tensor.from_numpy(z)
    loss = advclr.adv_contrastive(zt, zt, zt, temperature=0.5)
    assert loss > 0.0
    assert advclr.info_nce(zt, zt, advclr.Tensor.from_numpy(z[::-1].copy())) > 0.0

    eps = 0.03
    batch = test.take(8)
    adv = advclr.attack(probe, batch.images(), advclr.AttackConfig("pgd", eps), labels=batch.labels, seed=3)
    delta = adv.numpy() - batch.images().numpy()
    assert np.abs(delta).max() <= eps + 1e-6
    assert adv.numpy().min() >= 0.0 and adv.numpy().max() <= 1.0

    clean = advclr.clean_accuracy(probe, test)
    assert advclr.robust_accuracy(probe, test, advclr.AttackConfig("fgsm", 0.0)) == clean

    report = advclr.evaluate({"act": probe}, test, [0.0, eps])
    assert report.robust("act", "pgd", 0.0) == clean
    assert len(report.to_csv().strip().splitlines()) == 1 + 6
    with tempfile.TemporaryDirectory() as d:
        ckpt = Path(d) / "model.ckpt"
        probe.save(str(ckpt))
        loaded = advclr.Model.load(str(ckpt))
        assert loaded.metadata["stage"] == "finetune"
        assert loaded.predict(batch.images()) == probe.predict(batch.images())
        report.write(str(Path(d) / "report.json"))
        assert advclr.Report.read(str(Path(d) / "report.json")).clean() == report.clean()

    assert advclr.gradcheck(seed=0) <= 1e-4

    try:
        advclr.AttackConfig("pgdd", 0.1)
    except advclr.ConfigError:
        pass
    else:
        raise AssertionError("unknown attack accepted")
    try:
        advclr.Model.load("/nonexistent.ckpt")
    except advclr.IoError:
        pass
    else:
        raise AssertionError("missing checkpoint loaded")

    print(report.table())
    print("smoke test passed")


if __name__ == "__main__":
    main()
