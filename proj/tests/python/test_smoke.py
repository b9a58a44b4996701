import json
import math

import numpy as np
import pytest

import cre

SMALL = {
    "data": {"image_size": 16},
    "model": {"seq_len": 16, "embed_dim": 32, "encoder_depth": 1, "decoder_depth": 1,
              "num_heads": 2, "contrastive_dim": 16},
    "augment": {"out_h": 16, "out_w": 16},
    "train": {"base_lr": 4e-3, "batch_size": 8, "total_epochs": 2, "warmup_epochs": 1},
}


def test_closed_form_losses():
    logits = np.full((64, 64), 0.3, dtype=np.float32)
    rows = np.arange(35, dtype=np.int64)
    targets = rows % 64
    assert cre.reconstruction_loss(logits, targets, rows) == pytest.approx(math.log(64), abs=1e-5)
    z = np.full((4, 4), 0.5, dtype=np.float32)
    assert cre.infonce_loss(z, 0.2) == pytest.approx(math.log(3), abs=1e-5)
    assert cre.infonce_loss(np.array([[0.6, 0.8], [1.0, 0.0]], dtype=np.float32)) == 0.0


def test_masking():
    assert cre.masked_count(256, 0.55) == 140
    mask = cre.sample_mask(64, 0.55, seed=3)
    assert mask.dtype == np.bool_
    assert mask.sum() == 35
    assert np.array_equal(mask, cre.sample_mask(64, 0.55, seed=3))


def test_config_errors_are_typed():
    with pytest.raises(cre.ValidationError, match="train.lamda"):
        cre.resolve_config({"train": {"lamda": 1}})
    with pytest.raises(cre.ParseError):
        cre.resolve_config("{")
    paired = cre.resolve_config({}, ["tokenizer.codebook_size=32", "model.vocab_size=32"])
    assert paired["model"]["vocab_size"] == 32
    assert cre.default_config()["train"]["lambda"] == 0.2


def test_tokenizer_round_trip(tmp_path):
    images, labels = cre.make_synthetic(images=16, size=16, seed=1)
    assert images.shape == (16, 16, 16, 3)
    assert list(labels[:8]) == list(range(8))
    cb = cre.Codebook.fit(images, size=64, patches_per_image=8)
    grid = cb.tokenize(images[0])
    assert grid.shape == (4, 4)
    assert grid.min() >= 0 and grid.max() < 64
    cb.save(str(tmp_path / "a.creq"))
    cre.Codebook.load(str(tmp_path / "a.creq")).save(str(tmp_path / "b.creq"))
    assert (tmp_path / "a.creq").read_bytes() == (tmp_path / "b.creq").read_bytes()


def test_pretrain_and_probe(tmp_path):
    images, labels = cre.make_synthetic(images=32, size=16, seed=2, separable=True)
    cb = cre.Codebook.fit(images, size=64, patches_per_image=8)
    model = cre.Model(json.dumps(SMALL))
    log = model.pretrain(images, cb)
    assert len(log) == 8
    for entry in log:
        assert entry["combined"] == pytest.approx(entry["reconstruction"] + 0.2 * entry["contrastive"])
    assert model.step == 8

    feats = model.features(images, cb)
    assert feats.shape == (32, 32)
    test, train = cre.linear_probe(feats[:24], labels[:24], feats[24:], labels[24:], 8, epochs=5)
    assert 0.0 <= test["top1"] <= 1.0
    assert len(test["per_class"]) == 8

    model.save(str(tmp_path / "m.cre"))
    other = cre.Model(json.dumps(SMALL))
    other.load(str(tmp_path / "m.cre"))
    assert np.array_equal(other.features(images, cb), feats)
    wider = cre.Model(json.dumps({**SMALL, "model": {**SMALL["model"], "embed_dim": 64}}))
    with pytest.raises(cre.FormatError):
        wider.load(str(tmp_path / "m.cre"))


def test_gradcheck_and_cli():
    rows = cre.gradcheck(seeds=2)
    assert rows[-1][0] == "cre_micro_model"
    assert all(passed for _, _, _, passed in rows)
    code, out, _ = cre.run_cli(["gradcheck", "--seeds", "1"])
    assert code == 0
    assert "gradcheck passed" in out
    code, _, _ = cre.run_cli(["no-such-command"])
    assert code == 1
