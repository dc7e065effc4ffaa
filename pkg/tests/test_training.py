import numpy as np
import pytest
import torch

from evlines import config as cfglib
from evlines.errors import ConfigError, SchemaError
from evlines.training import (ModelConfig, TrainConfig, build_model, fit, load_checkpoint, predict,
                              read_checkpoint, save_checkpoint)


def _toy_model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = ModelConfig.toy(**kw)
    return build_model(cfg), cfg


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model, cfg = _toy_model()
        save_checkpoint(tmp_path / "c.npz", model, cfg, {"steps": 3})
        back, bcfg = load_checkpoint(tmp_path / "c.npz")
        assert bcfg.to_dict() == cfg.to_dict()
        for (k, a), (k2, b) in zip(model.state_dict().items(), back.state_dict().items()):
            assert k == k2
            assert torch.equal(a, b)
        assert read_checkpoint(tmp_path / "c.npz")[1]["extra"] == {"steps": 3}

    def test_same_outputs_after_reload(self, tmp_path, toy_set):
        model, cfg = _toy_model()
        save_checkpoint(tmp_path / "c.npz", model, cfg)
        back, _ = load_checkpoint(tmp_path / "c.npz", cfg)
        a, b = predict(model, toy_set, cfg), predict(back, toy_set, cfg)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa["lines"], pb["lines"])

    def test_incompatible_config(self, tmp_path):
        model, cfg = _toy_model()
        save_checkpoint(tmp_path / "c.npz", model, cfg)
        with pytest.raises(SchemaError, match="feature_channels"):
            load_checkpoint(tmp_path / "c.npz", ModelConfig.toy(backbone={"feature_channels": 16, "head_dim": 4}))
        with pytest.raises(SchemaError, match="bins"):
            load_checkpoint(tmp_path / "c.npz", ModelConfig.toy(bins=3))

    def test_decode_settings_may_differ(self, tmp_path):
        model, cfg = _toy_model()
        save_checkpoint(tmp_path / "c.npz", model, cfg)
        _, got = load_checkpoint(tmp_path / "c.npz", ModelConfig.toy(detector={"score_threshold": 0.3}))
        assert got.detector.score_threshold == 0.3

    def test_not_a_checkpoint(self, tmp_path):
        np.savez(tmp_path / "x.npz", a=np.zeros(3))
        with pytest.raises(SchemaError):
            read_checkpoint(tmp_path / "x.npz")


class TestFit:
    def test_max_steps_and_history(self, toy_set):
        model, cfg = _toy_model()
        res = fit(model, toy_set, cfg, TrainConfig(epochs=5, max_steps=3, batch_size=2))
        assert res.steps == 3
        assert [h["epoch"] for h in res.history] == [1, 2]
        assert all(np.isfinite(h["total"]) for h in res.history)

    def test_deterministic_given_seed(self, toy_set):
        losses = []
        for _ in range(2):
            model, cfg = _toy_model(seed=5)
            res = fit(model, toy_set, cfg, TrainConfig(epochs=1, batch_size=2, seed=5))
            losses.append(res.history[0]["total"])
        assert losses[0] == losses[1]

    def test_channel_mismatch(self):
        from evlines.fusion_backbone import BackboneConfig

        with pytest.raises(ConfigError):
            ModelConfig(BackboneConfig.toy(event_channels=4), grid_kind="est", bins=5)


class TestLayeredConfig:
    def test_defaults_match_training_recipe(self):
        cfg = cfglib.resolve()
        t = cfglib.train_config(cfg)
        assert (t.lr, t.weight_decay, t.batch_size, t.epochs, t.decay_epoch) == (4e-4, 1e-4, 4, 30, 25)

    def test_override_precedence(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text('{"train": {"lr": 0.01}, "seed": 2}')
        cfg = cfglib.resolve(str(f), ["train.lr=0.02"], seed=7)
        assert cfg["train"]["lr"] == 0.02 and cfg["seed"] == 7
        assert cfglib.train_config(cfg).seed == 7

    def test_preset_from_file(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("preset: toy\n")
        assert cfglib.resolve(str(f))["model"]["backbone"]["input_size"] == 64

    @pytest.mark.parametrize("bad", ["train.nope=1", "model.backbone=3", "noequals", "synth.contrast=-1"])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            cfglib.resolve(overrides=[bad])

    def test_loss_weights_replaced_whole(self):
        cfg = cfglib.resolve(overrides=['model.detector.loss_weights={"cls": 2.0}'])
        assert cfg["model"]["detector"]["loss_weights"] == {"cls": 2.0}
