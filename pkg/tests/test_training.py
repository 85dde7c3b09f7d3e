import json
import math

import numpy as np
import pytest
import torch

import toothseg.training as training
from toothseg.geometry import build_features
from toothseg.losses import LossWeights, aux_labels, batch_losses
from toothseg.mesh import build_adjacency
from toothseg.network import SegmentationNet, cloud_tensors, read_checkpoint
from toothseg.synthetic import synthetic_samples, write_dataset
from toothseg.training import (TrainConfig, TrainingDiverged, augment, lr_at, parse_config_text,
                               point_accuracy, prepare, train)

SMALL_JAW = dict(tooth_count=6, n_along=48, n_across=8)


@pytest.fixture(scope="module")
def samples():
    return synthetic_samples(3, seed=0, **SMALL_JAW)


@pytest.fixture(scope="module")
def clouds(samples):
    return prepare(samples)


def quick_config(tmp_path, **kw):
    base = dict(epochs=2, batch_size=2, n_points=96, network="tiny", out_dir=str(tmp_path),
                checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_config_text_parsing():
    cfg = parse_config_text("""
        # comment
        epochs = 12
        network = tiny      # trailing comment
        omega_geo = 1e-3
        augment = false
        head_hidden = (16, 8)
        ranking_signal = 'gaussian'
    """)
    assert cfg == {"epochs": 12, "network": "tiny", "omega_geo": 1e-3, "augment": False,
                   "head_hidden": (16, 8), "ranking_signal": "gaussian"}
    tc = TrainConfig.from_dict(cfg)
    assert tc.network_config.head_hidden == (16, 8)
    assert tc.loss_weights.ranking_signal == "gaussian"
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("epochs 12")
    with pytest.raises(ValueError, match="unknown config key"):
        TrainConfig.from_dict({"epoch": 3})


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(FileNotFoundError):
        TrainConfig(train_dir=str(tmp_path / "missing"))
    with pytest.raises(ValueError):
        TrainConfig(r=0.0)


def test_augment_zero_is_identity(clouds):
    c = clouds[0]
    out = augment(c, seed=3, rotate_deg=0.0, translate=0.0, jitter=0.0)
    assert np.array_equal(out.features, c.features)
    assert np.array_equal(out.labels, c.labels)


def test_augment_rotation_properties(clouds):
    c = clouds[1]
    out = augment(c, seed=5, rotate_deg=30.0, translate=0.0, jitter=0.0)
    assert np.array_equal(out.features[:, 6:], c.features[:, 6:])
    assert np.array_equal(out.features[:, 2], c.features[:, 2])
    np.testing.assert_allclose(np.linalg.norm(out.features[:, 3:6], axis=1), 1.0, atol=1e-6)
    # rotation about z preserves planar radius
    np.testing.assert_allclose(np.hypot(*out.features[:, :2].T), np.hypot(*c.features[:, :2].T),
                               rtol=1e-12)
    full = augment(c, seed=5)
    np.testing.assert_allclose(np.linalg.norm(full.features[:, 3:6], axis=1), 1.0, atol=1e-6)
    assert not np.array_equal(full.features[:, :3], out.features[:, :3])


def test_lr_schedule():
    assert lr_at(0, 100, 1e-3, 1e-5) == 1e-3
    assert math.isclose(lr_at(99, 100, 1e-3, 1e-5), 1e-5, rel_tol=1e-12)
    vals = [lr_at(s, 100, 1e-3, 1e-5) for s in range(100)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_aux_targets_follow_main_labels(clouds):
    for c in clouds:
        assert np.array_equal(aux_labels(c.labels), (c.labels != 0).astype(int))


def test_zero_weights_log_equals_seg_loss(tmp_path, clouds):
    cfg = quick_config(tmp_path, omega_geo=0.0, omega_aux=0.0, epochs=3)
    result = train(cfg, prepared=clouds)
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert len(lines) == 3 * 2
    assert all(r["L_total"] == r["L_seg"] for r in lines)
    assert set(lines[0]) == {"step", "epoch", "L_seg", "L_geo", "L_aux", "L_total", "lr"}
    assert result.checkpoint.exists()


def test_seeded_runs_identical(tmp_path, clouds):
    a = train(quick_config(tmp_path / "a"), prepared=clouds).history
    b = train(quick_config(tmp_path / "b"), prepared=clouds).history
    c = train(quick_config(tmp_path / "c", seed=1), prepared=clouds).history
    assert a == b
    assert a != c


def test_resume_is_bit_exact(tmp_path, clouds):
    full = train(quick_config(tmp_path / "full", epochs=4, checkpoint_every=2), prepared=clouds)
    mid = tmp_path / "full" / "checkpoint_e0002.ckpt"
    header, _ = read_checkpoint(mid)
    assert header["meta"]["epoch"] == 2
    resumed = train(quick_config(tmp_path / "resumed", epochs=4, checkpoint_every=2),
                    prepared=clouds, resume=mid)
    assert resumed.history == full.history[len(full.history) - len(resumed.history):]
    assert len(resumed.history) == len(full.history) // 2
    for (k, p), q in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(p, q), k


def test_single_step_descent(clouds):
    torch.manual_seed(0)
    model = SegmentationNet(TrainConfig(network="tiny").network_config, seed=2).double()
    cloud = training.downsample(clouds[0], 96, seed=0)
    feats, cats = cloud_tensors(cloud, torch.float64)
    w = LossWeights()

    def loss():
        seg, aux = model(feats, cats)
        return batch_losses(seg, aux, [cloud], w)[0]

    before = loss()
    model.zero_grad()
    before.backward()
    with torch.no_grad():
        for p in model.parameters():
            p -= 1e-5 * p.grad
    assert loss().item() < before.item()


def test_divergence_keeps_checkpoint(tmp_path, clouds, monkeypatch):
    real = training.batch_losses
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        total, seg, geo, aux = real(*args)
        if calls["n"] == 4:
            total = total * float("nan")
        return total, seg, geo, aux

    monkeypatch.setattr(training, "batch_losses", flaky)
    with pytest.raises(TrainingDiverged, match="step 3"):
        train(quick_config(tmp_path, epochs=3), prepared=clouds)
    header, _ = read_checkpoint(tmp_path / "checkpoint.ckpt")
    assert header["meta"]["epoch"] == 1 and header["meta"]["step"] == 3


def test_train_from_directories(tmp_path, samples):
    write_dataset(samples[:2], tmp_path / "train")
    write_dataset(samples[2:], tmp_path / "val")
    cfg = quick_config(tmp_path / "run", epochs=1, train_dir=str(tmp_path / "train"),
                       val_dir=str(tmp_path / "val"))
    result = train(cfg)
    metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
    assert metrics["aggregate"]["all"]["n_samples"] == 1
    assert 0.0 <= point_accuracy(result.model, prepare(samples[2:]), 96) <= 1.0


def test_train_needs_data(tmp_path):
    with pytest.raises(ValueError, match="no training data"):
        train(quick_config(tmp_path))
