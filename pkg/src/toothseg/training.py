"""End-to-end training loop, augmentation and the key-value config format.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment. Values are parsed as Python literals when possible (numbers,
booleans, tuples, quoted strings) and kept as bare strings otherwise::

    epochs = 300
    network = tiny
    omega_geo = 0.001
    ranking_signal = point
    train_dir = data/train
"""
from __future__ import annotations

import ast
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .geometry import FeatureCloud, build_features, downsample
from .losses import LossWeights, batch_losses
from .mesh import atomic_write_text, build_adjacency
from .network import (PRESETS, NetworkConfig, SegmentationNet, cloud_tensors, load_checkpoint,
                      save_checkpoint, shape_audit)
from .synthetic import Sample, load_dataset

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; the last good checkpoint is kept."""


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 2
    lr: float = 1e-3
    lr_min: float = 1e-5
    seed: int = 0
    n_points: int = 10000
    network: str = "default"
    network_overrides: dict = field(default_factory=dict)
    omega_geo: float = 0.001
    omega_aux: float = 1.0
    gamma: float = 2.0
    r: float = 0.4
    ranking_signal: str = "point"
    augment: bool = True
    rotate_deg: float = 30.0
    translate: float = 0.05
    jitter: float = 0.005
    sampling: str = "random"
    checkpoint_every: int = 50
    train_dir: str | None = None
    val_dir: str | None = None
    out_dir: str = "run"
    val_seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.network not in PRESETS:
            raise ValueError(f"unknown network preset {self.network!r}; choose from {sorted(PRESETS)}")
        for key in ("train_dir", "val_dir"):
            path = getattr(self, key)
            if path is not None and not Path(path).is_dir():
                raise FileNotFoundError(f"{key} {path!r} does not exist")
        self.loss_weights  # validates ranges

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.omega_geo, self.omega_aux, self.gamma, self.r, self.ranking_signal)

    @property
    def network_config(self) -> NetworkConfig:
        base = asdict(PRESETS[self.network])
        base.update(self.network_overrides)
        return NetworkConfig.from_dict(base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        net_keys = {f.name for f in fields(NetworkConfig)}
        args, overrides = {}, dict(d.get("network_overrides", {}))
        for k, v in d.items():
            if k in known:
                args[k] = v
            elif k in net_keys:
                overrides[k] = v
            else:
                raise ValueError(f"unknown config key {k!r}")
        args["network_overrides"] = overrides
        return cls(**args)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            lowered = value.lower()
            out[key] = {"true": True, "false": False, "none": None}.get(lowered, value)
    return out


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


# -------------------------------------------------------------- augmentation

def augment(cloud: FeatureCloud, seed: int, rotate_deg: float = 30.0, translate: float = 0.05,
            jitter: float = 0.005) -> FeatureCloud:
    """Random rotation about z, translation and coordinate jitter.

    Normals rotate with the coordinates; curvature columns are left alone
    since both curvatures are invariant under rigid motion.
    """
    rng = np.random.default_rng(seed)
    angle = np.deg2rad(rng.uniform(-rotate_deg, rotate_deg))
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    shift = rng.uniform(-translate, translate, size=3)
    noise = rng.normal(0.0, 1.0, size=(cloud.n, 3)) * jitter
    feats = cloud.features.copy()
    if rotate_deg:
        feats[:, 0:3] = feats[:, 0:3] @ rot.T
        feats[:, 3:6] = feats[:, 3:6] @ rot.T
    feats[:, 0:3] += shift + noise
    out = cloud.take(np.arange(cloud.n))
    out.features = feats
    return out


# ------------------------------------------------------------------ training

def prepare(samples: list[Sample]) -> list[FeatureCloud]:
    """Full-resolution labeled feature clouds, computed once per sample."""
    return [build_features(s.mesh, build_adjacency(s.mesh), s.jaw, labels=s.labels)
            for s in samples]


def lr_at(step: int, total: int, lr: float, lr_min: float) -> float:
    """Cosine decay from ``lr`` to ``lr_min`` over ``total`` steps."""
    if total <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * step / (total - 1)))


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _optimizer_tensors(model, optim) -> dict:
    out = {}
    for name, p in model.named_parameters():
        state = optim.state.get(p)
        if state:
            out[f"optim.exp_avg.{name}"] = state["exp_avg"]
            out[f"optim.exp_avg_sq.{name}"] = state["exp_avg_sq"]
    return out


def _restore_optimizer(model, optim, extra: dict, step: int):
    for name, p in model.named_parameters():
        key = f"optim.exp_avg.{name}"
        if key in extra:
            optim.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": extra[key].clone(),
                "exp_avg_sq": extra[f"optim.exp_avg_sq.{name}"].clone(),
            }


@dataclass
class TrainResult:
    model: SegmentationNet
    history: list
    checkpoint: Path
    log_path: Path
    metrics: dict | None = None


def train(config: TrainConfig, samples: list[Sample] | None = None,
          val_samples: list[Sample] | None = None, resume=None,
          prepared: list[FeatureCloud] | None = None) -> TrainResult:
    """Optimize a fresh (or resumed) network on labeled meshes.

    Writes ``train_log.jsonl`` (one loss report per step), ``checkpoint.ckpt``
    (latest) plus ``checkpoint_eNNNN.ckpt`` every ``checkpoint_every`` epochs
    and at the end, and ``metrics.json`` when validation samples are
    available. ``resume`` continues from a checkpoint of the same config;
    the resumed steps reproduce the uninterrupted run bit for bit.
    """
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if samples is None and prepared is None:
        if config.train_dir is None:
            raise ValueError("no training data: pass samples or set train_dir")
        samples = load_dataset(config.train_dir)
    if val_samples is None and config.val_dir is not None:
        val_samples = load_dataset(config.val_dir)
    clouds = prepared if prepared is not None else prepare(samples)
    weights = config.loss_weights

    start_epoch, step = 0, 0
    if resume is not None:
        model, meta, extra = load_checkpoint(resume)
        start_epoch, step = meta["epoch"], meta["step"]
    else:
        model = SegmentationNet(config.network_config, seed=config.seed)
    shape_audit(model)
    optim = torch.optim.Adam(model.parameters(), lr=config.lr)
    if resume is not None:
        _restore_optimizer(model, optim, extra, step)

    steps_per_epoch = math.ceil(len(clouds) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    log_path = out / "train_log.jsonl"
    ckpt_path = out / "checkpoint.ckpt"
    history = []
    mode = "a" if resume is not None else "w"

    def checkpoint(epoch, keep=False):
        args = (model, _optimizer_tensors(model, optim),
                {"epoch": epoch, "step": step, "train_config": _jsonable(config)})
        save_checkpoint(ckpt_path, *args)
        if keep:
            save_checkpoint(out / f"checkpoint_e{epoch:04d}.ckpt", *args)

    with open(log_path, mode) as log_fh:
        for epoch in range(start_epoch, config.epochs):
            model.train()
            order = np.random.default_rng([config.seed, epoch]).permutation(len(clouds))
            for b0 in range(0, len(order), config.batch_size):
                batch = []
                for i in order[b0:b0 + config.batch_size]:
                    s = _derive_seed(config.seed, epoch, i)
                    c = downsample(clouds[i], config.n_points, seed=s, method=config.sampling)
                    if config.augment:
                        c = augment(c, s + 1, config.rotate_deg, config.translate, config.jitter)
                    batch.append(c)
                lr = lr_at(step, total_steps, config.lr, config.lr_min)
                for group in optim.param_groups:
                    group["lr"] = lr
                torch.manual_seed(_derive_seed(config.seed, step, 7))
                feats, cats = cloud_tensors(batch)
                seg, aux = model(feats, cats)
                total, l_seg, l_geo, l_aux = batch_losses(seg, aux, batch, weights)
                record = {"step": step, "epoch": epoch, "L_seg": l_seg.item(),
                          "L_geo": l_geo.item(), "L_aux": l_aux.item(),
                          "L_total": total.item(), "lr": lr}
                if not all(math.isfinite(record[k]) for k in ("L_seg", "L_geo", "L_aux", "L_total")):
                    checkpoint(epoch)
                    raise TrainingDiverged(f"non-finite loss at step {step}: {record}")
                optim.zero_grad(set_to_none=True)
                total.backward()
                optim.step()
                log_fh.write(json.dumps(record) + "\n")
                history.append(record)
                step += 1
            log_fh.flush()
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
                checkpoint(epoch + 1, keep=True)
            log.info("epoch %d  L_total %.4f", epoch, history[-1]["L_total"] if history else float("nan"))

    metrics = None
    if val_samples:
        from .inference import evaluate_samples
        metrics = evaluate_samples(model, val_samples, n_points=config.n_points,
                                   seed=config.val_seed)
        atomic_write_text(out / "metrics.json", json.dumps(metrics, indent=2) + "\n")
    return TrainResult(model, history, ckpt_path, log_path, metrics)


def _jsonable(config: TrainConfig) -> dict:
    d = asdict(config)
    return json.loads(json.dumps(d, default=str))


def point_accuracy(model: SegmentationNet, clouds: list[FeatureCloud], n_points: int,
                   seed: int = 0) -> float:
    """Fraction of correctly labeled points over seeded subsamples of ``clouds``."""
    model.eval()
    correct = total = 0
    with torch.no_grad():
        for i, cloud in enumerate(clouds):
            c = downsample(cloud, n_points, seed=_derive_seed(seed, i))
            feats, cats = cloud_tensors(c)
            seg, _ = model(feats, cats)
            correct += int((seg[0].argmax(-1).numpy() == c.labels).sum())
            total += c.n
    return correct / total
