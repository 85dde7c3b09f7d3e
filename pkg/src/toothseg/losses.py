"""Segmentation losses: cross entropy for both heads and the
curvature-ranked focal loss over hard points."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch

PROB_FLOOR = 1e-12
RANKING_SIGNALS = ("point", "gaussian", "mean", "none")


@dataclass
class LossWeights:
    omega_geo: float = 0.001
    omega_aux: float = 1.0
    gamma: float = 2.0
    r: float = 0.4
    ranking_signal: str = "point"

    def __post_init__(self):
        if not 0.0 < self.r <= 1.0:
            raise ValueError(f"hard-point ratio r must be in (0, 1], got {self.r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.omega_geo < 0 or self.omega_aux < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ranking_signal not in RANKING_SIGNALS:
            raise ValueError(f"ranking_signal must be one of {RANKING_SIGNALS}")


@dataclass
class HardPointSet:
    indices: np.ndarray
    curvatures: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass
class LossReport:
    seg: float
    geo: float
    aux: float
    total: float

    def as_dict(self):
        return asdict(self)


def hard_point_count(n: int, r: float) -> int:
    # guard against 0.4 * 10 = 4.000000000000001 rounding up to 5
    return min(n, math.ceil(round(r * n, 9)))


def select_hard_points(curvatures, r: float) -> HardPointSet:
    """Indices of the ceil(r * N) largest ranking values.

    Ties are broken by ascending original index.
    """
    values = np.asarray(curvatures, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot select hard points from an empty set")
    if not 0.0 < r <= 1.0:
        raise ValueError(f"r must be in (0, 1], got {r}")
    order = np.argsort(-values, kind="stable")
    idx = order[:hard_point_count(values.size, r)]
    return HardPointSet(indices=idx, curvatures=values[idx])


def _check_labels(labels: torch.Tensor, n_classes: int):
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")


def _true_class_prob(probs, labels):
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, probs.shape[-1])
    p = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return p.clamp_min(PROB_FLOOR)


def geo_loss(probs, labels, hard: HardPointSet, gamma: float = 2.0) -> torch.Tensor:
    """Focal-modulated cross entropy summed over the hard points.

    ``-sum_{i in S} (1 - p_i)^gamma * log(p_i)`` with ``p_i`` the predicted
    probability of the true class of point ``i``.
    """
    idx = torch.as_tensor(np.asarray(hard.indices), dtype=torch.long)
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    p = _true_class_prob(probs[idx], labels[idx])
    return -((1.0 - p) ** gamma * torch.log(p)).sum()


def seg_loss(probs, labels) -> torch.Tensor:
    """Mean negative log-likelihood over all points."""
    return -torch.log(_true_class_prob(probs, labels)).mean()


def aux_loss(probs, binary_labels) -> torch.Tensor:
    """Mean tooth/gingiva negative log-likelihood."""
    return seg_loss(probs, binary_labels)


def aux_labels(labels):
    """Binary tooth labels: 1 for any tooth class, 0 for gingiva."""
    if isinstance(labels, torch.Tensor):
        return (labels != 0).long()
    return (np.asarray(labels) != 0).astype(np.int64)


def total_loss(seg, geo, aux, w: LossWeights | None = None) -> LossReport:
    """Weighted combination ``seg + omega_geo * geo + omega_aux * aux``."""
    w = w or LossWeights()
    total = seg + w.omega_geo * geo + w.omega_aux * aux
    f = lambda x: float(x.detach()) if isinstance(x, torch.Tensor) else float(x)
    return LossReport(seg=f(seg), geo=f(geo), aux=f(aux), total=f(total))


def ranking_values(cloud, signal: str) -> np.ndarray:
    """Raw per-row values used to rank points for the hard set."""
    if signal == "none":
        return np.zeros(cloud.n)
    return np.abs(cloud.ranking[signal]) if signal == "gaussian" else cloud.ranking[signal]


def batch_losses(seg_logits, aux_logits, clouds, w: LossWeights):
    """Differentiable (total, seg, geo, aux) for a batch of clouds.

    ``seg`` and ``aux`` average over every point of the batch; ``geo`` is
    the per-cloud hard-point sum averaged over clouds.
    """
    labels = torch.as_tensor(np.stack([c.labels for c in clouds]), dtype=torch.long)
    seg_p = torch.softmax(seg_logits, dim=-1)
    aux_p = torch.softmax(aux_logits, dim=-1)
    l_seg = seg_loss(seg_p.reshape(-1, seg_p.shape[-1]), labels.reshape(-1))
    l_aux = aux_loss(aux_p.reshape(-1, 2), aux_labels(labels).reshape(-1))
    geo_terms = []
    for b, cloud in enumerate(clouds):
        hard = select_hard_points(ranking_values(cloud, w.ranking_signal), w.r)
        geo_terms.append(geo_loss(seg_p[b], labels[b], hard, w.gamma))
    l_geo = torch.stack(geo_terms).mean()
    total = l_seg + w.omega_geo * l_geo + w.omega_aux * l_aux
    return total, l_seg, l_geo, l_aux
