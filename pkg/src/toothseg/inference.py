"""Full-resolution inference: seeded chunking of every face centroid into
fixed-size sub-clouds, logit merging and mapping back to mesh faces."""
from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import FeatureCloud, build_features
from .mesh import TriMesh, build_adjacency, save_labels, save_mesh
from .metrics import aggregate, evaluate
from .network import SegmentationNet, cloud_tensors

GINGIVA_PINK = (1.0, 0.71, 0.76)


def _palette():
    colors = [GINGIVA_PINK]
    for k in range(1, 33):
        colors.append(colorsys.hsv_to_rgb((k * 0.61803398875) % 1.0, 0.7, 0.92))
    return np.array(colors)


#: 33 RGB colors in [0, 1]; entry 0 (gingiva) is pink, teeth use golden-ratio hues.
PALETTE = _palette()


@dataclass
class SegmentationResult:
    face_labels: np.ndarray
    aux_labels: np.ndarray
    face_probs: np.ndarray | None = None
    rounds: int = 0
    padded: int = 0
    seed: int = 0
    checkpoint_id: str = ""
    chunks: list = field(default_factory=list, repr=False)

    def provenance(self) -> dict:
        return {"rounds": self.rounds, "padded": self.padded, "seed": self.seed,
                "checkpoint_id": self.checkpoint_id}


def chunk_indices(total: int, n: int, seed: int) -> tuple[list[np.ndarray], int]:
    """Split ``range(total)`` into ceil(total / n) chunks of exactly ``n`` rows.

    Rows are permuted with ``seed``. The last chunk is topped up with rows
    already used by earlier chunks (or, for a single short chunk, resampled
    from itself). Returns the chunks and the number of padded rows.
    """
    if n <= 0:
        raise ValueError(f"chunk size must be positive, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(total)
    rounds = math.ceil(total / n)
    chunks = [perm[i * n:(i + 1) * n] for i in range(rounds)]
    pad = rounds * n - total
    if pad:
        covered = perm[:(rounds - 1) * n]
        if len(covered) >= pad:
            extra = rng.choice(covered, size=pad, replace=False)
        else:
            extra = rng.choice(perm, size=pad, replace=True)
        chunks[-1] = np.concatenate([chunks[-1], extra])
    return chunks, pad


def infer_cloud(model: SegmentationNet, cloud: FeatureCloud, n_points: int = 10000,
                seed: int = 0, export_probs: bool = False,
                checkpoint_id: str = "") -> SegmentationResult:
    """Label every row of a full-resolution feature cloud."""
    total = cloud.n
    k = model.config.k_nn
    if total < k + 1:
        raise ValueError(f"mesh has {total} faces, need at least k_nn + 1 = {k + 1}")
    chunks, pad = chunk_indices(total, n_points, seed)
    dtype = next(model.parameters()).dtype
    seg_sum = torch.zeros(total, model.config.n_classes, dtype=torch.float64)
    aux_sum = torch.zeros(total, model.config.n_aux, dtype=torch.float64)
    hits = torch.zeros(total, dtype=torch.float64)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for rows in chunks:
                feats, cats = cloud_tensors(cloud.take(rows), dtype)
                seg, aux = model(feats, cats)
                idx = torch.as_tensor(rows)
                seg_sum.index_add_(0, idx, seg[0].to(torch.float64))
                aux_sum.index_add_(0, idx, aux[0].to(torch.float64))
                hits.index_add_(0, idx, torch.ones(len(rows), dtype=torch.float64))
    finally:
        model.train(was_training)
    seg_mean = seg_sum / hits[:, None]
    aux_mean = aux_sum / hits[:, None]
    order = np.argsort(cloud.source_face)
    labels = seg_mean.argmax(-1).numpy()[order]
    aux_lab = aux_mean.argmax(-1).numpy()[order]
    probs = torch.softmax(seg_mean, -1).numpy()[order] if export_probs else None
    return SegmentationResult(labels.astype(np.int64), aux_lab.astype(np.int64), probs,
                              rounds=len(chunks), padded=pad, seed=seed,
                              checkpoint_id=checkpoint_id, chunks=chunks)


def infer_full_mesh(model: SegmentationNet, mesh: TriMesh, jaw: str, seed: int = 0,
                    n_points: int = 10000, export_probs: bool = False,
                    checkpoint_id: str = "") -> SegmentationResult:
    """Predict a label for every face of ``mesh`` in ceil(F / n_points) rounds."""
    if mesh.n_faces < model.config.k_nn + 1:
        raise ValueError(f"mesh has {mesh.n_faces} faces, need at least "
                         f"k_nn + 1 = {model.config.k_nn + 1}")
    cloud = build_features(mesh, build_adjacency(mesh), jaw)
    return infer_cloud(model, cloud, n_points, seed, export_probs, checkpoint_id)


def export_result(result: SegmentationResult, mesh: TriMesh, path):
    """Write a per-face colored OBJ and a ``.labels`` sidecar next to it."""
    if len(result.face_labels) != mesh.n_faces:
        raise ValueError(f"{len(result.face_labels)} labels for {mesh.n_faces} faces")
    path = Path(path)
    save_mesh(mesh, path, face_colors=PALETTE[result.face_labels])
    sidecar = path.with_suffix(".labels")
    save_labels(result.face_labels, sidecar)
    if result.face_probs is not None:
        np.savetxt(path.with_suffix(".probs.csv"), result.face_probs, fmt="%.6f", delimiter=",")
    return path, sidecar


def evaluate_samples(model: SegmentationNet, samples, n_points: int = 10000, seed: int = 0) -> dict:
    """Full-mesh inference plus metrics on labeled samples.

    Returns a JSON-ready dict with the jaw-grouped aggregate report, the
    auxiliary tooth/gingiva accuracy and per-sample scores.
    """
    reports, jaws, per_sample = [], [], []
    aux_correct = aux_total = 0
    for smp in samples:
        res = infer_full_mesh(model, smp.mesh, smp.jaw, seed=seed, n_points=n_points)
        rep = evaluate(res.face_labels, smp.labels)
        reports.append(rep)
        jaws.append(smp.jaw)
        aux_correct += int((res.aux_labels == (smp.labels != 0)).sum())
        aux_total += len(smp.labels)
        per_sample.append({"name": smp.name, "jaw": smp.jaw, "accuracy": rep.accuracy,
                           "miou": rep.miou, "dsc": rep.dsc})
    agg = aggregate(reports, jaws)
    return {"aggregate": agg.as_dict(), "aux_accuracy": aux_correct / aux_total,
            "samples": per_sample}
