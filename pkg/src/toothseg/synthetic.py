"""Parametric toy jaws: a gum strip bent along a parabolic arch with
ellipsoidal tooth crowns, labeled per face with 33-way class ids.

Class ids: 0 gingiva; 1-8 FDI 11-18; 9-16 FDI 21-28; 17-24 FDI 31-38;
25-32 FDI 41-48. Quadrant 1 (maxillary) / 4 (mandible) sits on the -x
side of the arch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import JAWS
from .mesh import TriMesh, atomic_write_text, load_labels, load_mesh, save_labels, save_mesh

# relative crown length from central incisor to third molar
_CROWN_LENGTH = np.array([0.85, 0.7, 0.8, 0.75, 0.75, 1.1, 1.0, 0.95])
_QUADRANT_BASE = {1: 0, 2: 8, 3: 16, 4: 24}


def fdi_to_class(fdi: int) -> int:
    q, t = divmod(int(fdi), 10)
    if q not in _QUADRANT_BASE or not 1 <= t <= 8:
        raise ValueError(f"invalid FDI tooth number {fdi}")
    return _QUADRANT_BASE[q] + t


def class_to_fdi(class_id: int) -> int:
    if not 1 <= class_id <= 32:
        raise ValueError(f"class {class_id} is not a tooth")
    q, t = divmod(class_id - 1, 8)
    return 10 * (q + 1) + t + 1


@dataclass
class SyntheticJawSpec:
    tooth_count: int = 14
    arch_half_width: tuple = (20.0, 26.0)   # mm, uniform range
    arch_depth: tuple = (32.0, 42.0)        # mm
    strip_width: float = 12.0               # mm across the arch
    ridge_height: float = 2.5               # mm
    tooth_height: tuple = (4.0, 6.0)        # mm
    tooth_width: tuple = (7.0, 9.0)         # mm across the arch
    tooth_gap: float = 0.8                  # mm between neighboring crowns
    margin: float = 0.25                    # crown wall height at the gum line, fraction of height
    size_jitter: float = 0.1
    n_along: int = 168
    n_across: int = 16
    missing_tooth_prob: float = 0.0
    max_missing: int = 1
    seed: int = 0
    jaw: str | None = None                  # None: by seed parity

    def __post_init__(self):
        if self.tooth_count % 2 or not 2 <= self.tooth_count <= 16:
            raise ValueError(f"tooth_count must be even in [2, 16], got {self.tooth_count}")
        if self.n_along < 6 * self.tooth_count or self.n_across < 6:
            raise ValueError(
                f"resolution {self.n_along}x{self.n_across} too low for "
                f"{self.tooth_count} teeth (need n_along >= {6 * self.tooth_count}, n_across >= 6)")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError("margin must be in [0, 1)")
        if not 0.0 <= self.missing_tooth_prob <= 1.0:
            raise ValueError("missing_tooth_prob must be in [0, 1]")
        if self.jaw is not None and self.jaw not in JAWS:
            raise ValueError(f"jaw must be one of {JAWS}")

    @property
    def resolved_jaw(self) -> str:
        return self.jaw or ("maxillary" if self.seed % 2 == 0 else "mandible")


def _arch_curve(half_width, depth, n=4001):
    """Dense samples of y = depth * (1 - (x / half_width)^2) with arc length."""
    x = np.linspace(-half_width, half_width, n)
    y = depth * (1.0 - (x / half_width) ** 2)
    seg = np.hypot(np.diff(x), np.diff(y))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    return x, y, s


def tooth_classes(tooth_count: int, jaw: str) -> list[int]:
    """Class ids along the arch from the -x end to the +x end."""
    per = tooth_count // 2
    left_q, right_q = (1, 2) if jaw == "maxillary" else (4, 3)
    left = [fdi_to_class(10 * left_q + t) for t in range(per, 0, -1)]
    right = [fdi_to_class(10 * right_q + t) for t in range(1, per + 1)]
    return left + right


def generate_synthetic_jaw(spec: SyntheticJawSpec | None = None):
    """Build one labeled toy jaw.

    Returns
    -------
    mesh : TriMesh
    labels : (F,) int array of class ids
    jaw : "maxillary" or "mandible"
    """
    spec = spec or SyntheticJawSpec()
    rng = np.random.default_rng(spec.seed)
    jaw = spec.resolved_jaw
    half_width = rng.uniform(*spec.arch_half_width)
    depth = rng.uniform(*spec.arch_depth)
    cx, cy, cs = _arch_curve(half_width, depth)
    length = cs[-1]

    per = spec.tooth_count // 2
    rel = np.concatenate([_CROWN_LENGTH[:per][::-1], _CROWN_LENGTH[:per]])
    rel = rel * (1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter, size=rel.size))
    usable = length - spec.tooth_gap * (spec.tooth_count + 1)
    crown_len = rel / rel.sum() * usable
    starts = spec.tooth_gap * np.arange(1, spec.tooth_count + 1) + \
        np.concatenate([[0.0], np.cumsum(crown_len)[:-1]])
    centers = starts + crown_len / 2
    heights = rng.uniform(*spec.tooth_height, size=spec.tooth_count)
    widths = rng.uniform(*spec.tooth_width, size=spec.tooth_count)
    offsets = rng.uniform(-0.5, 0.5, size=spec.tooth_count)
    classes = np.array(tooth_classes(spec.tooth_count, jaw))

    present = np.ones(spec.tooth_count, dtype=bool)
    if spec.max_missing > 0 and rng.random() < spec.missing_tooth_prob:
        drop = rng.choice(spec.tooth_count, size=min(spec.max_missing, spec.tooth_count),
                          replace=False)
        present[drop] = False

    s = np.linspace(0.0, length, spec.n_along + 1)
    t = np.linspace(-spec.strip_width / 2, spec.strip_width / 2, spec.n_across + 1)
    S, T = np.meshgrid(s, t, indexing="ij")

    px = np.interp(s, cs, cx)
    py = np.interp(s, cs, cy)
    tx = np.gradient(px, s)
    ty = np.gradient(py, s)
    tn = np.hypot(tx, ty)
    nx, ny = -ty / tn, tx / tn  # in-plane normal, pointing into the arch

    def crown_distance(s_, t_):
        d2 = np.full(s_.shape + (spec.tooth_count,), np.inf)
        for k in np.flatnonzero(present):
            d2[..., k] = ((s_ - centers[k]) / (crown_len[k] / 2)) ** 2 + \
                         ((t_ - offsets[k]) / (widths[k] / 2)) ** 2
        return d2

    d2 = crown_distance(S, T)
    inside = d2 < 1.0
    # crowns rise from a short wall at the gum line, then follow an ellipsoidal cap
    profile = spec.margin + (1.0 - spec.margin) * np.sqrt(np.clip(1.0 - d2, 0.0, None))
    bump = np.where(inside, profile * heights, 0.0)
    z = spec.ridge_height * np.cos(np.pi * T / spec.strip_width) + bump.max(axis=-1)

    X = px[:, None] + T * nx[:, None]
    Y = py[:, None] + T * ny[:, None]
    verts = np.column_stack([X.ravel(), Y.ravel(), z.ravel()])

    m = spec.n_across + 1
    idx = np.arange(verts.shape[0]).reshape(spec.n_along + 1, m)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    mesh = TriMesh(verts, faces)
    if mesh.face_normal[:, 2].sum() < 0:
        mesh = TriMesh(verts, faces[:, ::-1])

    # a face belongs to a tooth when all three corners sit on that crown;
    # faces on the margin wall stay gingiva
    corner = inside.reshape(-1, spec.tooth_count)[mesh.faces]      # (F, 3, teeth)
    on_crown = corner.all(axis=1)
    labels = np.where(on_crown.any(axis=1), classes[on_crown.argmax(axis=1)], 0).astype(np.int64)
    return mesh, labels, jaw


# ------------------------------------------------------------------ datasets

@dataclass
class Sample:
    name: str
    mesh: TriMesh
    labels: np.ndarray
    jaw: str


def synthetic_samples(count: int, seed: int = 0, **spec_kwargs) -> list[Sample]:
    """``count`` jaws with seeds ``seed, seed + 1, ...`` (jaws alternate)."""
    out = []
    for i in range(count):
        mesh, labels, jaw = generate_synthetic_jaw(SyntheticJawSpec(seed=seed + i, **spec_kwargs))
        out.append(Sample(f"jaw_{i:03d}", mesh, labels, jaw))
    return out


def write_dataset(samples, root):
    """Write ``<name>.obj`` + ``<name>.labels`` per sample and ``meta.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {}
    for smp in samples:
        save_mesh(smp.mesh, root / f"{smp.name}.obj")
        save_labels(smp.labels, root / f"{smp.name}.labels")
        meta[smp.name] = {"jaw": smp.jaw}
    atomic_write_text(root / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(root) -> list[Sample]:
    """Read a dataset directory written by :func:`write_dataset` (or by hand)."""
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} missing")
    meta = json.loads(meta_path.read_text())
    out = []
    for name in sorted(meta):
        mesh_path = next((root / f"{name}.{ext}" for ext in ("obj", "ply", "stl")
                          if (root / f"{name}.{ext}").exists()), None)
        if mesh_path is None:
            raise FileNotFoundError(f"no mesh file for sample {name!r} in {root}")
        mesh = load_mesh(mesh_path)
        labels = load_labels(root / f"{name}.labels")
        n_file = int(mesh.source_index.max()) + 1 if mesh.n_faces else 0
        # trailing degenerate faces may have been dropped, so only a
        # fully kept mesh pins the exact count
        if len(labels) < n_file or (mesh.n_faces == n_file and len(labels) != n_file):
            raise ValueError(f"{name}: {len(labels)} labels for {n_file} faces")
        labels = labels[mesh.source_index]
        out.append(Sample(name, mesh, labels, meta[name]["jaw"]))
    return out
