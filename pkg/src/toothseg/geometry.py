"""Discrete curvature fields and the 8-column per-point feature matrix.

Feature columns, in order::

    x, y, z, n_x, n_y, n_z, gaussian_curvature, point_curvature

Coordinates are centered and isotropically scaled into [-1, 1]^3 over
the full-resolution cloud. The Gaussian column is clamped to
[-GAUSS_CLAMP, GAUSS_CLAMP] mm^-2 and divided by GAUSS_CLAMP, the point
curvature column is divided by pi. Raw curvature values are kept in
``FeatureCloud.ranking`` for hard-point selection.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import FaceAdjacency, TriMesh, boundary_vertices, build_adjacency

log = logging.getLogger(__name__)

GAUSS_CLAMP = 100.0
COT_LIMIT = 1e6
JAWS = ("maxillary", "mandible")
FEATURE_COLUMNS = ("x", "y", "z", "n_x", "n_y", "n_z", "gaussian_curvature", "point_curvature")


@dataclass
class CurvatureField:
    """Per-face scalar curvature.

    ``vertex_values`` holds the per-vertex estimate that was averaged onto
    faces (absent for point curvature, which is face-native). For the
    Gaussian estimator ``angle_deficit`` and ``boundary`` are kept so that
    Gauss-Bonnet sums can be checked.
    """

    kind: str
    values: np.ndarray
    vertex_values: np.ndarray | None = None
    boundary: np.ndarray | None = None
    angle_deficit: np.ndarray | None = None

    @property
    def units(self) -> str:
        return {"gaussian": "mm^-2", "mean": "mm^-1", "point": "rad"}[self.kind]


def _corner_vectors(mesh: TriMesh):
    """Edge vectors leaving each corner: (F, 3 corners, 2 edges, 3)."""
    tri = mesh.vertices[mesh.faces]
    u = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1], tri[:, 0] - tri[:, 2]], axis=1)
    w = np.stack([tri[:, 2] - tri[:, 0], tri[:, 0] - tri[:, 1], tri[:, 1] - tri[:, 2]], axis=1)
    return u, w


def corner_angles(mesh: TriMesh) -> np.ndarray:
    """Interior angle at each face corner, shape (F, 3)."""
    u, w = _corner_vectors(mesh)
    return np.arctan2(np.linalg.norm(np.cross(u, w), axis=-1), np.einsum("fck,fck->fc", u, w))


def _vertex_area(mesh: TriMesh) -> np.ndarray:
    """Barycentric area: one third of every incident face area."""
    area = np.zeros(mesh.n_vertices)
    np.add.at(area, mesh.faces.ravel(), np.repeat(mesh.face_area / 3.0, 3))
    return area


def _vertex_to_face(mesh: TriMesh, vals: np.ndarray) -> np.ndarray:
    return vals[mesh.faces].mean(axis=1)


def gaussian_curvature(mesh: TriMesh) -> CurvatureField:
    """Angle-deficit Gaussian curvature averaged onto faces.

    Interior vertices use ``2*pi - sum(angles)``, boundary vertices
    ``pi - sum(angles)``; each deficit is divided by the barycentric
    vertex area.
    """
    angles = corner_angles(mesh)
    total = np.zeros(mesh.n_vertices)
    np.add.at(total, mesh.faces.ravel(), angles.ravel())
    boundary = boundary_vertices(mesh.faces, mesh.n_vertices)
    deficit = np.where(boundary, np.pi, 2.0 * np.pi) - total
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.ravel()] = True
    deficit[~used] = 0.0
    area = _vertex_area(mesh)
    k = np.divide(deficit, area, out=np.zeros_like(deficit), where=area > 0)
    return CurvatureField("gaussian", _vertex_to_face(mesh, k), vertex_values=k,
                          boundary=boundary, angle_deficit=deficit)


def mean_curvature(mesh: TriMesh) -> CurvatureField:
    """Mean curvature magnitude from the cotangent Laplacian.

    ``H_v = |L x|_v / 2`` with ``(L x)_v = (1 / A_v) sum_j w_vj (x_j - x_v)``
    and ``w_vj = (cot a + cot b) / 2``. Cotangents are capped at
    ``COT_LIMIT`` in magnitude so near-degenerate triangles stay finite.
    """
    u, w = _corner_vectors(mesh)
    sin = np.linalg.norm(np.cross(u, w), axis=-1)
    cos = np.einsum("fck,fck->fc", u, w)
    scale = np.linalg.norm(u, axis=-1) * np.linalg.norm(w, axis=-1)
    cot = cos / np.maximum(sin, scale / COT_LIMIT)
    cot = np.clip(cot, -COT_LIMIT, COT_LIMIT)

    f = mesh.faces
    # corner c is opposite the edge (c+1, c+2)
    i = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    j = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    wgt = 0.5 * np.concatenate([cot[:, 0], cot[:, 1], cot[:, 2]])
    x = mesh.vertices
    lap = np.zeros_like(x)
    d = x[j] - x[i]
    np.add.at(lap, i, wgt[:, None] * d)
    np.add.at(lap, j, -wgt[:, None] * d)
    area = _vertex_area(mesh)
    lap = np.divide(lap, area[:, None], out=np.zeros_like(lap), where=area[:, None] > 0)
    h = 0.5 * np.linalg.norm(lap, axis=1)
    return CurvatureField("mean", _vertex_to_face(mesh, h), vertex_values=h)


def normal_angles(n_a: np.ndarray, n_b: np.ndarray) -> np.ndarray:
    """Angle in radians between paired unit vectors, rows of ``n_a``/``n_b``.

    Uses ``atan2(|a x b|, a . b)``, which equals ``arccos(a . b)`` for unit
    vectors but keeps full precision for nearly parallel pairs.
    """
    return np.arctan2(np.linalg.norm(np.cross(n_a, n_b), axis=-1),
                      np.einsum("ij,ij->i", n_a, n_b))


def point_curvature(mesh: TriMesh, adj: FaceAdjacency | None = None) -> CurvatureField:
    """Mean normal angle between each face and its neighborhood K(i).

    Faces with an empty neighborhood get 0.
    """
    if adj is None:
        adj = build_adjacency(mesh)
    counts = adj.second_counts()
    rows = np.repeat(np.arange(adj.n_faces), counts)
    theta = normal_angles(mesh.face_normal[rows], mesh.face_normal[adj.second_indices])
    sums = np.bincount(rows, weights=theta, minlength=adj.n_faces)
    m = np.divide(sums, counts, out=np.zeros(adj.n_faces), where=counts > 0)
    return CurvatureField("point", m)


CURVATURES = {
    "gaussian": lambda mesh, adj: gaussian_curvature(mesh),
    "mean": lambda mesh, adj: mean_curvature(mesh),
    "point": point_curvature,
}


def curvature(mesh: TriMesh, kind: str, adj: FaceAdjacency | None = None) -> CurvatureField:
    if kind not in CURVATURES:
        raise ValueError(f"unknown curvature kind {kind!r}")
    return CURVATURES[kind](mesh, adj)


def jaw_vector(jaw: str) -> np.ndarray:
    """One-hot jaw category: maxillary -> (1, 0), mandible -> (0, 1)."""
    if jaw not in JAWS:
        raise ValueError(f"jaw must be one of {JAWS}, got {jaw!r}")
    v = np.zeros(2)
    v[JAWS.index(jaw)] = 1.0
    return v


@dataclass
class FeatureCloud:
    """Per-point feature matrix with provenance.

    Attributes
    ----------
    features : (N, 8) float array, columns ``FEATURE_COLUMNS``
    category : (2,) one-hot jaw vector
    source_face : (N,) index of the mesh face each row came from
    ranking : raw per-row curvature values keyed by kind, for hard-point selection
    labels : optional (N,) class ids
    padded : True when rows were resampled with replacement
    """

    features: np.ndarray
    category: np.ndarray
    source_face: np.ndarray
    ranking: dict = field(default_factory=dict)
    labels: np.ndarray | None = None
    jaw: str = "maxillary"
    padded: bool = False
    center: np.ndarray | None = None
    scale: float = 1.0

    @property
    def n(self) -> int:
        return len(self.features)

    def take(self, rows: np.ndarray, padded: bool | None = None) -> "FeatureCloud":
        return replace(
            self,
            features=self.features[rows],
            source_face=self.source_face[rows],
            ranking={k: v[rows] for k, v in self.ranking.items()},
            labels=None if self.labels is None else self.labels[rows],
            padded=self.padded if padded is None else padded,
        )


def normalize_coordinates(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Center on the centroid and scale by the largest absolute coordinate."""
    center = xyz.mean(axis=0)
    centered = xyz - center
    extent = np.abs(centered).max() if len(xyz) else 0.0
    scale = 1.0 / extent if extent > 0 else 1.0
    return centered * scale, center, scale


def build_features(mesh: TriMesh, adj: FaceAdjacency | None = None, jaw: str = "maxillary",
                   labels=None) -> FeatureCloud:
    """Full-resolution feature cloud, one row per mesh face."""
    if adj is None:
        adj = build_adjacency(mesh)
    gauss = gaussian_curvature(mesh).values
    point = point_curvature(mesh, adj).values
    mean = mean_curvature(mesh).values
    xyz, center, scale = normalize_coordinates(mesh.face_centroid)
    feats = np.empty((mesh.n_faces, 8))
    feats[:, 0:3] = xyz
    feats[:, 3:6] = mesh.face_normal
    feats[:, 6] = np.clip(gauss, -GAUSS_CLAMP, GAUSS_CLAMP) / GAUSS_CLAMP
    feats[:, 7] = point / np.pi
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) != mesh.n_faces:
            raise ValueError(f"{len(labels)} labels for {mesh.n_faces} faces")
    return FeatureCloud(
        features=feats,
        category=jaw_vector(jaw),
        source_face=np.arange(mesh.n_faces),
        ranking={"point": point, "gaussian": gauss, "mean": mean},
        labels=labels,
        jaw=jaw,
        center=center,
        scale=scale,
    )


def farthest_point_indices(xyz: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy farthest-point sampling from a random start."""
    idx = np.empty(n, dtype=np.int64)
    idx[0] = rng.integers(len(xyz))
    dist = np.linalg.norm(xyz - xyz[idx[0]], axis=1)
    for k in range(1, n):
        idx[k] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(xyz - xyz[idx[k]], axis=1))
    return idx


def downsample(cloud: FeatureCloud, n: int = 10000, seed: int = 0,
               method: str = "random") -> FeatureCloud:
    """Fixed-size subsample of ``cloud``.

    ``method="random"`` draws uniformly without replacement, ``"fps"`` uses
    farthest-point sampling on the coordinates. When ``n`` exceeds the
    cloud size all rows are kept and the remainder is resampled with
    replacement; the result is flagged ``padded``.
    """
    if n <= 0:
        raise ValueError(f"sample size must be positive, got {n}")
    rng = np.random.default_rng(seed)
    total = cloud.n
    if n > total:
        log.warning("cloud has %d points, padding to %d by resampling", total, n)
        rows = np.concatenate([rng.permutation(total), rng.integers(0, total, n - total)])
        return cloud.take(rows, padded=True)
    if method == "random":
        rows = rng.choice(total, size=n, replace=False)
    elif method == "fps":
        rows = farthest_point_indices(cloud.features[:, :3], n, rng)
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    return cloud.take(rows)


def boundary_faces(adj: FaceAdjacency, labels: np.ndarray) -> np.ndarray:
    """Mask of faces with a first-order neighbor carrying a different label."""
    counts = np.diff(adj.first_indptr)
    rows = np.repeat(np.arange(adj.n_faces), counts)
    differs = labels[rows] != labels[adj.first_indices]
    return np.bincount(rows, weights=differs, minlength=adj.n_faces) > 0


def near_boundary(adj: FaceAdjacency, labels: np.ndarray) -> np.ndarray:
    """Faces within two edge hops of a label boundary (boundary faces included)."""
    seed = boundary_faces(adj, labels)
    out = seed.copy()
    counts = adj.second_counts()
    rows = np.repeat(np.arange(adj.n_faces), counts)
    hit = seed[adj.second_indices]
    out |= np.bincount(rows, weights=hit, minlength=adj.n_faces) > 0
    return out
