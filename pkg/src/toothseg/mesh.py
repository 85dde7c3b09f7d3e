"""Triangle mesh container, ASCII mesh IO and face adjacency.

Points of the downstream point cloud are face centroids, so every
per-point quantity in this package is indexed by face.
"""
from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-10


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed."""


class MeshValidationError(ValueError):
    """Raised when parsed mesh data violates the TriMesh contract."""


@dataclass(eq=False)
class TriMesh:
    """Indexed triangle mesh with derived per-face quantities.

    ``source_index`` maps each kept face back to its position in the file,
    which differs from ``arange`` only when degenerate faces were dropped.
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_centroid: np.ndarray = field(init=False)
    face_normal: np.ndarray = field(init=False)
    face_area: np.ndarray = field(init=False)
    source_index: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshValidationError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshValidationError(f"faces must be (F, 3), got {self.faces.shape}")
        nv = len(self.vertices)
        if len(self.faces):
            bad = np.flatnonzero((self.faces < 0).any(1) | (self.faces >= nv).any(1))
            if len(bad):
                f = int(bad[0])
                raise MeshValidationError(
                    f"face {f} references vertex {self.faces[f].tolist()} "
                    f"but mesh has {nv} vertices"
                )
        if self.source_index is None:
            self.source_index = np.arange(len(self.faces))
        self._compute_face_geometry()
        degenerate = self.face_area < DEGENERATE_AREA
        if degenerate.any():
            log.warning("dropping %d degenerate face(s): %s", degenerate.sum(),
                        np.flatnonzero(degenerate)[:10].tolist())
            keep = ~degenerate
            self.faces = self.faces[keep]
            self.source_index = self.source_index[keep]
            self._compute_face_geometry()

    def _compute_face_geometry(self):
        tri = self.vertices[self.faces]
        self.face_centroid = tri.sum(axis=1) / 3.0
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(cross, axis=1)
        self.face_area = 0.5 * norm
        safe = np.where(norm > 0, norm, 1.0)
        self.face_normal = cross / safe[:, None]

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def transformed(self, matrix=None, scale=1.0, offset=None) -> "TriMesh":
        """Copy of the mesh with ``v -> scale * v @ matrix.T + offset``."""
        v = self.vertices
        if matrix is not None:
            v = v @ np.asarray(matrix, dtype=np.float64).T
        v = v * scale
        if offset is not None:
            v = v + np.asarray(offset, dtype=np.float64)
        return TriMesh(v, self.faces.copy())


@dataclass
class FaceAdjacency:
    """First- and second-order face neighborhoods in CSR form.

    ``second_order`` is K(i): faces reachable within two shared-edge hops,
    excluding the face itself. With ``mode="knn"`` both levels hold the
    k nearest centroids instead.
    """

    first_indptr: np.ndarray
    first_indices: np.ndarray
    second_indptr: np.ndarray
    second_indices: np.ndarray
    mode: str = "mesh"

    @property
    def n_faces(self) -> int:
        return len(self.first_indptr) - 1

    def first_order(self, i: int) -> np.ndarray:
        return self.first_indices[self.first_indptr[i]:self.first_indptr[i + 1]]

    def second_order(self, i: int) -> np.ndarray:
        return self.second_indices[self.second_indptr[i]:self.second_indptr[i + 1]]

    def second_counts(self) -> np.ndarray:
        return np.diff(self.second_indptr)


def _edge_face_pairs(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All (face, face) pairs sharing an undirected edge, both directions."""
    nf = len(faces)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges.sort(axis=1)
    owner = np.tile(np.arange(nf), 3)
    _, inverse, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    owner_sorted = owner[order]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    rows, cols = [], []
    two = np.flatnonzero(counts == 2)
    a, b = owner_sorted[starts[two]], owner_sorted[starts[two] + 1]
    rows += [a, b]
    cols += [b, a]
    # non-manifold edges: every incident face neighbors every other
    for g in np.flatnonzero(counts > 2):
        members = owner_sorted[starts[g]:starts[g] + counts[g]]
        ii, jj = np.meshgrid(members, members, indexing="ij")
        rows.append(ii.ravel())
        cols.append(jj.ravel())
    if not rows:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(rows), np.concatenate(cols)


def _csr_without_diagonal(m: sparse.csr_matrix) -> tuple[np.ndarray, np.ndarray]:
    m = m.tocsr()
    m.setdiag(0)
    m.eliminate_zeros()
    m.sort_indices()
    return m.indptr.astype(np.int64), m.indices.astype(np.int64)


def build_adjacency(mesh: TriMesh, mode: str = "mesh", k: int = 12) -> FaceAdjacency:
    """Face neighborhoods used by the point-curvature computation.

    Parameters
    ----------
    mesh : TriMesh
    mode : {"mesh", "knn"}
        ``"mesh"`` uses the shared-edge graph (non-manifold edges connect
        all incident faces). ``"knn"`` uses the ``k`` nearest face centroids
        for both levels.
    """
    nf = mesh.n_faces
    if mode == "knn":
        kk = min(k, max(nf - 1, 0))
        if kk == 0:
            indptr = np.zeros(nf + 1, np.int64)
            empty = np.empty(0, np.int64)
            return FaceAdjacency(indptr, empty, indptr.copy(), empty.copy(), mode="knn")
        _, idx = cKDTree(mesh.face_centroid).query(mesh.face_centroid, k=kk + 1)
        rows = np.repeat(np.arange(nf), kk + 1)
        m = sparse.csr_matrix((np.ones(rows.size), (rows, idx.ravel())), shape=(nf, nf))
        indptr, indices = _csr_without_diagonal(m)
        return FaceAdjacency(indptr, indices, indptr.copy(), indices.copy(), mode="knn")
    if mode != "mesh":
        raise ValueError(f"unknown adjacency mode {mode!r}")

    rows, cols = _edge_face_pairs(mesh.faces)
    a = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(nf, nf))
    a.data[:] = 1.0
    first_indptr, first_indices = _csr_without_diagonal(a)
    a = sparse.csr_matrix((np.ones(first_indices.size), first_indices, first_indptr),
                          shape=(nf, nf))
    two_hop = a + a @ a
    second_indptr, second_indices = _csr_without_diagonal(two_hop)
    return FaceAdjacency(first_indptr, first_indices, second_indptr, second_indices)


def boundary_vertices(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    """Boolean mask of vertices lying on an edge used by exactly one face."""
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges.sort(axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    mask = np.zeros(n_vertices, dtype=bool)
    mask[uniq[counts == 1].ravel()] = True
    return mask


# --------------------------------------------------------------------------- IO

def _parse_obj(lines):
    verts, faces = [], []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                if len(idx) != 3:
                    raise ValueError(f"face has {len(idx)} vertices, only triangles are supported")
                # OBJ is 1-based; negative indices count back from the last vertex
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        except (ValueError, IndexError) as exc:
            raise MeshFormatError(f"OBJ line {lineno}: {exc}: {raw.strip()!r}") from None
    return verts, faces


def _parse_ply(lines):
    it = iter(enumerate(lines, 1))
    _, first = next(it, (1, ""))
    if first.strip() != "ply":
        raise MeshFormatError("PLY line 1: missing 'ply' magic")
    elements = []
    for lineno, raw in it:
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise MeshFormatError(f"PLY line {lineno}: only ascii format is supported")
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError(f"PLY line {lineno}: property before element")
            elements[-1][2].append(tok[1:])
        elif tok[0] == "end_header":
            break
    else:
        raise MeshFormatError("PLY: missing end_header")

    verts, faces = [], []
    for name, count, props in elements:
        names = [p[-1] for p in props]
        for _ in range(count):
            try:
                lineno, raw = next(it)
            except StopIteration:
                raise MeshFormatError(f"PLY: unexpected end of file in element {name!r}") from None
            tok = raw.split()
            try:
                if name == "vertex":
                    verts.append([float(tok[names.index(c)]) for c in ("x", "y", "z")])
                elif name == "face":
                    n = int(tok[0])
                    if n != 3:
                        raise ValueError(f"face has {n} vertices, only triangles are supported")
                    faces.append([int(t) for t in tok[1:4]])
            except (ValueError, IndexError) as exc:
                raise MeshFormatError(f"PLY line {lineno}: {exc}: {raw.strip()!r}") from None
    return verts, faces


def _parse_stl(lines):
    verts, faces, lookup = [], [], {}
    current = []
    for lineno, raw in enumerate(lines, 1):
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "vertex":
            try:
                key = tuple(float(t) for t in tok[1:4])
                if len(key) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            except ValueError as exc:
                raise MeshFormatError(f"STL line {lineno}: {exc}: {raw.strip()!r}") from None
            if key not in lookup:
                lookup[key] = len(verts)
                verts.append(list(key))
            current.append(lookup[key])
        elif tok[0] == "endloop":
            if len(current) != 3:
                raise MeshFormatError(f"STL line {lineno}: facet with {len(current)} vertices")
            faces.append(current)
            current = []
    if lines and not lines[0].lstrip().startswith("solid"):
        raise MeshFormatError("STL line 1: missing 'solid' header (binary STL is not supported)")
    return verts, faces


_PARSERS = {"obj": _parse_obj, "ply": _parse_ply, "stl": _parse_stl}


def load_mesh(path, format: str | None = None) -> TriMesh:
    """Load an OBJ, ASCII PLY or ASCII STL triangle mesh.

    Degenerate faces are dropped with a warning; ``mesh.source_index``
    records the original face numbering.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in _PARSERS:
        raise MeshFormatError(f"unsupported mesh format {fmt!r}")
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise MeshFormatError(f"{path}: not an ASCII {fmt.upper()} file") from None
    verts, faces = _PARSERS[fmt](text.splitlines())
    if not faces:
        raise MeshFormatError(f"{path}: no faces found")
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def obj_text(mesh: TriMesh, face_colors=None, vertex_colors=None) -> str:
    """OBJ serialization with 6-decimal coordinates.

    ``vertex_colors`` appends RGB to ``v`` records (a widely read extension).
    ``face_colors`` (F, 3) in [0, 1] are emitted by duplicating vertices per
    face so each face carries a flat color.
    """
    out = []
    if face_colors is not None:
        face_colors = np.asarray(face_colors, dtype=np.float64)
        tri = mesh.vertices[mesh.faces].reshape(-1, 3)
        col = np.repeat(face_colors, 3, axis=0)
        for p, c in zip(tri, col):
            out.append(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}")
        for f in range(mesh.n_faces):
            out.append(f"f {3 * f + 1} {3 * f + 2} {3 * f + 3}")
    else:
        if vertex_colors is None:
            out += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
        else:
            for p, c in zip(mesh.vertices, np.asarray(vertex_colors, dtype=np.float64)):
                out.append(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}")
        out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(out) + "\n"


def save_mesh(mesh: TriMesh, path, **kwargs):
    """Write ``mesh`` as OBJ (6-decimal coordinates), atomically."""
    atomic_write_text(path, obj_text(mesh, **kwargs))


def save_labels(labels, path):
    """Per-face integer sidecar: line k holds the label of face k."""
    atomic_write_text(path, "".join(f"{int(v)}\n" for v in np.asarray(labels)))


def load_labels(path) -> np.ndarray:
    vals = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        if not raw.strip():
            continue
        try:
            vals.append(int(raw))
        except ValueError:
            raise MeshFormatError(f"{path} line {lineno}: not an integer label: {raw!r}") from None
    return np.array(vals, dtype=np.int64)
