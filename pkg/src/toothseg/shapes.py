"""Analytic test meshes: tetrahedron, icosphere, planar grid, random surfaces."""
from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def tetrahedron(edge: float = 1.0) -> TriMesh:
    """Regular tetrahedron with outward-wound faces."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    v *= edge / (2 * np.sqrt(2))
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriMesh(v, f)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Loop-subdivided icosahedron projected onto a sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return TriMesh(np.array(verts) * radius, np.array(faces))


def grid(nx: int = 4, ny: int = 4, spacing: float = 1.0, height=None) -> TriMesh:
    """Triangulated ``nx`` x ``ny`` cell grid in the z=0 plane.

    ``height`` optionally maps (x, y) arrays to z, turning the grid into
    a height field.
    """
    xs, ys = np.meshgrid(np.arange(nx + 1) * spacing, np.arange(ny + 1) * spacing,
                         indexing="ij")
    zs = np.zeros_like(xs) if height is None else height(xs, ys)
    v = np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    f = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return TriMesh(v, f)


def random_height_field(rng: np.random.Generator, nx: int = 8, ny: int = 8,
                        amplitude: float = 0.5) -> TriMesh:
    """Grid with jittered vertices and random heights (non-degenerate)."""
    base = grid(nx, ny)
    v = base.vertices.copy()
    v[:, :2] += rng.uniform(-0.2, 0.2, size=(len(v), 2))
    v[:, 2] = rng.normal(0.0, amplitude, size=len(v))
    return TriMesh(v, base.faces)


def random_closed_mesh(rng: np.random.Generator, subdivisions: int = 2,
                       noise: float = 0.15) -> TriMesh:
    """Icosphere with radially perturbed vertices (closed, genus 0)."""
    s = icosphere(subdivisions)
    scale = 1.0 + rng.uniform(-noise, noise, size=len(s.vertices))
    return TriMesh(s.vertices * scale[:, None], s.faces)
