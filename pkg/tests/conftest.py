"""Shared mesh builders for the test suite."""

import numpy as np

from chain4d.geom import TriMesh


def grid_mesh(nx: int, ny: int, jitter: float = 0.0, seed: int = 0) -> TriMesh:
    """Planar triangulated grid of nx * ny vertices, unit spacing."""
    xs, ys = np.meshgrid(np.arange(nx, dtype=float),
                         np.arange(ny, dtype=float), indexing="ij")
    verts = np.stack([xs.ravel(), ys.ravel(),
                      np.zeros(nx * ny)], axis=1)
    if jitter:
        rng = np.random.default_rng(seed)
        verts += rng.normal(scale=jitter, size=verts.shape)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            faces.append([a, b, a + 1])
            faces.append([b, b + 1, a + 1])
    return TriMesh(verts, np.array(faces))


def octahedron(scale: float = 1.0) -> TriMesh:
    verts = scale * np.array([
        [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0], [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0], [0.0, 0.0, -1.0],
    ])
    faces = np.array([
        [0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
        [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5],
    ])
    return TriMesh(verts, faces)


def two_islands() -> TriMesh:
    """Two disconnected triangles."""
    verts = np.array([
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
        [10.0, 0.0, 0.0], [11.0, 0.0, 0.0], [10.0, 1.0, 0.0],
    ])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    return TriMesh(verts, faces)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_axis(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
