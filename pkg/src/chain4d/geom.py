"""Core value types: row-stochastic maps, triangle meshes, surface samples.

Everything downstream speaks in these types. All of them are immutable
after construction and therefore safe to share between threads; the
operations in this module are pure functions.

Scalars are float64 internally everywhere. Archives store float32 and
the conversion happens at the I/O boundary, not here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError

ROW_SUM_TOL = 1e-5


def _as_f64(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


class RowStochasticMap:
    """Nonnegative matrix whose rows each sum to 1.

    The universal attention currency: vertex-to-token, token-to-token and
    patch-to-token maps are all instances. Backing storage is either a
    dense ndarray or a scipy CSR matrix; genuinely sparse maps (rows with
    exact zeros) keep their sparsity so large compositions stay cheap.
    """

    __slots__ = ("_data", "_sparse")

    def __init__(self, data, *, validate: bool = True):
        if sp.issparse(data):
            m = sp.csr_array(data, dtype=np.float64)
            m.sum_duplicates()
            self._data = m
            self._sparse = True
        else:
            arr = _as_f64(data)
            if arr.ndim != 2:
                raise ValidationError(
                    f"row-stochastic map must be 2-D, got shape {arr.shape}")
            self._data = arr
            self._sparse = False
        if self._data.shape[0] == 0 or self._data.shape[1] == 0:
            raise ValidationError("row-stochastic map must be non-empty")
        if validate:
            self._validate()

    def _validate(self) -> None:
        values = self._data.data if self._sparse else self._data
        if not np.all(np.isfinite(values)):
            raise ValidationError("row-stochastic map contains non-finite entries")
        if values.size and values.min(initial=0.0) < 0.0:
            raise ValidationError("row-stochastic map contains negative entries")
        sums = np.asarray(self._data.sum(axis=1)).ravel()
        bad = np.abs(sums - 1.0) > ROW_SUM_TOL
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ValidationError(
                f"row {i} sums to {sums[i]:.8f}, expected 1 within {ROW_SUM_TOL:g}")

    @classmethod
    def from_logits(cls, logits, temperature: float = 1.0) -> "RowStochasticMap":
        return softmax_rows(logits, temperature)

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    @property
    def is_sparse(self) -> bool:
        return self._sparse

    @property
    def data(self):
        """Backing matrix (ndarray or csr_array). Treat as read-only."""
        return self._data

    def row(self, i: int) -> np.ndarray:
        """Dense copy of one row."""
        if self._sparse:
            return self._data[[i], :].toarray().ravel()
        return self._data[i].copy()

    def toarray(self) -> np.ndarray:
        return self._data.toarray() if self._sparse else self._data.copy()

    def tocsr(self) -> sp.csr_array:
        return self._data if self._sparse else sp.csr_array(self._data)

    def density(self) -> float:
        if self._sparse:
            return self._data.nnz / (self.rows * self.cols)
        return float(np.count_nonzero(self._data)) / (self.rows * self.cols)

    def compose(self, other: "RowStochasticMap") -> "RowStochasticMap":
        """Markov-transport composition: self @ other, again row-stochastic."""
        if self.cols != other.rows:
            raise ValidationError(
                f"cannot compose {self.shape} with {other.shape}")
        out = self._data @ other._data
        if sp.issparse(out):
            return RowStochasticMap(out)
        return RowStochasticMap(np.asarray(out))

    def __repr__(self) -> str:
        kind = "sparse" if self._sparse else "dense"
        return f"RowStochasticMap({self.rows}x{self.cols}, {kind})"


def softmax_rows(logits, temperature: float = 1.0) -> RowStochasticMap:
    """Numerically stable per-row softmax of logits / temperature.

    Stability comes from subtracting the per-row maximum before
    exponentiating, which also makes the result invariant under per-row
    constant shifts of the logits.
    """
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    arr = _as_f64(logits)
    if arr.ndim == 1:
        arr = arr[None, :]
    if not np.all(np.isfinite(arr)):
        raise ValidationError("softmax_rows: logits contain non-finite values")
    shifted = (arr - arr.max(axis=1, keepdims=True)) / float(temperature)
    e = np.exp(shifted)
    e /= e.sum(axis=1, keepdims=True)
    return RowStochasticMap(e, validate=False)


def weighted_centroid(points, weights) -> np.ndarray:
    """Sum of w_i * p_i for normalized nonnegative weights."""
    pts = _as_f64(points)
    w = _as_f64(weights).ravel()
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"points must be Mx3, got {pts.shape}")
    if w.shape[0] != pts.shape[0]:
        raise ValidationError("weights length does not match point count")
    if w.min(initial=0.0) < 0.0:
        raise ValidationError("weights must be nonnegative")
    s = w.sum()
    if abs(s - 1.0) > ROW_SUM_TOL:
        raise ValidationError(f"weights sum to {s:.8f}, expected 1 within {ROW_SUM_TOL:g}")
    return w @ pts


class TriMesh:
    """Triangle mesh with immutable connectivity.

    The face array is fixed at construction and shared (not copied) into
    every animated frame, so topology preservation across frames holds by
    construction and can be checked by identity.
    """

    __slots__ = ("vertices", "faces")

    def __init__(self, vertices, faces):
        v = _as_f64(vertices)
        f = np.ascontiguousarray(np.asarray(faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be Vx3, got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must be Fx3, got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("vertices contain non-finite values")
        if f.size:
            if f.min() < 0 or f.max() >= v.shape[0]:
                raise ValidationError("face index out of range")
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if np.any(degen):
                raise ValidationError(
                    f"degenerate face at index {int(np.argmax(degen))}")
        v.flags.writeable = False
        f.flags.writeable = False
        self.vertices = v
        self.faces = f

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity (shared face array), new vertex positions."""
        out = TriMesh.__new__(TriMesh)
        v = _as_f64(vertices)
        if v.shape != self.vertices.shape:
            raise ValidationError("vertex array shape changed")
        v.flags.writeable = False
        out.vertices = v
        out.faces = self.faces
        return out

    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))

    def face_corner_positions(self):
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_normals(self, normalized: bool = True) -> np.ndarray:
        a, b, c = self.face_corner_positions()
        n = np.cross(b - a, c - a)
        if normalized:
            lens = np.linalg.norm(n, axis=1, keepdims=True)
            lens[lens == 0] = 1.0
            n = n / lens
        return n

    def face_areas(self) -> np.ndarray:
        a, b, c = self.face_corner_positions()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, unit length."""
        n = np.zeros_like(self.vertices)
        fn = self.face_normals(normalized=False)
        for k in range(3):
            np.add.at(n, self.faces[:, k], fn)
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        lens[lens == 0] = 1.0
        return n / lens

    def signed_volume(self) -> float:
        a, b, c = self.face_corner_positions()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an E x 2 array, lower index first."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def edge_graph(self) -> sp.csr_array:
        """Symmetric CSR adjacency with Euclidean edge lengths as weights."""
        e = self.edges()
        w = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        vals = np.concatenate([w, w])
        return sp.csr_array((vals, (rows, cols)), shape=(n, n))

    def angle_deficit(self) -> np.ndarray:
        """Discrete curvature per vertex: |2*pi - sum of incident angles|."""
        a, b, c = self.face_corner_positions()
        total = np.zeros(self.n_vertices)
        corners = ((a, b, c), (b, c, a), (c, a, b))
        for k, (p, q, r) in enumerate(corners):
            u = q - p
            v = r - p
            nu = np.linalg.norm(u, axis=1)
            nv = np.linalg.norm(v, axis=1)
            denom = np.maximum(nu * nv, 1e-300)
            cosang = np.clip(np.einsum("ij,ij->i", u, v) / denom, -1.0, 1.0)
            np.add.at(total, self.faces[:, k], np.arccos(cosang))
        return np.abs(2.0 * np.pi - total)


@dataclass(frozen=True)
class SurfaceSampleSet:
    """Per-frame candidate surface points with their token-attention rows."""

    frame: int
    points: np.ndarray
    token_attention: RowStochasticMap

    def __post_init__(self):
        pts = _as_f64(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"sample points must be Sx3, got {pts.shape}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.token_attention.rows != pts.shape[0]:
            raise ValidationError(
                f"token_attention has {self.token_attention.rows} rows "
                f"for {pts.shape[0]} sample points")

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class LatentTokenMeta:
    """Sizes of the latent token grid: N tokens of dimension d over F frames."""

    token_count: int
    dim: int
    frame_count: int

    def __post_init__(self):
        if self.token_count <= 0 or self.dim <= 0 or self.frame_count < 1:
            raise ValidationError(
                f"invalid token meta N={self.token_count} d={self.dim} "
                f"F={self.frame_count}")
