"""2D patch tracks, patch-vertex bridges, pixel lifting, 3D trajectories.

The same token transport that carries a mesh vertex across time carries an
image patch: a patch's token row crosses the temporal map and lands on the
target frame's patch rows, giving a 2D track. Composing the two anchor-
frame attentions instead links patches to mesh vertices directly, which
supplies the 2D-3D matches for camera recovery. Lifting a pixel through
the recovered camera onto the anchor mesh yields a barycentric surface
anchor; carrying that anchor through the animated meshes and back through
the camera pose produces a 3D trajectory in anchor-camera coordinates.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateGeometryError, ValidationError
from .geom import RowStochasticMap, TriMesh
from .pnp import CameraIntrinsics, CameraPose

__all__ = [
    "PatchGrid",
    "PatchTrack",
    "PatchBridges",
    "PnPMatches",
    "SurfaceAnchor",
    "Track3D",
    "track2d",
    "bridge_patch_to_vertex",
    "bridge_vertex_to_patch",
    "bridge_foreground",
    "collect_pnp_matches",
    "lift_pixel",
    "track4d",
]


# --------------------------------------------------------------------------
# patch grid


@dataclass(frozen=True)
class PatchGrid:
    """Row-major grid of square image patches.

    Patch ``p`` sits at grid row ``p // width`` and column ``p % width``;
    its center pixel is offset half a patch from the cell's top-left
    corner. Pixel coordinates are (u, v) = (along width, along height).
    """

    height: int
    width: int
    patch_px: float

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise ValidationError(
                f"grid dims must be positive, got {self.height}x{self.width}")
        if not (np.isfinite(self.patch_px) and self.patch_px > 0):
            raise ValidationError(
                f"patch size must be positive, got {self.patch_px}")
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "patch_px", float(self.patch_px))

    @property
    def count(self) -> int:
        return self.height * self.width

    def center(self, patch: int) -> np.ndarray:
        """Center pixel (u, v) of one patch."""
        p = self._check_patch(patch)
        row, col = divmod(p, self.width)
        return np.array([(col + 0.5) * self.patch_px,
                         (row + 0.5) * self.patch_px])

    def centers(self) -> np.ndarray:
        """Center pixels of every patch, shape (count, 2), patch order."""
        rows, cols = np.divmod(np.arange(self.count), self.width)
        return np.stack([(cols + 0.5) * self.patch_px,
                         (rows + 0.5) * self.patch_px], axis=1)

    def patch_at(self, pixel) -> int:
        """Patch whose cell contains the pixel (clamped to the grid)."""
        u, v = np.asarray(pixel, dtype=float)
        col = int(np.clip(np.floor(u / self.patch_px), 0, self.width - 1))
        row = int(np.clip(np.floor(v / self.patch_px), 0, self.height - 1))
        return row * self.width + col

    def neighborhood(self, patch: int) -> np.ndarray:
        """In-bounds patches of the 3x3 block around one patch, row-major."""
        p = self._check_patch(patch)
        row, col = divmod(p, self.width)
        out = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = row + dr, col + dc
                if 0 <= r < self.height and 0 <= c < self.width:
                    out.append(r * self.width + c)
        return np.array(out, dtype=np.int64)

    def _check_patch(self, patch: int) -> int:
        p = int(patch)
        if not 0 <= p < self.count:
            raise ValidationError(
                f"patch {p} outside grid of {self.count} patches")
        return p


# --------------------------------------------------------------------------
# map plumbing


def _as_map(value) -> RowStochasticMap:
    if isinstance(value, RowStochasticMap):
        return value
    return RowStochasticMap(value)


def _per_frame_maps(maps, kind: str) -> list[RowStochasticMap]:
    """Normalize a stacked (F, r, c) array or a sequence of per-frame maps."""
    if isinstance(maps, np.ndarray) and maps.ndim == 3:
        return [_as_map(maps[f]) for f in range(maps.shape[0])]
    if isinstance(maps, (RowStochasticMap,)) or sp.issparse(maps):
        raise ValidationError(f"{kind} must be one map per frame")
    return [_as_map(m) for m in maps]


def _dense_row(amap: RowStochasticMap, i: int) -> np.ndarray:
    return amap.row(i)


def _transport(row: np.ndarray, tmap: RowStochasticMap) -> np.ndarray:
    if tmap.is_sparse:
        return np.asarray(tmap.data.T @ row)
    return row @ tmap.data


def _right_rows_product(amap: RowStochasticMap, vec: np.ndarray) -> np.ndarray:
    """scores[i] = <amap row i, vec> for every row at once."""
    if amap.is_sparse:
        return np.asarray(amap.data @ vec)
    return amap.data @ vec


# --------------------------------------------------------------------------
# 2D tracking


@dataclass(frozen=True)
class PatchTrack:
    """One query patch's per-frame matches.

    ``pixels`` holds sub-patch positions when a grid was supplied (soft
    blend of the 3x3 block around the winning patch, or plain centers when
    refinement is off) and is None otherwise.
    """

    query: int
    patch_indices: np.ndarray
    confidences: np.ndarray
    pixels: np.ndarray | None = None

    def __post_init__(self):
        idx = np.ascontiguousarray(np.asarray(self.patch_indices,
                                              dtype=np.int64))
        conf = np.ascontiguousarray(np.asarray(self.confidences, dtype=float))
        if idx.ndim != 1 or conf.shape != idx.shape:
            raise ValidationError(
                f"per-frame arrays disagree: {idx.shape} vs {conf.shape}")
        object.__setattr__(self, "patch_indices", idx)
        object.__setattr__(self, "confidences", conf)
        if self.pixels is not None:
            px = np.ascontiguousarray(np.asarray(self.pixels, dtype=float))
            if px.shape != (idx.shape[0], 2):
                raise ValidationError(
                    f"pixels must be Fx2, got {px.shape}")
            object.__setattr__(self, "pixels", px)

    @property
    def frames(self) -> int:
        return self.patch_indices.shape[0]


def _refine_pixel(scores: np.ndarray, grid: PatchGrid, patch: int) -> np.ndarray:
    """Sub-patch position: score-weighted blend of the centers of the 3x3
    block around the winning patch (in-bounds part); falls back to the
    plain center when the block carries no mass."""
    block = grid.neighborhood(patch)
    weights = scores[block]
    total = weights.sum()
    if total <= 0.0:
        return grid.center(patch)
    return (weights @ grid.centers()[block]) / total


def track2d(query: int, anchor_patches, temporal, frame_patches,
            grid: PatchGrid | None = None, refine: bool = True) -> PatchTrack:
    """Track one anchor patch across frames through the token maps.

    Per frame: transport the query patch's token row through that frame's
    temporal map, then score every candidate patch by the inner product
    with its own token row; the winner is the highest score (ties toward
    the lower patch index) and the confidence is that score.
    """
    amap = _as_map(anchor_patches)
    tmaps = _per_frame_maps(temporal, "temporal maps")
    fmaps = _per_frame_maps(frame_patches, "frame patch maps")
    if len(tmaps) != len(fmaps):
        raise ValidationError(
            f"{len(tmaps)} temporal maps but {len(fmaps)} frame patch maps")
    n_patches, n_tokens = amap.shape
    q = int(query)
    if not 0 <= q < n_patches:
        raise ValidationError(
            f"query patch {q} outside {n_patches} anchor patches")
    if grid is not None and grid.count != n_patches:
        raise ValidationError(
            f"grid has {grid.count} cells but maps carry {n_patches} patches")

    row = _dense_row(amap, q)
    indices = np.empty(len(tmaps), dtype=np.int64)
    confidences = np.empty(len(tmaps), dtype=float)
    pixels = np.empty((len(tmaps), 2), dtype=float) if grid is not None else None
    for f, (tmap, fmap) in enumerate(zip(tmaps, fmaps)):
        if tmap.rows != n_tokens or tmap.cols != tmap.rows:
            raise ValidationError(
                f"frame {f}: temporal map {tmap.shape} does not act on "
                f"{n_tokens} tokens")
        if fmap.cols != n_tokens:
            raise ValidationError(
                f"frame {f}: patch map has {fmap.cols} token columns, "
                f"expected {n_tokens}")
        if fmap.rows != n_patches:
            raise ValidationError(
                f"frame {f}: {fmap.rows} candidate patches, expected "
                f"{n_patches}")
        transported = _transport(row, tmap)
        scores = _right_rows_product(fmap, transported)
        p = int(np.argmax(scores))
        indices[f] = p
        confidences[f] = scores[p]
        if grid is not None:
            pixels[f] = _refine_pixel(scores, grid, p) if refine \
                else grid.center(p)
    return PatchTrack(q, indices, confidences, pixels)


# --------------------------------------------------------------------------
# patch <-> vertex bridging


def _bridge_scores(row: np.ndarray, other: RowStochasticMap) -> np.ndarray:
    if other.cols != row.shape[0]:
        raise ValidationError(
            f"maps disagree on token count: row has {row.shape[0]}, "
            f"map has {other.cols}")
    return _right_rows_product(other, row)


def bridge_patch_to_vertex(patch: int, patch_map, vertex_map) -> int:
    """Vertex whose token row best matches one patch's token row (inner
    product over shared tokens; ties toward the lower vertex index)."""
    pmap, vmap = _as_map(patch_map), _as_map(vertex_map)
    p = int(patch)
    if not 0 <= p < pmap.rows:
        raise ValidationError(f"patch {p} outside {pmap.rows} patches")
    return int(np.argmax(_bridge_scores(pmap.row(p), vmap)))


def bridge_vertex_to_patch(vertex: int, patch_map, vertex_map) -> int:
    """Patch whose token row best matches one vertex's token row."""
    pmap, vmap = _as_map(patch_map), _as_map(vertex_map)
    v = int(vertex)
    if not 0 <= v < vmap.rows:
        raise ValidationError(f"vertex {v} outside {vmap.rows} vertices")
    return int(np.argmax(_bridge_scores(vmap.row(v), pmap)))


@dataclass(frozen=True)
class PatchBridges:
    """Per-foreground-patch vertex matches with their match scores."""

    patch_indices: np.ndarray
    vertex_indices: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.patch_indices, dtype=np.int64))
        v = np.ascontiguousarray(np.asarray(self.vertex_indices, dtype=np.int64))
        c = np.ascontiguousarray(np.asarray(self.confidences, dtype=float))
        if not (p.ndim == 1 and p.shape == v.shape == c.shape):
            raise ValidationError(
                f"bridge arrays disagree: {p.shape}, {v.shape}, {c.shape}")
        object.__setattr__(self, "patch_indices", p)
        object.__setattr__(self, "vertex_indices", v)
        object.__setattr__(self, "confidences", c)

    def __len__(self) -> int:
        return self.patch_indices.shape[0]


def bridge_foreground(patch_map, vertex_map, foreground,
                      chunk_rows: int = 256) -> PatchBridges:
    """Bridge every foreground patch to its best-matching vertex.

    Runs the patch-row x vertex-row inner products in row chunks so the
    (patches x vertices) score block never materializes whole.
    """
    pmap, vmap = _as_map(patch_map), _as_map(vertex_map)
    if pmap.cols != vmap.cols:
        raise ValidationError(
            f"maps disagree on token count: {pmap.cols} vs {vmap.cols}")
    mask = np.asarray(foreground, dtype=bool)
    if mask.shape != (pmap.rows,):
        raise ValidationError(
            f"foreground mask has shape {mask.shape}, expected "
            f"({pmap.rows},)")
    patches = np.flatnonzero(mask)
    if patches.size == 0:
        raise ValidationError("foreground mask selects no patches")

    vdata = vmap.data
    best_idx = np.empty(patches.size, dtype=np.int64)
    best_val = np.empty(patches.size, dtype=float)
    for start in range(0, patches.size, chunk_rows):
        sel = patches[start:start + chunk_rows]
        if pmap.is_sparse:
            rows = pmap.data[sel, :].toarray()
        else:
            rows = pmap.data[sel]
        if vmap.is_sparse:
            scores = np.asarray((vdata @ rows.T).T)
        else:
            scores = rows @ vdata.T
        idx = np.argmax(scores, axis=1)
        best_idx[start:start + chunk_rows] = idx
        best_val[start:start + chunk_rows] = scores[np.arange(len(sel)), idx]
    return PatchBridges(patches, best_idx, best_val)


@dataclass(frozen=True)
class PnPMatches:
    """2D-3D match list: patch-center pixels against anchor vertices."""

    pixels: np.ndarray
    points: np.ndarray
    confidences: np.ndarray
    patch_indices: np.ndarray
    vertex_indices: np.ndarray

    def __len__(self) -> int:
        return self.pixels.shape[0]


def collect_pnp_matches(grid: PatchGrid, bridges: PatchBridges,
                        mesh) -> PnPMatches:
    """Turn patch-vertex bridges into (pixel, 3D point) matches: one match
    per bridged patch, pixel at the patch center, point at the matched
    anchor vertex; bridge scores ride along for downstream filtering."""
    vertices = mesh.vertices if isinstance(mesh, TriMesh) \
        else np.asarray(mesh, dtype=float)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ValidationError(
            f"vertices must be Vx3, got {vertices.shape}")
    if len(bridges) == 0:
        raise ValidationError("no foreground matches to collect")
    if bridges.patch_indices.max(initial=-1) >= grid.count:
        raise ValidationError(
            f"bridge patch {int(bridges.patch_indices.max())} outside grid "
            f"of {grid.count} patches")
    if bridges.vertex_indices.max(initial=-1) >= vertices.shape[0]:
        raise ValidationError(
            f"bridge vertex {int(bridges.vertex_indices.max())} outside "
            f"{vertices.shape[0]} vertices")
    pixels = grid.centers()[bridges.patch_indices]
    points = vertices[bridges.vertex_indices]
    return PnPMatches(pixels, points, bridges.confidences.copy(),
                      bridges.patch_indices.copy(),
                      bridges.vertex_indices.copy())


# --------------------------------------------------------------------------
# pixel lifting


@dataclass(frozen=True)
class SurfaceAnchor:
    """A point pinned to the mesh surface: a face plus barycentric weights
    over that face's three vertices (ids recorded so the anchor can ride
    any vertex animation without re-touching connectivity)."""

    face: int
    weights: np.ndarray
    vertex_ids: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=float))
        ids = np.ascontiguousarray(np.asarray(self.vertex_ids, dtype=np.int64))
        if w.shape != (3,) or ids.shape != (3,):
            raise ValidationError(
                f"anchor needs 3 weights and 3 vertex ids, got "
                f"{w.shape} and {ids.shape}")
        if np.any(w < -1e-12):
            raise ValidationError(
                f"barycentric weights must be non-negative, got {w}")
        total = w.sum()
        if not np.isfinite(total) or abs(total - 1.0) > 1e-8:
            raise ValidationError(
                f"barycentric weights sum to {total}, expected 1")
        w = np.clip(w, 0.0, None)
        w = w / w.sum()
        w.flags.writeable = False
        ids.flags.writeable = False
        object.__setattr__(self, "face", int(self.face))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "vertex_ids", ids)


def lift_pixel(pixel, pose: CameraPose, intrinsics: CameraIntrinsics,
               mesh: TriMesh) -> SurfaceAnchor:
    """Cast the pixel's camera ray onto the mesh and return the nearest
    front hit as a barycentric surface anchor.

    The ray leaves the camera center, crosses the pixel on the normalized
    image plane, and is intersected against every face in object space
    (the pose maps object to camera, so its inverse carries the ray over);
    among positive-depth hits the closest wins, ties toward the lower face
    index.
    """
    if mesh.faces.shape[0] == 0:
        raise ValidationError("mesh has no faces to intersect")
    norm = intrinsics.pixels_to_normalized(np.asarray(pixel, dtype=float))
    direction_cam = np.array([norm[0], norm[1], 1.0])
    origin = -pose.rotation.T @ pose.translation
    direction = pose.rotation.T @ direction_cam

    tri = mesh.vertices[mesh.faces]          # (F, 3, 3)
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(direction, e2)
    det = np.einsum("fd,fd->f", e1, pvec)
    scale = float(np.abs(det).max(initial=0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_det = np.where(np.abs(det) > 1e-14 * max(scale, 1.0),
                           1.0 / det, np.nan)
        tvec = origin - v0
        u = np.einsum("fd,fd->f", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1)
        v = np.einsum("d,fd->f", direction, qvec) * inv_det
        depth = np.einsum("fd,fd->f", e2, qvec) * inv_det
    tol = 1e-9
    hits = (np.isfinite(depth) & (depth > tol)
            & (u >= -tol) & (v >= -tol) & (u + v <= 1.0 + tol))
    if not np.any(hits):
        raise DegenerateGeometryError(
            f"pixel {tuple(np.asarray(pixel, dtype=float))} is off-surface: "
            f"its camera ray misses every face")
    masked = np.where(hits, depth, np.inf)
    face = int(np.argmin(masked))
    bu, bv = float(u[face]), float(v[face])
    weights = np.clip(np.array([1.0 - bu - bv, bu, bv]), 0.0, None)
    weights = weights / weights.sum()
    return SurfaceAnchor(face, weights, mesh.faces[face])


# --------------------------------------------------------------------------
# 3D tracking


@dataclass(frozen=True)
class Track3D:
    """Per-frame 3D positions in anchor-camera coordinates with a
    visibility flag per frame."""

    points: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        vis = np.ascontiguousarray(np.asarray(self.visible, dtype=bool))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"points must be Fx3, got {pts.shape}")
        if vis.shape != (pts.shape[0],):
            raise ValidationError(
                f"{pts.shape[0]} frames but {vis.shape} visibility flags")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visible", vis)

    @property
    def frames(self) -> int:
        return self.points.shape[0]


def _frame_vertices(frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        arr = np.asarray(frames, dtype=float)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(
                f"animated vertices must be FxVx3, got {arr.shape}")
        return arr
    meshes = list(frames)
    if not meshes:
        raise ValidationError("no animated frames given")
    return np.stack([m.vertices if isinstance(m, TriMesh)
                     else np.asarray(m, dtype=float) for m in meshes])


def track4d(anchor: SurfaceAnchor, frames, pose: CameraPose,
            visible=None) -> Track3D:
    """Carry a surface anchor through the animated meshes into anchor-
    camera coordinates: per frame, blend the anchor's three vertices by
    its barycentric weights and push the blend through the camera pose."""
    verts = _frame_vertices(frames)
    n_frames, n_vertices = verts.shape[0], verts.shape[1]
    if anchor.vertex_ids.max() >= n_vertices:
        raise ValidationError(
            f"anchor references vertex {int(anchor.vertex_ids.max())} but "
            f"frames carry only {n_vertices} vertices")
    object_pts = np.einsum("i,fid->fd", anchor.weights,
                           verts[:, anchor.vertex_ids, :])
    camera_pts = object_pts @ pose.rotation.T + pose.translation
    if visible is None:
        vis = np.ones(n_frames, dtype=bool)
    else:
        vis = np.asarray(visible, dtype=bool)
        if vis.shape != (n_frames,):
            raise ValidationError(
                f"visibility has shape {vis.shape}, expected ({n_frames},)")
    return Track3D(camera_pts, vis)
