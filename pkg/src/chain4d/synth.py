"""Synthetic articulated scenes with analytically known deformations.

The generator builds a capped-cylinder mesh, deforms it with closed-form
per-frame programs (rigid orbit, hinge, bend, twist), and emits the full
attention stack a real backbone would produce — anchor-vertex rows, temporal
token maps, and per-frame surface-sample rows — all consistent with the
known correspondences. Because the ground truth is exact, any error measured
downstream belongs to the pipeline under test, not to the harness.

Emission design, in brief: tokens sit at farthest-point-sampled surface
sites; every attention row is a softmax of squared point-to-site distances
at bandwidth h = 1.5x the mean site spacing; temporal maps are the (exact)
permutation induced by transporting sites through the deformation; the
candidate set for each frame repeats every deformed vertex location
``bundle`` times, so a correctly ranked top-k blend collapses onto the true
location. A noise level in [0, 1] convexly blends every temporal and sample
row with a fresh symmetric Dirichlet row, degrading recovery smoothly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .animation import sample_landmarks_fps
from .archive import ChainArchive
from .errors import ValidationError
from .geom import RowStochasticMap, SurfaceSampleSet, TriMesh, softmax_rows
from .pnp import CameraIntrinsics, CameraPose
from .rollout import BackboneInterface, DenoiseStepTrace, ReinforcementSet, reinforce

__all__ = [
    "SyntheticScene",
    "NoiseSchedule",
    "PatchAttention",
    "SyntheticBackbone",
    "generate_scene",
    "emit_attention",
    "emit_patch_attention",
    "scene_kinds",
]

_KINDS = ("rigid-orbit", "hinge", "bend", "twist")

# Cylinder body proportions (object units). The bounding-box diagonal of the
# anchor mesh is ~1.1, so "object units" and "fractions of the object" read
# on the same scale.
_RADIUS = 0.18
_LENGTH = 1.0


def scene_kinds() -> tuple:
    """Supported deformation-program names."""
    return _KINDS


# ---------------------------------------------------------------------------
# Scene geometry
# ---------------------------------------------------------------------------

def _cylinder_counts(budget: int) -> tuple[int, int, int]:
    """Pick grid counts (around, along, cap rings) whose vertex total best
    matches the requested budget."""
    best = None
    for n_th in range(8, 512):
        n_y = max(2, round(n_th * _LENGTH / (2.0 * np.pi * _RADIUS)))
        n_r = max(1, round(_RADIUS / (2.0 * np.pi * _RADIUS / n_th)))
        total = n_th * n_y + 2 * (n_th * (n_r - 1) + 1)
        cand = (abs(total - budget), n_th, n_y, n_r)
        if best is None or cand < best:
            best = cand
        if total > budget * 2:
            break
    _, n_th, n_y, n_r = best
    return n_th, n_y, n_r


def _capped_cylinder(budget: int, rng: np.random.Generator) -> TriMesh:
    """Capped cylinder with ~budget vertices on a lightly jittered grid.

    The jitter (a few percent of the local spacing, in the parametric
    domain, so every vertex stays exactly on the surface) breaks the grid's
    symmetries without disturbing its near-uniform spacing.
    """
    n_th, n_y, n_r = _cylinder_counts(budget)
    d_th = 2.0 * np.pi / n_th
    d_y = _LENGTH / (n_y - 1)

    verts: list[np.ndarray] = []
    # Side grid, row-major by ring. Boundary rings keep exact y so the caps
    # attach flush.
    for iy in range(n_y):
        y = iy * d_y
        jit_th = rng.uniform(-0.04, 0.04, n_th) * d_th
        if 0 < iy < n_y - 1:
            jit_y = rng.uniform(-0.04, 0.04, n_th) * d_y
        else:
            jit_y = np.zeros(n_th)
        th = np.arange(n_th) * d_th + jit_th
        verts.append(np.c_[_RADIUS * np.cos(th), y + jit_y,
                           _RADIUS * np.sin(th)])
    side = np.concatenate(verts)

    faces: list[tuple[int, int, int]] = []
    for iy in range(n_y - 1):
        for i in range(n_th):
            a = iy * n_th + i
            b = iy * n_th + (i + 1) % n_th
            c = (iy + 1) * n_th + (i + 1) % n_th
            d = (iy + 1) * n_th + i
            faces.append((a, b, c))
            faces.append((a, c, d))

    all_verts = [side]
    next_id = side.shape[0]

    def build_cap(rim_start: int, y: float, flip: bool) -> int:
        nonlocal next_id
        ring_prev = np.arange(rim_start, rim_start + n_th)
        for j in range(1, n_r):
            radius = _RADIUS * (n_r - j) / n_r
            jit = rng.uniform(-0.04, 0.04, n_th) * d_th
            th = np.arange(n_th) * d_th + jit
            ring_pts = np.c_[radius * np.cos(th),
                             np.full(n_th, y),
                             radius * np.sin(th)]
            all_verts.append(ring_pts)
            ring = np.arange(next_id, next_id + n_th)
            next_id += n_th
            for i in range(n_th):
                a, b = ring_prev[i], ring_prev[(i + 1) % n_th]
                c, d = ring[(i + 1) % n_th], ring[i]
                tri1, tri2 = (a, b, c), (a, c, d)
                if flip:
                    tri1, tri2 = tri1[::-1], tri2[::-1]
                faces.append(tri1)
                faces.append(tri2)
            ring_prev = ring
        all_verts.append(np.array([[0.0, y, 0.0]]))
        center = next_id
        next_id += 1
        for i in range(n_th):
            tri = (ring_prev[i], ring_prev[(i + 1) % n_th], center)
            faces.append(tri[::-1] if flip else tri)
        return center

    build_cap(rim_start=(n_y - 1) * n_th, y=_LENGTH, flip=False)
    build_cap(rim_start=0, y=0.0, flip=True)

    vertices = np.concatenate(all_verts)
    face_arr = np.array(faces, dtype=np.int64)
    # Orient outward: a closed mesh with positive signed volume has
    # outward-facing triangles.
    v0 = vertices[face_arr[:, 0]]
    v1 = vertices[face_arr[:, 1]]
    v2 = vertices[face_arr[:, 2]]
    volume = np.einsum("ij,ij->", v0, np.cross(v1, v2)) / 6.0
    if volume < 0.0:
        face_arr = face_arr[:, ::-1]
    return TriMesh(vertices, face_arr)


def _smoothstep(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    u = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


@dataclass(frozen=True)
class SyntheticScene:
    """Analytic articulated scene: anchor mesh + per-frame deformation map.

    ``deform(f, points)`` evaluates the frame-f deformation program on any
    points; frame 0 is always the identity, and the program is continuous
    in f. The fixed camera is positioned to keep the whole motion in view.
    """

    kind: str
    mesh: TriMesh
    frame_count: int
    seed: int
    magnitude: float
    camera: CameraPose
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(
                f"unknown scene kind {self.kind!r}; choose from {_KINDS}")
        if self.frame_count < 1:
            raise ValidationError(
                f"need at least one frame, got {self.frame_count}")

    def _phase(self, frame: int) -> float:
        if not (0 <= frame < self.frame_count):
            raise ValidationError(
                f"frame {frame} outside [0, {self.frame_count})")
        if self.frame_count == 1:
            return 0.0
        return self.magnitude * frame / (self.frame_count - 1)

    def deform(self, frame: int, points: np.ndarray) -> np.ndarray:
        """Apply the frame-f deformation program to Nx3 points."""
        pts = np.asarray(points, dtype=np.float64)
        squeeze = pts.ndim == 1
        pts = np.atleast_2d(pts)
        a = self._phase(frame)
        if a == 0.0:
            out = pts.copy()
        elif self.kind == "rigid-orbit":
            phi = a * (np.pi / 3.0)
            c, s = np.cos(phi), np.sin(phi)
            rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
            pivot = np.array([3.0 * _RADIUS, 0.0, 0.0])
            lift = np.array([0.0, 0.25 * _LENGTH * a, 0.0])
            out = (pts - pivot) @ rot.T + pivot + lift
        elif self.kind == "hinge":
            angle = a * (np.pi / 4.0) * _smoothstep(
                pts[:, 1], 0.45 * _LENGTH, 0.55 * _LENGTH)
            out = pts.copy()
            # Only touch moving-link points: the fixed link stays bitwise
            # stationary rather than merely round-trip-stable.
            m = angle != 0.0
            c, s = np.cos(angle[m]), np.sin(angle[m])
            pivot_y = 0.5 * _LENGTH
            dy = pts[m, 1] - pivot_y
            dz = pts[m, 2]
            out[m, 1] = pivot_y + c * dy - s * dz
            out[m, 2] = s * dy + c * dz
        elif self.kind == "bend":
            kappa = a * (np.pi / 3.0) / _LENGTH
            rho = 1.0 / kappa
            x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
            out = np.empty_like(pts)
            out[:, 0] = rho - (rho - x) * np.cos(kappa * y)
            out[:, 1] = (rho - x) * np.sin(kappa * y)
            out[:, 2] = z
        else:  # twist
            phi = a * (np.pi / 2.0) * pts[:, 1] / _LENGTH
            c, s = np.cos(phi), np.sin(phi)
            out = pts.copy()
            out[:, 0] = c * pts[:, 0] - s * pts[:, 2]
            out[:, 2] = s * pts[:, 0] + c * pts[:, 2]
        return out[0] if squeeze else out

    def vertices_at(self, frame: int) -> np.ndarray:
        """Exact ground-truth vertex positions at a frame."""
        return self.deform(frame, self.mesh.vertices)

    def mesh_at(self, frame: int) -> TriMesh:
        """Ground-truth deformed mesh (anchor topology) at a frame."""
        return TriMesh(self.vertices_at(frame), self.mesh.faces)

    @property
    def bbox_diagonal(self) -> float:
        v = self.mesh.vertices
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))


def _default_camera() -> tuple[CameraPose, CameraIntrinsics]:
    # Look at the cylinder's midpoint from a point off every symmetry axis,
    # far enough back that every deformation program stays in frame.
    target = np.array([0.0, 0.5 * _LENGTH, 0.0])
    eye = np.array([1.1, 1.3, 2.4])
    forward = target - eye
    forward /= np.linalg.norm(forward)
    up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up_hint)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return (CameraPose(rot, -rot @ eye), CameraIntrinsics())


def generate_scene(kind: str, frames: int, seed: int, *,
                   vertex_budget: int = 2000,
                   magnitude: float = 1.0) -> SyntheticScene:
    """Deterministically build an articulated scene.

    Same arguments, same scene, bitwise — the only randomness is the seeded
    grid jitter. ``magnitude`` scales the final-frame deformation extent.
    """
    if kind not in _KINDS:
        raise ValidationError(
            f"unknown scene kind {kind!r}; choose from {_KINDS}")
    if frames < 1:
        raise ValidationError(f"need at least one frame, got {frames}")
    if vertex_budget < 32:
        raise ValidationError(
            f"vertex budget too small to mesh a cylinder: {vertex_budget}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    mesh = _capped_cylinder(vertex_budget, rng)
    camera, intrinsics = _default_camera()
    return SyntheticScene(
        kind=kind, mesh=mesh, frame_count=frames, seed=seed,
        magnitude=float(magnitude), camera=camera, intrinsics=intrinsics)


# ---------------------------------------------------------------------------
# Attention emission
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Attention corruption over a rollout.

    ``level`` is the per-step blend weight toward a random stochastic row
    (0 = clean); ``drift`` adds to it once per window, emulating the slow
    attention drift of long autoregressive rollouts. Effective levels are
    capped just below 1 so a sliver of signal always survives.
    """

    level: float = 0.0
    drift: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.level <= 1.0):
            raise ValidationError(f"noise level must lie in [0, 1], got {self.level}")
        if self.drift < 0.0:
            raise ValidationError(f"drift must be >= 0, got {self.drift}")

    def effective(self, window: int) -> float:
        if window < 0:
            raise ValidationError(f"window index must be >= 0, got {window}")
        return min(self.level + self.drift * window, 0.98)


def _site_spacing(sites: np.ndarray) -> float:
    from scipy.spatial import cKDTree
    d, _ = cKDTree(sites).query(sites, k=2)
    return float(d[:, 1].mean())


def _gauss_rows_dense(points: np.ndarray, sites: np.ndarray,
                      h: float) -> np.ndarray:
    rows = np.empty((points.shape[0], sites.shape[0]))
    chunk = max(1, int(4e6) // max(sites.shape[0], 1))
    for lo in range(0, points.shape[0], chunk):
        hi = min(lo + chunk, points.shape[0])
        d2 = ((points[lo:hi, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
        rows[lo:hi] = softmax_rows(-d2 / (2.0 * h * h)).data
    return rows


def _equalize_row_norms(logits: np.ndarray, mask: np.ndarray | None = None,
                        iters: int = 12) -> np.ndarray:
    """Softmax rows rescaled in sharpness so every row has the same L2 norm.

    Inner-product retrieval ranks candidates correctly only when candidate
    rows share a norm — a sharper row beats a better-aligned one otherwise.
    Each row keeps its own logits (so its support and peak location are
    untouched) but gets a per-row inverse temperature, solved by Newton
    iteration on log-temperature, that brings its L2 norm to the median
    natural norm. ``mask`` marks valid entries for padded/ragged input.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    neg = np.where(mask, logits, -np.inf)
    shifted = neg - neg.max(axis=1, keepdims=True)

    def rows_at(gamma):
        e = np.exp(gamma[:, None] * np.where(mask, shifted, -np.inf))
        e = np.where(mask, e, 0.0)
        return e / e.sum(axis=1, keepdims=True)

    base = rows_at(np.ones(logits.shape[0]))
    target = np.median((base ** 2).sum(axis=1))
    log_g = np.zeros(logits.shape[0])
    for _ in range(iters):
        g = np.exp(log_g)
        p = rows_at(g)
        nsq = (p ** 2).sum(axis=1)
        mu = (p * np.where(mask, shifted, 0.0)).sum(axis=1)
        # d(norm^2)/d(gamma) = 2 * sum p^2 (l - mu); chain rule for log-gamma
        grad = 2.0 * (p ** 2 * (np.where(mask, shifted, 0.0)
                                - mu[:, None])).sum(axis=1) * g
        f = np.log(nsq) - np.log(target)
        slope = grad / nsq
        step = np.where(np.abs(slope) > 1e-12, f / np.where(
            np.abs(slope) > 1e-12, slope, 1.0), 0.0)
        log_g = np.clip(log_g - step, np.log(0.05), np.log(20.0))
    return rows_at(np.exp(log_g))


def _gauss_rows_sparse(points: np.ndarray, sites: np.ndarray, h: float,
                       reach: float = 3.5,
                       equalize: bool = False) -> sp.csr_array:
    """Softmax rows truncated beyond ``reach`` bandwidths and renormalized.

    Keeps only the sites that carry non-negligible mass, so paper-scale maps
    stay sparse the way real sparse attention does. ``equalize`` routes the
    truncated logits through L2-norm equalization (see
    :func:`_equalize_row_norms`).
    """
    from scipy.spatial import cKDTree
    radius = reach * h
    tree = cKDTree(sites)
    neighbors = tree.query_ball_point(points, r=radius)
    lengths = np.array([max(len(nb), 1) for nb in neighbors])
    width = int(lengths.max())
    n = points.shape[0]
    cols = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    for i, nb in enumerate(neighbors):
        nb = np.sort(np.asarray(nb, dtype=np.int64))
        if nb.size == 0:
            nb = np.array([tree.query(points[i])[1]], dtype=np.int64)
        cols[i, :nb.size] = nb
        mask[i, :nb.size] = True
        lengths[i] = nb.size
    d2 = ((points[:, None, :] - sites[cols]) ** 2).sum(axis=2)
    logits = np.where(mask, -d2 / (2.0 * h * h), -np.inf)
    if equalize:
        rows = _equalize_row_norms(logits, mask)
    else:
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        e = np.where(mask, e, 0.0)
        rows = e / e.sum(axis=1, keepdims=True)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(lengths, out=indptr[1:])
    return sp.csr_array((rows[mask], cols[mask], indptr),
                        shape=(n, sites.shape[0]))


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _noise_rows_dense(rows: np.ndarray, level: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Convex blend of each row with its own symmetric random stochastic row
    (a flat-Dirichlet draw, realized as normalized exponentials)."""
    if level == 0.0:
        return rows
    raw = rng.standard_exponential(rows.shape)
    raw /= raw.sum(axis=1, keepdims=True)
    return (1.0 - level) * rows + level * raw


def _apply_row_noise(mapping, level: float, rng: np.random.Generator):
    if level == 0.0:
        return mapping
    if sp.issparse(mapping):
        dense = np.asarray(mapping.todense())
    else:
        dense = np.asarray(mapping)
    return _noise_rows_dense(dense, level, rng)


class _Emitter:
    """Shared machinery: sites, permutations, and per-frame map construction
    for one anchor frame of one scene."""

    def __init__(self, scene: SyntheticScene, n_tokens: int, *,
                 bundle: int, sparse: bool, anchor_frame: int = 0):
        n_verts = scene.mesh.vertices.shape[0]
        if n_tokens > n_verts:
            raise ValidationError(
                f"cannot anchor {n_tokens} tokens on {n_verts} vertices")
        if n_tokens < 2:
            raise ValidationError(f"need at least 2 tokens, got {n_tokens}")
        if bundle < 1:
            raise ValidationError(f"bundle must be >= 1, got {bundle}")
        self.scene = scene
        self.n_tokens = n_tokens
        self.bundle = bundle
        self.sparse = sparse
        self.anchor_frame = anchor_frame
        self.site_ids = sample_landmarks_fps(scene.mesh, n_tokens, boost=0.0)
        self._base_sites = scene.mesh.vertices[self.site_ids]

    def _perm(self, frame: int) -> np.ndarray:
        """Storage order of frame-f tokens: the transported anchor site j
        becomes frame token perm[j]. Frames whose deformation is the
        identity keep identity storage, so their temporal map is exactly
        the identity matrix."""
        moved = self.scene.deform(frame, self._base_sites)
        if np.abs(moved - self._base_sites).max() <= 1e-12:
            return np.arange(self.n_tokens)
        rng = _rng_for(self.scene.seed, 2, frame)
        return rng.permutation(self.n_tokens)

    def frame_sites(self, frame: int) -> np.ndarray:
        moved = self.scene.deform(frame, self._base_sites)
        out = np.empty_like(moved)
        out[self._perm(frame)] = moved
        return out

    def vertex_rows(self, frame: int, equalize: bool = False):
        """Frame-f vertex positions scored against frame-f sites.

        Raw softmax rows for the anchor map; norm-equalized rows (same
        logits, per-row sharpness) for candidate retrieval, where inner
        products must rank alignment rather than row sharpness.
        """
        pts = self.scene.vertices_at(frame)
        sites = self.frame_sites(frame)
        h = 1.5 * _site_spacing(sites)
        if self.sparse:
            return _gauss_rows_sparse(pts, sites, h, equalize=equalize)
        d2 = None
        if equalize:
            chunks = []
            step = max(1, int(4e6) // max(sites.shape[0], 1))
            for lo in range(0, pts.shape[0], step):
                hi = min(lo + step, pts.shape[0])
                d2 = ((pts[lo:hi, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
                chunks.append(-d2 / (2.0 * h * h))
            return _equalize_row_norms(np.concatenate(chunks, axis=0))
        return _gauss_rows_dense(pts, sites, h)

    def anchor_map(self) -> RowStochasticMap:
        return RowStochasticMap(self.vertex_rows(self.anchor_frame))

    def temporal_matrix(self, frame: int) -> np.ndarray:
        """Exact permutation map from anchor-frame tokens to frame-f tokens."""
        pa = self._perm(self.anchor_frame)
        pf = self._perm(frame)
        t = np.zeros((self.n_tokens, self.n_tokens))
        t[pa, pf] = 1.0
        return t

    def sample_points(self, frame: int) -> np.ndarray:
        locations = self.scene.vertices_at(frame)
        return np.repeat(locations, self.bundle, axis=0)

    def sample_rows(self, frame: int):
        rows = self.vertex_rows(frame, equalize=True)
        if self.sparse:
            idx = np.repeat(np.arange(rows.shape[0]), self.bundle)
            return sp.csr_array(rows[idx])
        return np.repeat(rows, self.bundle, axis=0)

    def build_trace(self, frames, step: int, noise: float,
                    override: ReinforcementSet | None = None,
                    noise_key: tuple = ()) -> DenoiseStepTrace:
        frames = [int(f) for f in frames]
        anchor = self.anchor_map()
        temporal = []
        samples = []
        for local, f in enumerate(frames):
            t = self.temporal_matrix(f)
            b = self.sample_rows(f)
            if noise > 0.0:
                rng = _rng_for(self.scene.seed, 3, *noise_key, step, f)
                t = _noise_rows_dense(t, noise, rng)
                b = _apply_row_noise(b, noise, rng)
            tmap = RowStochasticMap(t)
            if override is not None:
                tmap = reinforce(tmap, override.for_frame(local))
            temporal.append(tmap)
            samples.append(SurfaceSampleSet(
                frame=local, points=self.sample_points(f),
                token_attention=RowStochasticMap(b)))
        return DenoiseStepTrace(
            step=step, frames=frames, anchor_map=anchor,
            temporal=temporal, samples=samples)


def emit_attention(scene: SyntheticScene, n_tokens: int,
                   noise_level: float = 0.0, *, steps: int = 1,
                   bundle: int = 16, sparse: bool = False,
                   with_archive: bool = False):
    """Emit the per-step attention stacks for every frame of a scene.

    Returns ``(traces, archive)`` — one :class:`DenoiseStepTrace` per
    denoising step, plus a :class:`ChainArchive` when ``with_archive`` is
    set (None otherwise). At noise 0 the steps are identical, so the clean
    stack is built once and shared.

    ``bundle`` repeats each candidate location so a blend over up to
    ``bundle`` neighbors can collapse onto a single location; ``sparse``
    truncates attention rows to the sites that carry mass, for large-N
    profiles.
    """
    if not (0.0 <= noise_level <= 1.0):
        raise ValidationError(
            f"noise level must lie in [0, 1], got {noise_level}")
    if steps < 1:
        raise ValidationError(f"need at least one step, got {steps}")
    emitter = _Emitter(scene, n_tokens, bundle=bundle, sparse=sparse)
    frames = list(range(scene.frame_count))
    if noise_level == 0.0:
        base = emitter.build_trace(frames, 1, 0.0)
        traces = [base if s == 0 else DenoiseStepTrace(
            step=s + 1, frames=base.frames, anchor_map=base.anchor_map,
            temporal=base.temporal, samples=base.samples)
            for s in range(steps)]
    else:
        traces = [emitter.build_trace(frames, s + 1, noise_level)
                  for s in range(steps)]

    archive = None
    if with_archive:
        archive = ChainArchive(
            frames=scene.frame_count, tokens=n_tokens,
            meta={"scene": scene.kind, "seed": scene.seed,
                  "noise": noise_level, "bundle": bundle,
                  "frames": scene.frame_count, "tokens": n_tokens})
        first = traces[0]
        amap = first.anchor_map
        archive.add("A_va_za",
                    amap.toarray() if amap.is_sparse else amap.data,
                    row_stochastic=True)
        stacked = np.stack([
            t.toarray() if t.is_sparse else np.asarray(t.data)
            for t in first.temporal])
        archive.add("A_za_zf", stacked, row_stochastic=True)
        for f, smp in enumerate(first.samples):
            att = smp.token_attention
            rows = att.toarray() if att.is_sparse else att.data
            archive.add(archive.frame_name("S", f), smp.points)
            archive.add(archive.frame_name("B", f), rows,
                        row_stochastic=True)
        archive.add_anchor_mesh(scene.mesh)
        gt = ChainArchive(frames=scene.frame_count, tokens=n_tokens,
                          meta={"content": "analytic vertex positions"})
        for f in frames:
            gt.add(gt.frame_name("V", f), scene.vertices_at(f))
        archive.attach_groundtruth(gt)
    return traces, archive


# ---------------------------------------------------------------------------
# Patch attention
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchAttention:
    """Image-patch attention stack for one scene under the true camera.

    ``anchor_rows``/``frame_rows`` are patch-to-token maps (background
    patches carry uniform rows and a cleared ``foreground`` flag);
    ``temporal`` holds the same anchor-to-frame token maps the vertex
    emission uses, so patch tracking composes with them directly;
    ``surface_points`` are the exact ray-hit points behind each foreground
    patch center.
    """

    anchor_rows: RowStochasticMap
    frame_rows: tuple
    temporal: tuple
    foreground: tuple
    surface_points: tuple


def _ray_hits(scene: SyntheticScene, frame: int,
              pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched nearest ray/mesh intersections for many pixels at once.

    Returns (hit mask, Px3 surface points); misses get NaN points.
    """
    pose, intr = scene.camera, scene.intrinsics
    verts = scene.vertices_at(frame)
    faces = scene.mesh.faces
    origin = -pose.rotation.T @ pose.translation
    norm = intr.pixels_to_normalized(pixels)
    dirs = np.c_[norm, np.ones(norm.shape[0])] @ pose.rotation
    v0 = verts[faces[:, 0]]
    e1 = verts[faces[:, 1]] - v0
    e2 = verts[faces[:, 2]] - v0
    # The origin is shared by every ray, so tvec/qvec and the depth
    # numerator are per-triangle quantities computed once.
    tvec = origin[None, :] - v0
    qvec = np.cross(tvec, e1)
    t_num = np.einsum("fj,fj->f", e2, qvec)
    n_px = pixels.shape[0]
    best_t = np.full(n_px, np.inf)
    hit_pts = np.full((n_px, 3), np.nan)
    chunk = max(1, int(2e7) // max(faces.shape[0], 1))
    for lo in range(0, n_px, chunk):
        hi = min(lo + chunk, n_px)
        d = dirs[lo:hi]
        pvec = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("fj,pfj->pf", e1, pvec)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = np.einsum("fj,pfj->pf", tvec, pvec) * inv
        v = (d @ qvec.T) * inv
        t = t_num[None, :] * inv
        valid = ok & (u >= -1e-9) & (v >= -1e-9) \
            & (u + v <= 1.0 + 1e-9) & (t > 1e-9)
        t = np.where(valid, t, np.inf)
        local_best = t.min(axis=1)
        sel = np.isfinite(local_best) & (local_best < best_t[lo:hi])
        best_t[lo:hi] = np.where(sel, local_best, best_t[lo:hi])
        pts = origin[None, :] + local_best[:, None] * d
        hit_pts[lo:hi][sel] = pts[sel]
    return np.isfinite(best_t), hit_pts


def emit_patch_attention(scene: SyntheticScene, n_tokens: int,
                         grid) -> PatchAttention:
    """Patch-to-token rows under the scene's true camera.

    Each patch's center ray is cast onto the mesh; foreground patches get a
    softmax row over sites at the back-projected surface point, background
    patches get a uniform row and a cleared foreground flag.
    """
    emitter = _Emitter(scene, n_tokens, bundle=1, sparse=False)
    centers = grid.centers()
    frame_rows = []
    fg_masks = []
    surf_points = []

    def rows_for(frame: int):
        hit, pts = _ray_hits(scene, frame, centers)
        sites = emitter.frame_sites(frame)
        h = 1.5 * _site_spacing(sites)
        rows = np.full((centers.shape[0], n_tokens), 1.0 / n_tokens)
        if hit.any():
            rows[hit] = _gauss_rows_dense(pts[hit], sites, h)
        return RowStochasticMap(rows), hit, pts

    anchor_rows, anchor_fg, anchor_pts = rows_for(0)
    for f in range(scene.frame_count):
        if f == 0:
            frame_rows.append(anchor_rows)
            fg_masks.append(anchor_fg)
            surf_points.append(anchor_pts)
        else:
            r, m, p = rows_for(f)
            frame_rows.append(r)
            fg_masks.append(m)
            surf_points.append(p)
    temporal = tuple(RowStochasticMap(emitter.temporal_matrix(f))
                     for f in range(scene.frame_count))
    return PatchAttention(
        anchor_rows=anchor_rows,
        frame_rows=tuple(frame_rows),
        temporal=temporal,
        foreground=tuple(fg_masks),
        surface_points=tuple(surf_points),
    )


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

class SyntheticBackbone(BackboneInterface):
    """BackboneInterface over a synthetic scene with a noise schedule.

    Traces are deterministic given the scene seed, the anchor, the window
    count, the step, and the frame — so two runs that only differ in the
    reinforcement override see identical noise draws, and the override's
    effect is measured cleanly. ``re_anchor`` advances the window counter,
    which the schedule's drift term reads.
    """

    def __init__(self, scene: SyntheticScene, n_tokens: int,
                 schedule: NoiseSchedule | None = None, *,
                 bundle: int = 16, sparse: bool = False):
        self.scene = scene
        self.n_tokens = n_tokens
        self.schedule = schedule or NoiseSchedule()
        self.bundle = bundle
        self.sparse = sparse
        self._window = 0
        self._emitter = _Emitter(scene, n_tokens, bundle=bundle,
                                 sparse=sparse, anchor_frame=0)

    @property
    def anchor_frame(self) -> int:
        return self._emitter.anchor_frame

    @property
    def window_index(self) -> int:
        return self._window

    def run_step(self, frames, step: int,
                 override: ReinforcementSet | None = None) -> DenoiseStepTrace:
        level = self.schedule.effective(self._window)
        return self._emitter.build_trace(
            frames, step, level, override=override,
            noise_key=(self._window, self._emitter.anchor_frame))

    def re_anchor(self, frame: int) -> tuple[TriMesh, RowStochasticMap]:
        self._window += 1
        self._emitter = _Emitter(
            self.scene, self.n_tokens, bundle=self.bundle,
            sparse=self.sparse, anchor_frame=int(frame))
        return self.scene.mesh_at(int(frame)), self._emitter.anchor_map()
