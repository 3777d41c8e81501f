"""Full-mesh animation lifted from sparse landmark tracks.

The stages, in order: curvature-boosted farthest-point sampling picks K
control landmarks on the anchor mesh; the correspondence chain tracks them
across frames; implausible displacements are rejected and the gaps bridged
by confidence-weighted temporal Gaussian smoothing of *displacements* (so
stationary landmarks cannot drift); every mesh vertex receives Gaussian
weights over its geodesically nearest landmarks; and a per-vertex weighted
rigid fit carries the anchor geometry to each frame, followed by one final
temporal smoothing of the displacement field. Faces are shared with the
anchor mesh by construction, so topology cannot change.
"""

import time
import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse.csgraph as csgraph

from . import _kernels as kernels
from .archive import ChainArchive
from .chain import ChainConfig, chain_all
from .errors import DegenerateGeometryError, ValidationError
from .geom import RowStochasticMap, SurfaceSampleSet, TriMesh

__all__ = [
    "AnimationConfig",
    "LandmarkTrackSet",
    "SkinningField",
    "AnimationResult",
    "normalized_curvature",
    "sample_landmarks_fps",
    "tracks_from_chain",
    "filter_outliers",
    "smooth_tracks",
    "geodesic_distances",
    "skinning_weights",
    "procrustes_rotation",
    "deform_mesh",
    "load_scene",
    "animate_archive",
]


@dataclass(frozen=True)
class AnimationConfig:
    """Knobs for landmark extraction, filtering, smoothing and skinning."""

    landmark_count: int = 1000
    curvature_boost: float = 2.0
    outlier_rel_threshold: float = 5.0
    outlier_abs_threshold: float | None = None  # None: 0.5 * bbox diagonal
    min_valid_fraction: float = 0.95
    sigma_landmark: float = 1.5
    sigma_final: float = 1.0
    k_nn: int = 120
    eps: float = 1e-8
    rank_tol: float = 1e-9

    def __post_init__(self):
        positives = {
            "landmark_count": self.landmark_count,
            "outlier_rel_threshold": self.outlier_rel_threshold,
            "sigma_landmark": self.sigma_landmark,
            "sigma_final": self.sigma_final,
            "k_nn": self.k_nn,
            "eps": self.eps,
        }
        for name, value in positives.items():
            if not value > 0:
                raise ValidationError(f"{name} must be positive, got {value}")
        if self.curvature_boost < 0:
            raise ValidationError(
                f"curvature_boost must be >= 0, got {self.curvature_boost}")
        if not 0.0 < self.min_valid_fraction <= 1.0:
            raise ValidationError(
                f"min_valid_fraction must lie in (0, 1], "
                f"got {self.min_valid_fraction}")
        if self.outlier_abs_threshold is not None and \
                self.outlier_abs_threshold <= 0:
            raise ValidationError("outlier_abs_threshold must be positive")


@dataclass(frozen=True)
class LandmarkTrackSet:
    """Sparse landmark trajectories with confidences.

    ``raw_positions`` are the chain's unprocessed per-frame landings;
    ``confidence`` starts as the chain scores and becomes binary after
    outlier filtering; ``smoothed_positions`` appear after temporal
    smoothing, with the anchor frame pinned to the anchor positions.
    """

    landmark_ids: np.ndarray
    anchor_positions: np.ndarray
    raw_positions: np.ndarray
    confidence: np.ndarray
    smoothed_positions: np.ndarray | None = None
    anchor_frame: int = 0

    def __post_init__(self):
        ids = np.asarray(self.landmark_ids, dtype=np.int64)
        anchor = np.asarray(self.anchor_positions, dtype=np.float64)
        raw = np.asarray(self.raw_positions, dtype=np.float64)
        conf = np.asarray(self.confidence, dtype=np.float64)
        k = ids.shape[0]
        if ids.ndim != 1 or k == 0:
            raise ValidationError("landmark_ids must be a non-empty 1-D array")
        if anchor.shape != (k, 3):
            raise ValidationError(
                f"anchor_positions must be ({k}, 3), got {anchor.shape}")
        if raw.ndim != 3 or raw.shape[1:] != (k, 3):
            raise ValidationError(
                f"raw_positions must be (F, {k}, 3), got {raw.shape}")
        if conf.shape != raw.shape[:2]:
            raise ValidationError(
                f"confidence must be {raw.shape[:2]}, got {conf.shape}")
        if conf.min(initial=0.0) < 0.0 or conf.max(initial=0.0) > 1.0:
            raise ValidationError("confidences must lie in [0, 1]")
        if not 0 <= self.anchor_frame < raw.shape[0]:
            raise ValidationError(
                f"anchor_frame {self.anchor_frame} outside 0..{raw.shape[0]-1}")
        if self.smoothed_positions is not None:
            sm = np.asarray(self.smoothed_positions, dtype=np.float64)
            if sm.shape != raw.shape:
                raise ValidationError(
                    f"smoothed_positions must be {raw.shape}, got {sm.shape}")
            object.__setattr__(self, "smoothed_positions", sm)
        object.__setattr__(self, "landmark_ids", ids)
        object.__setattr__(self, "anchor_positions", anchor)
        object.__setattr__(self, "raw_positions", raw)
        object.__setattr__(self, "confidence", conf)

    @property
    def n_landmarks(self) -> int:
        return self.landmark_ids.shape[0]

    @property
    def n_frames(self) -> int:
        return self.raw_positions.shape[0]


@dataclass(frozen=True)
class SkinningField:
    """Per-vertex landmark neighborhoods with normalized Gaussian weights."""

    neighbor_ids: np.ndarray   # (V, k) landmark slots, -1 padding
    weights: np.ndarray        # (V, k) normalized, 0 on padding
    distances: np.ndarray      # (V, k) geodesic distances, inf on padding
    counts: np.ndarray         # (V,) valid entries per vertex
    sigma_geo: float

    @property
    def n_vertices(self) -> int:
        return self.neighbor_ids.shape[0]


@dataclass(frozen=True)
class AnimationResult:
    meshes: list
    tracks: LandmarkTrackSet
    skinning: SkinningField
    timings: dict


def normalized_curvature(mesh: TriMesh) -> np.ndarray:
    """Angle-deficit curvature scaled into [0, 1] over the mesh."""
    deficit = mesh.angle_deficit()
    top = deficit.max(initial=0.0)
    if top <= 0.0:
        return np.zeros(mesh.n_vertices)
    return deficit / top


def sample_landmarks_fps(mesh: TriMesh, count: int,
                         boost: float = 2.0) -> np.ndarray:
    """Curvature-boosted greedy farthest-point sampling.

    Seeded at the most curved vertex; each round picks the vertex whose
    distance-to-chosen-set, scaled by (1 + boost * curvature), is largest.
    The boost pulls samples toward folds and tips, where rigid skinning
    needs the densest control.
    """
    verts = mesh.vertices
    n = verts.shape[0]
    if count < 1 or count > n:
        raise ValidationError(
            f"landmark count must lie in [1, {n}], got {count}")
    kappa = normalized_curvature(mesh)
    scale = 1.0 + boost * kappa
    chosen = np.empty(count, dtype=np.int64)
    taken = np.zeros(n, dtype=bool)
    seed = int(np.argmax(kappa))
    chosen[0] = seed
    taken[seed] = True
    dmin = np.linalg.norm(verts - verts[seed], axis=1)
    for i in range(1, count):
        score = np.where(taken, -1.0, dmin * scale)
        nxt = int(np.argmax(score))
        chosen[i] = nxt
        taken[nxt] = True
        np.minimum(dmin, np.linalg.norm(verts - verts[nxt], axis=1), out=dmin)
    return chosen


def tracks_from_chain(mesh: TriMesh, landmark_ids, per_frame,
                      anchor_frame: int = 0) -> LandmarkTrackSet:
    """Assemble a LandmarkTrackSet from chain_all output for the landmarks."""
    ids = np.asarray(landmark_ids, dtype=np.int64)
    n_frames = len(per_frame)
    raw = np.empty((n_frames, ids.size, 3))
    conf = np.empty((n_frames, ids.size))
    for f, corrs in enumerate(per_frame):
        if len(corrs) != ids.size:
            raise ValidationError(
                f"frame {f} has {len(corrs)} correspondences "
                f"for {ids.size} landmarks")
        for i, c in enumerate(corrs):
            raw[f, i] = c.position
            conf[f, i] = min(max(c.confidence, 0.0), 1.0)
    return LandmarkTrackSet(
        landmark_ids=ids,
        anchor_positions=mesh.vertices[ids],
        raw_positions=raw,
        confidence=conf,
        anchor_frame=anchor_frame,
    )


def filter_outliers(tracks: LandmarkTrackSet, cfg: AnimationConfig,
                    bbox_diag: float | None = None) -> LandmarkTrackSet:
    """Reject physically implausible displacements, then drop landmarks
    that are not valid on at least ``min_valid_fraction`` of frames.

    A displacement is an outlier when it exceeds ``outlier_rel_threshold``
    times the frame's median displacement magnitude, or the absolute
    threshold (default half the bounding-box diagonal). On near-static
    frames (median below 1e-9 of the bbox) the relative rule is skipped so
    numeric dust cannot flag everything. Surviving confidences are binary.
    """
    disp = np.linalg.norm(
        tracks.raw_positions - tracks.anchor_positions[None], axis=2)
    if bbox_diag is None:
        ext = tracks.anchor_positions.max(axis=0) - \
            tracks.anchor_positions.min(axis=0)
        bbox_diag = float(np.linalg.norm(ext))
    abs_thr = cfg.outlier_abs_threshold
    if abs_thr is None:
        abs_thr = 0.5 * bbox_diag

    med = np.median(disp, axis=1)
    rel_bad = disp > cfg.outlier_rel_threshold * med[:, None]
    rel_bad[med < 1e-9 * bbox_diag] = False
    abs_bad = disp > abs_thr
    conf = np.where(rel_bad | abs_bad, 0.0, 1.0)

    valid_frac = conf.mean(axis=0)
    keep = valid_frac >= cfg.min_valid_fraction
    if not keep.any():
        raise ValidationError(
            f"outlier filtering rejected every landmark: "
            f"{int(rel_bad.sum())} relative-rule flags, "
            f"{int(abs_bad.sum())} absolute-rule flags over "
            f"{disp.shape[0]} frames x {disp.shape[1]} landmarks "
            f"(abs threshold {abs_thr:.4g}); the tracks are unusable")
    return LandmarkTrackSet(
        landmark_ids=tracks.landmark_ids[keep],
        anchor_positions=tracks.anchor_positions[keep],
        raw_positions=tracks.raw_positions[:, keep],
        confidence=conf[:, keep],
        anchor_frame=tracks.anchor_frame,
    )


def smooth_tracks(tracks: LandmarkTrackSet,
                  cfg: AnimationConfig) -> LandmarkTrackSet:
    """Confidence-weighted temporal Gaussian smoothing of displacements.

    smoothed[f] = anchor + sum_j G(f,j) c[j] (raw[j] - anchor)
                           / (sum_j G(f,j) c[j] + eps)
    with G(f,j) = exp(-(f-j)^2 / (2 sigma^2)). Smoothing displacements
    rather than positions keeps stationary landmarks exactly stationary,
    and the anchor frame is pinned to the anchor positions outright. A
    landmark with no confident frame near f degrades to zero displacement
    (the eps term dominates) and is reported with a warning.
    """
    frames = np.arange(tracks.n_frames, dtype=np.float64)
    g = np.exp(-((frames[:, None] - frames[None, :]) ** 2)
               / (2.0 * cfg.sigma_landmark ** 2))
    disp = tracks.raw_positions - tracks.anchor_positions[None]
    mass = g @ tracks.confidence                       # (F, K)
    num = np.einsum("fj,jk,jkd->fkd", g, tracks.confidence, disp)
    smoothed = tracks.anchor_positions[None] + \
        num / (mass + cfg.eps)[:, :, None]
    smoothed[tracks.anchor_frame] = tracks.anchor_positions

    starved = mass < 1e-6
    starved[tracks.anchor_frame] = False
    if starved.any():
        warnings.warn(
            f"{int(starved.sum())} (frame, landmark) cells have no "
            f"confident support within the smoothing window; their "
            f"displacement falls back to zero", stacklevel=2)
    return replace(tracks, smoothed_positions=smoothed)


def geodesic_distances(mesh: TriMesh, landmark_ids, k_nn: int):
    """Per-vertex k nearest landmarks by graph distance along mesh edges.

    Returns (neighbor_ids, distances, counts) as produced by the kernel
    backend: slots padded with -1 / inf, ordered by increasing distance.
    """
    ids = np.asarray(landmark_ids, dtype=np.int64)
    graph = mesh.edge_graph()
    nb_src, nb_dist, counts = kernels.multi_source_knn_dijkstra(
        graph.indptr, graph.indices, graph.data, ids,
        min(k_nn, ids.size), mesh.n_vertices)
    if counts.min(initial=1) == 0:
        orphan = int(np.argmin(counts))
        n_comp, labels = csgraph.connected_components(graph, directed=False)
        label = labels[orphan]
        size = int((labels == label).sum())
        raise DegenerateGeometryError(
            f"vertex {orphan} reaches no landmark: its connected component "
            f"(label {label}, {size} vertices of {mesh.n_vertices}, "
            f"{n_comp} components total) contains none")
    return nb_src, nb_dist, counts


def _landmark_spacing(nb_src, nb_dist, landmark_ids) -> float:
    """Mean graph distance from each landmark to its nearest other landmark."""
    spacings = []
    for slot, vid in enumerate(np.asarray(landmark_ids)):
        row_src = nb_src[vid]
        row_dist = nb_dist[vid]
        other = (row_src >= 0) & (row_src != slot)
        if other.any():
            spacings.append(row_dist[other].min())
    if not spacings:
        raise DegenerateGeometryError(
            "no landmark can reach another landmark; "
            "cannot estimate landmark spacing")
    return float(np.mean(spacings))


def skinning_weights(nb_src, nb_dist, counts, landmark_ids,
                     cfg: AnimationConfig) -> SkinningField:
    """Gaussian skinning weights over each vertex's landmark neighborhood.

    sigma_geo is the mean nearest-other-landmark graph distance, so the
    kernel bandwidth tracks how densely the landmarks cover the surface.
    Vertices so remote that every Gaussian weight underflows fall back to
    inverse-distance weights (with a warning) rather than losing support.
    """
    sigma = _landmark_spacing(nb_src, nb_dist, landmark_ids)
    valid = nb_src >= 0
    with np.errstate(under="ignore"):
        w = np.where(valid,
                     np.exp(-np.square(np.where(valid, nb_dist, 0.0))
                            / (2.0 * sigma * sigma)),
                     0.0)
    sums = w.sum(axis=1)
    dead = (sums == 0.0) & (counts > 0)
    if dead.any():
        warnings.warn(
            f"Gaussian skinning weights underflowed for "
            f"{int(dead.sum())} vertices; using inverse-distance weights "
            f"there", stacklevel=2)
        inv = np.where(valid[dead], 1.0 / (nb_dist[dead] + cfg.eps), 0.0)
        w[dead] = inv
        sums[dead] = inv.sum(axis=1)
    w = w / sums[:, None]
    return SkinningField(
        neighbor_ids=nb_src,
        weights=w,
        distances=nb_dist,
        counts=counts,
        sigma_geo=sigma,
    )


def procrustes_rotation(anchor_pts, target_pts, point_weights=None,
                        rank_tol: float = 1e-9) -> np.ndarray:
    """Best rotation carrying weighted anchor points onto targets.

    Minimizes sum_i w_i ||R (p_i - mu_p) - (q_i - mu_q)||^2 via SVD of the
    weighted cross-covariance, with the determinant forced to +1 so a
    mirrored target can never produce a reflection. When the covariance is
    rank-deficient (collinear or coincident points) the rotation is
    unobservable and the identity is returned.
    """
    p = np.asarray(anchor_pts, dtype=np.float64)
    q = np.asarray(target_pts, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValidationError(
            f"point sets must share an Mx3 shape, got {p.shape} vs {q.shape}")
    if point_weights is None:
        w = np.ones(p.shape[0])
    else:
        w = np.asarray(point_weights, dtype=np.float64)
        if w.shape != (p.shape[0],) or w.min(initial=0.0) < 0.0:
            raise ValidationError("weights must be nonnegative, one per point")
    total = w.sum()
    if total <= 0.0:
        raise ValidationError("weights sum to zero")
    mu_p = (w @ p) / total
    mu_q = (w @ q) / total
    h = (w[:, None] * (p - mu_p)).T @ (q - mu_q)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= rank_tol * max(s[0], 1e-300):
        return np.eye(3)
    r = vt.T @ u.T
    if np.linalg.det(r) < 0.0:
        vt = vt.copy()
        vt[2] *= -1.0
        r = vt.T @ u.T
    return r


def deform_mesh(mesh: TriMesh, tracks: LandmarkTrackSet,
                skinning: SkinningField,
                cfg: AnimationConfig) -> list[TriMesh]:
    """Carry the anchor mesh to every frame through local rigid fits.

    Each vertex is moved by the rotation + translation that best maps its
    weighted anchor-landmark neighborhood onto the frame's landmarks; the
    per-vertex displacement field is then smoothed over time with
    sigma_final. Faces are shared with the anchor, so connectivity is
    bit-identical across frames.
    """
    if tracks.smoothed_positions is None:
        raise ValidationError("tracks must be smoothed before deformation")
    if skinning.n_vertices != mesh.n_vertices:
        raise ValidationError(
            f"skinning field covers {skinning.n_vertices} vertices, "
            f"mesh has {mesh.n_vertices}")
    deformed = kernels.deform_frames(
        mesh.vertices, skinning.neighbor_ids, skinning.weights,
        tracks.anchor_positions, tracks.smoothed_positions,
        cfg.rank_tol)
    n_frames = deformed.shape[0]
    frames = np.arange(n_frames, dtype=np.float64)
    g = np.exp(-((frames[:, None] - frames[None, :]) ** 2)
               / (2.0 * cfg.sigma_final ** 2))
    disp = deformed - mesh.vertices[None]
    den = g.sum(axis=1) + cfg.eps
    smoothed = np.einsum("fj,jvd->fvd", g, disp) / den[:, None, None]
    final = mesh.vertices[None] + smoothed
    return [mesh.with_vertices(final[f]) for f in range(n_frames)]


def _temporal_name(step: int | None) -> str:
    return "A_za_zf" if step is None else f"A_za_zf_step{step}"


def load_scene(archive: ChainArchive, step: int | None = None):
    """Pull chain inputs out of an archive: anchor attention, per-frame
    temporal maps, per-frame surface sample sets, and the anchor mesh."""
    mesh = archive.anchor_mesh()
    anchor_attn = RowStochasticMap(archive.f64("A_va_za"))
    temporal = archive.f64(_temporal_name(step))
    if temporal.ndim != 3 or temporal.shape[0] != archive.frames:
        raise ValidationError(
            f"temporal attention must be (F, N, N) with F={archive.frames}, "
            f"got {temporal.shape}")
    samples = []
    for f in range(archive.frames):
        pts = archive.f64(archive.frame_name("S", f))
        rows = archive.f64(archive.frame_name("A_zf_vf", f))
        samples.append(SurfaceSampleSet(
            frame=f, points=pts,
            token_attention=RowStochasticMap(rows)))
    return mesh, anchor_attn, temporal, samples


def animate_archive(archive: ChainArchive,
                    cfg: AnimationConfig | None = None,
                    chain_cfg: ChainConfig | None = None,
                    step: int | None = None) -> AnimationResult:
    """End-to-end animation from an attention archive, with stage timings.

    The timing report separates: ``decode`` (tensor extraction and
    validation), ``fps`` (landmark sampling), ``correspondence`` (the
    attention chain over all landmarks and frames), and ``skinning``
    (geodesics, weights, rigid fits and final smoothing).
    """
    cfg = cfg or AnimationConfig()
    chain_cfg = chain_cfg or ChainConfig()
    timings = {}

    t0 = time.perf_counter()
    mesh, anchor_attn, temporal, samples = load_scene(archive, step)
    timings["decode"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    landmark_ids = sample_landmarks_fps(
        mesh, cfg.landmark_count, cfg.curvature_boost)
    timings["fps"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    per_frame = chain_all(anchor_attn, temporal, samples,
                          landmark_ids, chain_cfg)
    timings["correspondence"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tracks = tracks_from_chain(mesh, landmark_ids, per_frame)
    tracks = filter_outliers(tracks, cfg, bbox_diag=mesh.bbox_diagonal())
    tracks = smooth_tracks(tracks, cfg)
    timings["filter_smooth"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    nb_src, nb_dist, counts = geodesic_distances(
        mesh, tracks.landmark_ids, cfg.k_nn)
    field = skinning_weights(nb_src, nb_dist, counts,
                             tracks.landmark_ids, cfg)
    meshes = deform_mesh(mesh, tracks, field, cfg)
    timings["skinning"] = time.perf_counter() - t0

    timings["total"] = sum(timings.values())
    return AnimationResult(meshes=meshes, tracks=tracks,
                           skinning=field, timings=timings)
