"""Dense anchor-to-frame correspondences from composed attention maps.

The pipeline treats attention matrices as soft Markov transport: an anchor
vertex's token distribution is pushed through the temporal token-to-token
map into a target frame, candidate surface points are scored by the inner
product of their own token rows with the transported distribution, and the
correspondence is a sharp softmax blend over the top-scoring candidates.
Everything here is pure and deterministic: given the same inputs the same
bits come out, regardless of how callers batch the work.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .geom import ROW_SUM_TOL, RowStochasticMap, SurfaceSampleSet

__all__ = [
    "TokenDistribution",
    "Correspondence",
    "ChainConfig",
    "transport_to_frame",
    "score_surface",
    "blend_correspondence",
    "chain_all",
]


@dataclass(frozen=True)
class TokenDistribution:
    """Probability mass over the N latent tokens of one frame."""

    probs: np.ndarray
    frame: int

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.probs, dtype=np.float64))
        if p.ndim != 1:
            raise ValidationError(
                f"token distribution must be 1-D, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValidationError("token distribution has non-finite entries")
        if p.size and p.min() < 0.0:
            raise ValidationError("token distribution has negative entries")
        total = float(p.sum())
        if abs(total - 1.0) > ROW_SUM_TOL:
            raise ValidationError(
                f"token distribution sums to {total:.8f}, "
                f"expected 1 within {ROW_SUM_TOL:g}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def tokens(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class Correspondence:
    """Where one anchor vertex lands on the frame-f candidate surface.

    ``position`` is the blended target point, ``confidence`` the best raw
    score over *all* candidates (not just the retained neighborhood), and
    ``neighborhood`` the retained (surface index, blend weight) pairs in
    descending-score order.
    """

    source_vertex: int
    frame: int
    position: np.ndarray
    confidence: float
    neighborhood_indices: np.ndarray
    neighborhood_weights: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        idx = np.asarray(self.neighborhood_indices, dtype=np.int64)
        w = np.asarray(self.neighborhood_weights, dtype=np.float64)
        if pos.shape != (3,):
            raise ValidationError(f"position must be a 3-vector, got {pos.shape}")
        if idx.shape != w.shape or idx.ndim != 1 or idx.size == 0:
            raise ValidationError("neighborhood indices/weights must be "
                                  "matching non-empty 1-D arrays")
        if abs(float(w.sum()) - 1.0) > ROW_SUM_TOL:
            raise ValidationError(
                f"neighborhood weights sum to {w.sum():.8f}, expected 1")
        for a in (pos, idx, w):
            a.flags.writeable = False
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "neighborhood_indices", idx)
        object.__setattr__(self, "neighborhood_weights", w)

    @property
    def neighborhood(self) -> list[tuple[int, float]]:
        return list(zip(self.neighborhood_indices.tolist(),
                        self.neighborhood_weights.tolist()))


@dataclass(frozen=True)
class ChainConfig:
    """Blend hyperparameters: softmax temperature and neighborhood size."""

    tau: float = 0.05
    k: int = 16

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau > 0.0):
            raise ValidationError(f"temperature must be positive, got {self.tau}")
        if int(self.k) < 1:
            raise ValidationError(f"neighborhood size must be >= 1, got {self.k}")
        object.__setattr__(self, "k", int(self.k))


def _as_map(value) -> RowStochasticMap:
    if isinstance(value, RowStochasticMap):
        return value
    return RowStochasticMap(value)


def transport_to_frame(vertex_row, temporal, frame: int) -> TokenDistribution:
    """Push one vertex's anchor-token mass through the temporal map.

    out[t'] = sum_t row[t] * temporal[t, t']; row-stochastic in, row-
    stochastic out (transport moves mass, it never creates or destroys it).
    """
    row = np.asarray(vertex_row, dtype=np.float64)
    if row.ndim != 1:
        raise ValidationError(f"vertex row must be 1-D, got shape {row.shape}")
    tmap = _as_map(temporal)
    if tmap.rows != row.shape[0]:
        raise ValidationError(
            f"vertex row has {row.shape[0]} tokens but temporal map "
            f"has {tmap.rows} rows")
    if tmap.is_sparse:
        out = np.asarray(tmap.data.T @ row)
    else:
        out = row @ tmap.data
    return TokenDistribution(out, frame=frame)


def score_surface(dist: TokenDistribution, samples: SurfaceSampleSet) -> np.ndarray:
    """Inner-product match scores between a token distribution and every
    candidate surface point's own token row. Scores land in [0, 1]: each is
    a convex combination of entries of a stochastic row."""
    if dist.frame != samples.frame:
        raise ValidationError(
            f"token distribution is for frame {dist.frame} but samples "
            f"are for frame {samples.frame}")
    att = samples.token_attention
    if att.cols != dist.tokens:
        raise ValidationError(
            f"samples carry {att.cols}-token rows but distribution "
            f"has {dist.tokens} tokens")
    if att.is_sparse:
        return np.asarray(att.data @ dist.probs)
    return att.data @ dist.probs


def _topk_row(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties at the cut broken toward lower
    index, returned in descending-score order (equal scores: lower index
    first)."""
    s = scores.shape[0]
    if k >= s:
        sel = np.arange(s)
    else:
        kth = np.partition(scores, s - k)[s - k]
        sel = np.flatnonzero(scores > kth)
        need = k - sel.size
        if need > 0:
            ties = np.flatnonzero(scores == kth)[:need]
            sel = np.concatenate([sel, ties])
    order = np.argsort(-scores[sel], kind="stable")
    return sel[order]


def _blend_row(scores: np.ndarray, samples: SurfaceSampleSet,
               cfg: ChainConfig, source_vertex: int) -> Correspondence:
    sel = _topk_row(scores, cfg.k)
    top = scores[sel]
    w = np.exp((top - top[0]) / cfg.tau)
    w /= w.sum()
    position = w @ samples.points[sel]
    return Correspondence(
        source_vertex=source_vertex,
        frame=samples.frame,
        position=position,
        confidence=float(scores.max()),
        neighborhood_indices=sel,
        neighborhood_weights=w,
    )


def blend_correspondence(scores, samples: SurfaceSampleSet, cfg: ChainConfig,
                         source_vertex: int = -1) -> Correspondence:
    """Sharp softmax blend over the top-k scoring candidate points.

    The retained neighborhood is the k best scores (ties broken toward the
    lower surface index); blend weights are softmax(score / tau) restricted
    to it. Confidence is the best score over the *full* candidate set, so a
    poor global match cannot hide behind a locally-normalized blend.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] != samples.size:
        raise ValidationError(
            f"expected {samples.size} scores, got shape {s.shape}")
    if samples.size == 0:
        raise ValidationError("cannot blend over an empty sample set")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores contain non-finite values")
    if cfg.k > samples.size:
        raise ValidationError(
            f"neighborhood size {cfg.k} exceeds sample count {samples.size}")
    return _blend_row(s, samples, cfg, source_vertex)


def _frame_maps(temporal) -> list[RowStochasticMap]:
    if isinstance(temporal, np.ndarray) and temporal.ndim == 3:
        return [RowStochasticMap(temporal[f]) for f in range(temporal.shape[0])]
    return [_as_map(t) for t in temporal]


def chain_all(anchor_attn, temporal, samples, queries,
              cfg: ChainConfig | None = None) -> list[list[Correspondence]]:
    """Batch the three-hop chain for every (query vertex, frame) pair.

    Returns one list per frame, each holding one Correspondence per query
    in query order. The whole batch reduces to dense matrix products —
    anchor rows through the temporal map, then against every candidate's
    token row — followed by the same per-row blend ``blend_correspondence``
    applies, so sparse and dense inputs give identical answers.
    """
    cfg = cfg or ChainConfig()
    amap = _as_map(anchor_attn)
    tmaps = _frame_maps(temporal)
    samples = list(samples)
    if len(tmaps) != len(samples):
        raise ValidationError(
            f"{len(tmaps)} temporal maps for {len(samples)} sample sets")
    if not samples:
        raise ValidationError("no frames to chain")
    q = np.asarray(queries, dtype=np.int64)
    if q.ndim != 1 or q.size == 0:
        raise ValidationError("queries must be a non-empty 1-D index list")
    if q.min() < 0 or q.max() >= amap.rows:
        raise ValidationError(
            f"query indices must lie in [0, {amap.rows}), "
            f"got range [{q.min()}, {q.max()}]")

    if amap.is_sparse:
        anchor_rows = np.asarray(amap.data[q].todense())
    else:
        anchor_rows = amap.data[q]

    out: list[list[Correspondence]] = []
    for tmap, smp in zip(tmaps, samples):
        if tmap.rows != amap.cols or tmap.cols != tmap.rows:
            raise ValidationError(
                f"temporal map {tmap.shape} does not conform to "
                f"{amap.cols} anchor tokens")
        att = smp.token_attention
        if att.cols != tmap.cols:
            raise ValidationError(
                f"frame {smp.frame} samples carry {att.cols}-token rows, "
                f"expected {tmap.cols}")
        if cfg.k > smp.size:
            raise ValidationError(
                f"neighborhood size {cfg.k} exceeds frame {smp.frame} "
                f"sample count {smp.size}")
        if tmap.is_sparse:
            transported = np.asarray((tmap.data.T @ anchor_rows.T).T)
        else:
            transported = anchor_rows @ tmap.data
        if att.is_sparse:
            scores = np.asarray((att.data @ transported.T).T)
        else:
            scores = transported @ att.data.T
        out.append([
            _blend_row(scores[i], smp, cfg, int(q[i]))
            for i in range(q.size)
        ])
    return out
