"""Long-sequence autoregressive windowing with correspondence reinforcement.

A pluggable backbone emits, per denoising step, the full attention stack for
the current window (anchor map, per-frame temporal maps, per-frame surface
samples). Early steps run untouched; the dominant anchor-token/frame-token
pairs behind each recovered correspondence are then boosted inside the
temporal maps of the remaining steps, which stabilizes the chain against the
attention drift that accumulates over long rollouts. Windows overlap by one
frame: the final frame of each window becomes the anchor of the next, and
per-window trajectories are stitched through that shared frame.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainConfig, Correspondence, chain_all
from .errors import ValidationError
from .geom import RowStochasticMap, SurfaceSampleSet, TriMesh

__all__ = [
    "DenoiseStepTrace",
    "ReinforcementSet",
    "BackboneInterface",
    "WindowConfig",
    "WindowDiagnostic",
    "WindowResult",
    "RolloutResult",
    "trace_dominant_pairs",
    "reinforce",
    "run_window",
    "ar_rollout",
    "ping_pong_frame_index",
    "format_window_log",
]


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiseStepTrace:
    """Attention stack emitted by one denoising step over one window.

    ``temporal[i]`` and ``samples[i]`` describe the window's i-th frame;
    ``frames[i]`` records which global frame that is. All maps must agree on
    the token count N.
    """

    step: int
    frames: tuple
    anchor_map: RowStochasticMap
    temporal: tuple
    samples: tuple

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(int(f) for f in self.frames))
        object.__setattr__(self, "temporal", tuple(self.temporal))
        object.__setattr__(self, "samples", tuple(self.samples))
        if len(self.frames) == 0:
            raise ValidationError("a step trace needs at least one frame")
        if not (len(self.frames) == len(self.temporal) == len(self.samples)):
            raise ValidationError(
                f"frame bookkeeping disagrees: {len(self.frames)} frames, "
                f"{len(self.temporal)} temporal maps, "
                f"{len(self.samples)} sample sets")
        n = self.anchor_map.cols
        for tmap in self.temporal:
            if tmap.rows != n or tmap.cols != n:
                raise ValidationError(
                    f"temporal map {tmap.shape} does not agree with "
                    f"N={n} tokens")
        for smp in self.samples:
            if smp.token_attention.cols != n:
                raise ValidationError(
                    f"sample rows carry {smp.token_attention.cols} tokens, "
                    f"expected {n}")

    @property
    def n_tokens(self) -> int:
        return self.anchor_map.cols

    @property
    def n_frames(self) -> int:
        return len(self.frames)


class ReinforcementSet:
    """Deduplicated (anchor token, frame token, confidence) triples per frame.

    Nominating the same pair twice keeps the larger confidence. Iteration
    order over a frame's pairs is deterministic (sorted by token indices).
    """

    __slots__ = ("_n_tokens", "_pairs")

    def __init__(self, n_tokens: int):
        if n_tokens <= 0:
            raise ValidationError(f"token count must be positive, got {n_tokens}")
        self._n_tokens = int(n_tokens)
        self._pairs: dict[int, dict[tuple[int, int], float]] = {}

    @property
    def n_tokens(self) -> int:
        return self._n_tokens

    def add(self, frame: int, t: int, t_prime: int, confidence: float) -> None:
        t, t_prime = int(t), int(t_prime)
        if not (0 <= t < self._n_tokens and 0 <= t_prime < self._n_tokens):
            raise ValidationError(
                f"token pair ({t}, {t_prime}) outside [0, {self._n_tokens})")
        c = float(confidence)
        if not np.isfinite(c) or c < 0.0:
            raise ValidationError(f"confidence must be finite and >= 0, got {c}")
        bucket = self._pairs.setdefault(int(frame), {})
        key = (t, t_prime)
        if key not in bucket or c > bucket[key]:
            bucket[key] = c

    def frames(self) -> list[int]:
        return sorted(self._pairs)

    def for_frame(self, frame: int) -> list[tuple[int, int, float]]:
        bucket = self._pairs.get(int(frame), {})
        return [(t, tp, bucket[(t, tp)]) for t, tp in sorted(bucket)]

    def pair_count(self) -> int:
        return sum(len(b) for b in self._pairs.values())

    def mean_confidence(self) -> float:
        values = [c for b in self._pairs.values() for c in b.values()]
        return float(np.mean(values)) if values else 0.0

    def __len__(self) -> int:
        return self.pair_count()


class BackboneInterface(ABC):
    """Opaque provider of per-step attention stacks.

    Implementations must be deterministic given their seed: calling
    ``run_step`` twice with identical arguments yields identical traces.
    ``override`` carries a :class:`ReinforcementSet`; the backbone applies it
    to the temporal maps it would otherwise emit (via :func:`reinforce`)
    before returning the trace.
    """

    @abstractmethod
    def run_step(self, frames, step: int,
                 override: "ReinforcementSet | None" = None) -> DenoiseStepTrace:
        """Emit the attention stack for ``frames`` at denoising step ``step``."""

    @abstractmethod
    def re_anchor(self, frame: int) -> tuple[TriMesh, RowStochasticMap]:
        """Make ``frame`` the new anchor; returns its mesh and anchor map."""


@dataclass(frozen=True)
class WindowConfig:
    """Knobs for one denoising window."""

    steps: int = 4
    reinforce_after: int = 2
    reinforce: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"need at least one step, got {self.steps}")
        if self.reinforce_after < 1:
            raise ValidationError(
                f"reinforce_after must be >= 1, got {self.reinforce_after}")
        if self.reinforce and self.reinforce_after > self.steps:
            raise ValidationError(
                f"cannot extract reinforcement after step {self.reinforce_after} "
                f"when only {self.steps} steps run")


@dataclass(frozen=True)
class WindowDiagnostic:
    """One line of the per-window log."""

    window: int
    anchor_frame: int
    pair_count: int
    mean_confidence: float
    latent_correlation: float | None


@dataclass
class WindowResult:
    """Correspondences from the final step plus boundary state for stitching."""

    correspondences: list
    frames: tuple
    boundary_frame: int
    boundary_positions: np.ndarray
    reinforcement: "ReinforcementSet | None"
    first_frame_rows: np.ndarray
    boundary_rows: np.ndarray


@dataclass
class RolloutResult:
    """Stitched full-sequence output of an autoregressive rollout."""

    trajectories: np.ndarray
    confidence: np.ndarray
    scene_frames: np.ndarray
    diagnostics: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Reinforcement
# ---------------------------------------------------------------------------

def _dense_rows(mapping: RowStochasticMap, idx: np.ndarray) -> np.ndarray:
    if mapping.is_sparse:
        return np.asarray(mapping.data[idx].todense(), dtype=np.float64)
    return np.asarray(mapping.data[idx], dtype=np.float64)


def trace_dominant_pairs(correspondences, anchor_map, temporal, samples,
                         chunk: int = 128) -> ReinforcementSet:
    """Back-trace each correspondence to its dominant token pair.

    For a query v matched to top surface candidate u* in frame f, the
    dominant pair is the argmax over (t, t') of
    ``anchor[v, t] * temporal_f[t, t'] * sample_rows_f[u*, t']`` — the single
    token-to-token link carrying the most mass along the chain. Ties resolve
    to the smallest t, then the smallest t'. Each triple is stored with the
    correspondence's confidence; duplicate pairs keep the maximum.
    """
    amap = anchor_map if isinstance(anchor_map, RowStochasticMap) \
        else RowStochasticMap(anchor_map)
    temporal = list(temporal)
    samples = list(samples)
    if not (len(correspondences) == len(temporal) == len(samples)):
        raise ValidationError(
            f"frame bookkeeping disagrees: {len(correspondences)} "
            f"correspondence lists, {len(temporal)} temporal maps, "
            f"{len(samples)} sample sets")
    n = amap.cols
    out = ReinforcementSet(n)
    for f, (corr_list, tmap, smp) in enumerate(
            zip(correspondences, temporal, samples)):
        if not corr_list:
            continue
        tdense = tmap.toarray() if tmap.is_sparse else np.asarray(tmap.data)
        v_ids = np.array([c.source_vertex for c in corr_list], dtype=np.int64)
        u_ids = np.array([c.neighborhood_indices[0] for c in corr_list],
                         dtype=np.int64)
        confs = np.array([c.confidence for c in corr_list], dtype=np.float64)
        for lo in range(0, v_ids.size, chunk):
            hi = min(lo + chunk, v_ids.size)
            rows_a = _dense_rows(amap, v_ids[lo:hi])
            rows_u = _dense_rows(smp.token_attention, u_ids[lo:hi])
            mass = rows_a[:, :, None] * tdense[None, :, :] * rows_u[:, None, :]
            flat = np.argmax(mass.reshape(hi - lo, -1), axis=1)
            for j, pick in enumerate(flat):
                out.add(f, pick // n, pick % n, confs[lo + j])
    return out


def default_boost(confidence: float) -> float:
    """Multiplicative boost applied to a nominated entry: 1 + confidence."""
    return 1.0 + confidence


def reinforce(temporal_map, pairs, boost=default_boost) -> RowStochasticMap:
    """Boost nominated temporal-map entries, then renormalize their rows.

    ``pairs`` is an iterable of (anchor token, frame token, confidence)
    triples — typically ``ReinforcementSet.for_frame(f)``. Only the rows
    holding a nominated entry change; every other row of the returned map is
    bitwise identical to the input. Boosting with confidence 0 (factor 1) is
    the identity.
    """
    tmap = temporal_map if isinstance(temporal_map, RowStochasticMap) \
        else RowStochasticMap(temporal_map)
    pairs = list(pairs)
    if not pairs:
        return tmap
    n_rows, n_cols = tmap.shape
    if tmap.is_sparse:
        data = tmap.tocsr().copy()
        touched = set()
        for t, tp, c in pairs:
            if not (0 <= t < n_rows and 0 <= tp < n_cols):
                raise ValidationError(
                    f"pair ({t}, {tp}) outside map shape {tmap.shape}")
            lo, hi = data.indptr[t], data.indptr[t + 1]
            cols = data.indices[lo:hi]
            hit = np.flatnonzero(cols == tp)
            b = float(boost(c))
            if hit.size and b != 1.0:
                data.data[lo + hit[0]] *= b
                touched.add(int(t))
        for t in touched:
            lo, hi = data.indptr[t], data.indptr[t + 1]
            total = data.data[lo:hi].sum()
            if total > 0.0:
                data.data[lo:hi] /= total
        return RowStochasticMap(data)
    dense = np.array(tmap.data, dtype=np.float64, copy=True)
    touched = set()
    for t, tp, c in pairs:
        if not (0 <= t < n_rows and 0 <= tp < n_cols):
            raise ValidationError(
                f"pair ({t}, {tp}) outside map shape {tmap.shape}")
        b = float(boost(c))
        if b != 1.0:
            dense[t, tp] *= b
            touched.add(int(t))
    for t in touched:
        total = dense[t].sum()
        if total > 0.0:
            dense[t] /= total
    return RowStochasticMap(dense)


# ---------------------------------------------------------------------------
# Windowed rollout
# ---------------------------------------------------------------------------

def _chain_trace(trace: DenoiseStepTrace, queries, cfg: ChainConfig):
    return chain_all(trace.anchor_map, list(trace.temporal),
                     list(trace.samples), queries, cfg)


def _frame_zero_rows(trace: DenoiseStepTrace) -> np.ndarray:
    first = trace.temporal[0]
    return first.toarray() if first.is_sparse else np.asarray(first.data)


def _boundary_rows(trace: DenoiseStepTrace) -> np.ndarray:
    last = trace.temporal[-1]
    return last.toarray() if last.is_sparse else np.asarray(last.data)


def run_window(backbone: BackboneInterface, frames, queries=None,
               cfg: WindowConfig | None = None,
               chain_cfg: ChainConfig | None = None) -> WindowResult:
    """Run one denoising window and extract its correspondences.

    Steps 1..reinforce_after run untouched. After step ``reinforce_after``
    the correspondences of that step are back-traced into a
    :class:`ReinforcementSet`, which is injected (as the ``override``) into
    every remaining step. Correspondences are read from the final step.
    """
    cfg = cfg or WindowConfig()
    chain_cfg = chain_cfg or ChainConfig()
    frames = [int(f) for f in frames]
    if not frames:
        raise ValidationError("a window needs at least one frame")

    rset: ReinforcementSet | None = None
    trace = None
    for step in range(1, cfg.steps + 1):
        override = rset if (cfg.reinforce and rset is not None) else None
        trace = backbone.run_step(frames, step, override)
        if queries is None:
            queries = np.arange(trace.anchor_map.rows, dtype=np.int64)
        if cfg.reinforce and step == cfg.reinforce_after and step < cfg.steps:
            corr = _chain_trace(trace, queries, chain_cfg)
            rset = trace_dominant_pairs(
                corr, trace.anchor_map, trace.temporal, trace.samples)
    final = _chain_trace(trace, queries, chain_cfg)
    boundary = np.stack([c.position for c in final[-1]])
    return WindowResult(
        correspondences=final,
        frames=tuple(frames),
        boundary_frame=frames[-1],
        boundary_positions=boundary,
        reinforcement=rset,
        first_frame_rows=_frame_zero_rows(trace),
        boundary_rows=_boundary_rows(trace),
    )


def ping_pong_frame_index(i: int, frame_count: int) -> int:
    """Scene frame played at rollout step ``i`` under ping-pong looping.

    The sequence walks frames forward to the end, back to the start, forward
    again, and so on: 0, 1, ..., F-1, F-2, ..., 1, 0, 1, ... — period
    2F - 2. A single-frame scene always plays frame 0.
    """
    if frame_count < 1:
        raise ValidationError(f"frame count must be >= 1, got {frame_count}")
    if i < 0:
        raise ValidationError(f"step index must be >= 0, got {i}")
    if frame_count == 1:
        return 0
    period = 2 * frame_count - 2
    m = i % period
    return m if m < frame_count else period - m


def _latent_correlation(prev_boundary_rows: np.ndarray,
                        next_first_rows: np.ndarray) -> float:
    """Mean per-token Pearson correlation across a window boundary.

    Each anchor token of the earlier window owns a distribution over the
    boundary frame's tokens (its row of that window's final temporal map).
    The matched token — the row's argmax — owns a distribution over the same
    tokens in the next window (its frame-0 row there). The correlation of
    those two rows measures how much of the token's identity survived the
    hand-off; the mean over tokens is the per-boundary diagnostic.
    """
    picks = np.argmax(prev_boundary_rows, axis=1)
    x = prev_boundary_rows
    y = next_first_rows[picks]
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    num = (xc * yc).sum(axis=1)
    den = np.sqrt((xc * xc).sum(axis=1) * (yc * yc).sum(axis=1))
    good = den > 1e-300
    corr = np.zeros(x.shape[0])
    corr[good] = num[good] / den[good]
    return float(corr.mean())


def ar_rollout(backbone: BackboneInterface, total_frames: int,
               window: int = 16, ping_pong: bool = False, queries=None,
               cfg: WindowConfig | None = None,
               chain_cfg: ChainConfig | None = None) -> RolloutResult:
    """Autoregressive rollout over ``total_frames`` steps.

    Consecutive windows overlap by exactly one frame: the final frame of a
    window is re-anchored (``backbone.re_anchor``) and becomes frame 0 of
    the next. Because re-anchoring preserves vertex identity, per-window
    trajectories stitch by concatenation through the shared frame, whose
    positions agree between the two windows. With ``ping_pong`` the scene
    frame played at step i folds back and forth through the scene instead of
    increasing monotonically.
    """
    cfg = cfg or WindowConfig()
    if total_frames < window:
        raise ValidationError(
            f"rollout of {total_frames} frames is shorter than one "
            f"window of {window}")
    if window < 2:
        raise ValidationError(f"window must span >= 2 frames, got {window}")

    def scene_frame(i: int) -> int:
        return ping_pong_frame_index(i, window) if ping_pong else i

    starts = list(range(0, total_frames - 1, window - 1))
    trajectories = None
    confidence = None
    diagnostics: list[WindowDiagnostic] = []
    prev_boundary_rows = None
    for w, start in enumerate(starts):
        steps = range(start, min(start + window, total_frames))
        frames = [scene_frame(i) for i in steps]
        if w > 0:
            backbone.re_anchor(frames[0])
        result = run_window(backbone, frames, queries=queries, cfg=cfg,
                            chain_cfg=chain_cfg)
        if queries is None:
            queries = np.array(
                [c.source_vertex for c in result.correspondences[0]],
                dtype=np.int64)
        if trajectories is None:
            trajectories = np.zeros((total_frames, queries.size, 3))
            confidence = np.zeros((total_frames, queries.size))
        for local, i in enumerate(steps):
            frame_corr = result.correspondences[local]
            trajectories[i] = [c.position for c in frame_corr]
            confidence[i] = [c.confidence for c in frame_corr]
        corr_stat = None if prev_boundary_rows is None else _latent_correlation(
            prev_boundary_rows, result.first_frame_rows)
        prev_boundary_rows = result.boundary_rows
        rset = result.reinforcement
        diagnostics.append(WindowDiagnostic(
            window=w,
            anchor_frame=frames[0],
            pair_count=0 if rset is None else rset.pair_count(),
            mean_confidence=0.0 if rset is None else rset.mean_confidence(),
            latent_correlation=corr_stat,
        ))
    scene_frames = np.array([scene_frame(i) for i in range(total_frames)],
                            dtype=np.int64)
    return RolloutResult(
        trajectories=trajectories,
        confidence=confidence,
        scene_frames=scene_frames,
        diagnostics=diagnostics,
    )


def format_window_log(diagnostics) -> str:
    """Per-window diagnostic log as structured text."""
    lines = ["window  anchor  pairs  mean_conf  latent_corr"]
    for d in diagnostics:
        corr = ("        n/a" if d.latent_correlation is None
                else f"{d.latent_correlation:11.6f}")
        lines.append(
            f"{d.window:6d}  {d.anchor_frame:6d}  {d.pair_count:5d}  "
            f"{d.mean_confidence:9.4f}  {corr}")
    return "\n".join(lines)
