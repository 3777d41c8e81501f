"""Tracking quality metrics on a 0-100 scale.

2D point tracks are scored the standard way: position accuracy as the
fraction of visible ground-truth points predicted within a pixel
threshold (averaged over a threshold ladder), a Jaccard score that also
charges occlusion mistakes, and plain binary visibility accuracy. Joint
tracks get the segment-size-relative and fixed 3-pixel variants. 3D
tracks are scored after a global median alignment: the componentwise
median offset between predictions and ground truth is subtracted first,
so a constant displacement of every prediction costs nothing.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "THRESHOLDS_2D",
    "THRESHOLDS_3D",
    "position_accuracy",
    "accuracy_per_threshold",
    "average_jaccard",
    "jaccard_per_threshold",
    "occlusion_accuracy",
    "seg_accuracy",
    "delta_3px",
    "median_offset",
    "apd3d",
    "apd3d_per_threshold",
    "predict_visibility",
    "TrackScore2D",
    "score_tracks_2d",
    "format_report_2d",
    "format_report_3d",
]

THRESHOLDS_2D = (1.0, 2.0, 4.0, 8.0, 16.0)
THRESHOLDS_3D = (0.05, 0.1, 0.2, 0.4, 0.8)


def _as_tracks(name: str, arr, dim: int) -> np.ndarray:
    out = np.asarray(arr, dtype=float)
    if out.ndim != 3 or out.shape[2] != dim:
        raise ValidationError(
            f"{name} must be queries x frames x {dim}, got {out.shape}")
    return out


def _as_flags(name: str, arr, shape) -> np.ndarray:
    out = np.asarray(arr, dtype=bool)
    if out.shape != shape:
        raise ValidationError(
            f"{name} has shape {out.shape}, expected {shape}")
    return out


def _pair(pred, gt, dim: int):
    p = _as_tracks("predictions", pred, dim)
    g = _as_tracks("ground truth", gt, dim)
    if p.shape != g.shape:
        raise ValidationError(
            f"predictions {p.shape} and ground truth {g.shape} disagree")
    return p, g


def _distances(pred, gt, dim: int):
    p, g = _pair(pred, gt, dim)
    return np.linalg.norm(p - g, axis=2), p.shape[:2]


# --------------------------------------------------------------------------
# 2D position metrics


def accuracy_per_threshold(pred, gt, gt_visible,
                           thresholds=THRESHOLDS_2D) -> dict[float, float]:
    """Fraction (0-100) of visible ground-truth points predicted within
    each threshold."""
    dist, shape = _distances(pred, gt, 2)
    vis = _as_flags("ground-truth visibility", gt_visible, shape)
    n_vis = int(vis.sum())
    if n_vis == 0:
        raise ValidationError("no visible ground-truth points to score")
    return {float(t): 100.0 * float(np.sum((dist <= t) & vis)) / n_vis
            for t in thresholds}


def position_accuracy(pred, gt, gt_visible,
                      thresholds=THRESHOLDS_2D) -> float:
    """Mean over thresholds of the within-threshold fraction (0-100)."""
    acc = accuracy_per_threshold(pred, gt, gt_visible, thresholds)
    return float(np.mean(list(acc.values())))


def jaccard_per_threshold(pred, pred_visible, gt, gt_visible,
                          thresholds=THRESHOLDS_2D) -> dict[float, float]:
    """Per-threshold Jaccard (0-100): correct visible predictions over
    ground-truth-visible points plus false positives, where a false
    positive is a visible prediction on an occluded point or a visible
    prediction too far from a visible point."""
    dist, shape = _distances(pred, gt, 2)
    gt_vis = _as_flags("ground-truth visibility", gt_visible, shape)
    pr_vis = _as_flags("predicted visibility", pred_visible, shape)
    gt_positives = int(gt_vis.sum())
    out = {}
    for t in thresholds:
        within = dist <= t
        tp = int(np.sum(within & gt_vis & pr_vis))
        fp = int(np.sum(pr_vis & ~gt_vis))
        fp += int(np.sum(pr_vis & gt_vis & ~within))
        denom = gt_positives + fp
        if denom == 0:
            raise ValidationError(
                "no ground-truth-visible points and no visible predictions")
        out[float(t)] = 100.0 * tp / denom
    return out


def average_jaccard(pred, pred_visible, gt, gt_visible,
                    thresholds=THRESHOLDS_2D) -> float:
    """Mean over thresholds of the Jaccard score (0-100)."""
    jac = jaccard_per_threshold(pred, pred_visible, gt, gt_visible,
                                thresholds)
    return float(np.mean(list(jac.values())))


def occlusion_accuracy(pred_visible, gt_visible) -> float:
    """Fraction (0-100) of points whose predicted visibility flag matches
    the ground-truth flag."""
    gt = np.asarray(gt_visible, dtype=bool)
    if gt.size == 0:
        raise ValidationError("no points to score")
    pr = _as_flags("predicted visibility", pred_visible, gt.shape)
    return 100.0 * float(np.mean(pr == gt))


# --------------------------------------------------------------------------
# joint metrics


def seg_accuracy(pred, gt, gt_visible, areas, ratio: float = 0.2) -> float:
    """Fraction (0-100) of visible joints within ratio * sqrt(segment
    area) of ground truth; ``areas`` is the per-frame segment pixel area."""
    dist, shape = _distances(pred, gt, 2)
    vis = _as_flags("ground-truth visibility", gt_visible, shape)
    area = np.asarray(areas, dtype=float)
    if area.shape != (shape[1],):
        raise ValidationError(
            f"areas has shape {area.shape}, expected ({shape[1]},)")
    if np.any(area < 0) or not np.all(np.isfinite(area)):
        raise ValidationError("segment areas must be finite and >= 0")
    n_vis = int(vis.sum())
    if n_vis == 0:
        raise ValidationError("no visible ground-truth points to score")
    within = dist <= ratio * np.sqrt(area)[None, :]
    return 100.0 * float(np.sum(within & vis)) / n_vis


def delta_3px(pred, gt, gt_visible, threshold: float = 3.0) -> float:
    """Fraction (0-100) of visible joints within a fixed pixel radius."""
    acc = accuracy_per_threshold(pred, gt, gt_visible, (threshold,))
    return acc[float(threshold)]


# --------------------------------------------------------------------------
# 3D metrics


def median_offset(pred, gt, gt_visible=None) -> np.ndarray:
    """Componentwise median of (prediction - ground truth) over scored
    points; subtracting it is the global alignment step."""
    p, g = _pair(pred, gt, 3)
    diff = (p - g).reshape(-1, 3)
    if gt_visible is not None:
        vis = _as_flags("ground-truth visibility", gt_visible, p.shape[:2])
        diff = diff[vis.ravel()]
    if diff.shape[0] == 0:
        raise ValidationError("no visible ground-truth points to score")
    return np.median(diff, axis=0)


def apd3d_per_threshold(pred, gt, gt_visible=None,
                        thresholds=THRESHOLDS_3D,
                        scale: float = 1.0) -> dict[float, float]:
    """Fraction (0-100) of points within each 3D distance threshold after
    subtracting the global median offset; thresholds are multiples of
    ``scale`` (the scene scale)."""
    p, g = _pair(pred, gt, 3)
    if gt_visible is None:
        vis = np.ones(p.shape[:2], dtype=bool)
    else:
        vis = _as_flags("ground-truth visibility", gt_visible, p.shape[:2])
    offset = median_offset(pred, gt, gt_visible)
    dist = np.linalg.norm(p - offset - g, axis=2)
    n_vis = int(vis.sum())
    return {float(t): 100.0 * float(np.sum((dist <= t * scale) & vis)) / n_vis
            for t in thresholds}


def apd3d(pred, gt, gt_visible=None, thresholds=THRESHOLDS_3D,
          scale: float = 1.0) -> float:
    """Mean over thresholds of the aligned within-distance fraction
    (0-100)."""
    acc = apd3d_per_threshold(pred, gt, gt_visible, thresholds, scale)
    return float(np.mean(list(acc.values())))


# --------------------------------------------------------------------------
# visibility prediction


def predict_visibility(confidences, anchor_self_confidences,
                       percentile: float = 10.0) -> np.ndarray:
    """Flag points visible when their match confidence reaches the
    calibrated floor: the given percentile of the anchor frame's
    self-match confidences."""
    conf = np.asarray(confidences, dtype=float)
    ref = np.asarray(anchor_self_confidences, dtype=float).ravel()
    if ref.size == 0:
        raise ValidationError("no anchor self-confidences to calibrate on")
    if not np.all(np.isfinite(ref)):
        raise ValidationError("anchor self-confidences must be finite")
    floor = np.percentile(ref, percentile)
    return conf >= floor


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class TrackScore2D:
    """Bundle of the three 2D scores with per-threshold breakdowns."""

    average_jaccard: float
    position_accuracy: float
    occlusion_accuracy: float
    jaccard_by_threshold: dict[float, float]
    accuracy_by_threshold: dict[float, float]


def score_tracks_2d(pred, pred_visible, gt, gt_visible,
                    thresholds=THRESHOLDS_2D) -> TrackScore2D:
    jac = jaccard_per_threshold(pred, pred_visible, gt, gt_visible,
                                thresholds)
    acc = accuracy_per_threshold(pred, gt, gt_visible, thresholds)
    return TrackScore2D(
        average_jaccard=float(np.mean(list(jac.values()))),
        position_accuracy=float(np.mean(list(acc.values()))),
        occlusion_accuracy=occlusion_accuracy(pred_visible, gt_visible),
        jaccard_by_threshold=jac,
        accuracy_by_threshold=acc,
    )


def format_report_2d(score: TrackScore2D) -> str:
    """Structured text: summary line plus one line per threshold."""
    lines = [
        f"AJ {score.average_jaccard:.2f}  "
        f"delta_avg {score.position_accuracy:.2f}  "
        f"OA {score.occlusion_accuracy:.2f}",
    ]
    for t in sorted(score.accuracy_by_threshold):
        lines.append(
            f"  threshold {t:g}px: jaccard "
            f"{score.jaccard_by_threshold[t]:.2f}  within "
            f"{score.accuracy_by_threshold[t]:.2f}")
    return "\n".join(lines)


def format_report_3d(per_threshold: dict[float, float],
                     scale: float = 1.0) -> str:
    """Structured text: APD summary line plus one line per threshold."""
    mean = float(np.mean(list(per_threshold.values())))
    lines = [f"APD3D {mean:.2f} (median-aligned, scale {scale:g})"]
    for t in sorted(per_threshold):
        lines.append(f"  threshold {t:g}: within {per_threshold[t]:.2f}")
    return "\n".join(lines)
