"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; setting
CHAIN4D_FORCE_NUMPY=1 in the environment forces the numpy fallback
(useful for the agreement tests and benchmarks).
"""

import os

from . import numpy_backend

_FORCED = os.environ.get("CHAIN4D_FORCE_NUMPY", "") not in ("", "0")

if not _FORCED:
    try:
        from . import _ext
    except ImportError:
        _ext = None
else:
    _ext = None


def backend_name() -> str:
    return "ext" if _ext is not None else "numpy"


def multi_source_knn_dijkstra(indptr, indices, weights, sources, k, n_vertices):
    if _ext is not None:
        try:
            return _ext.knn_dijkstra(indptr, indices, weights, sources, k, n_vertices)
        except ValueError as exc:
            # only the bucket-queue capacity limit falls back; contract
            # violations must surface identically on both backends
            if "bucket queue" not in str(exc) and "bitmap" not in str(exc):
                raise
    return numpy_backend.multi_source_knn_dijkstra(
        indptr, indices, weights, sources, k, n_vertices)


def deform_frames(anchor_vertices, nb_idx, nb_w, lmk_anchor, lmk_frames,
                  rank_tol=1e-9):
    if _ext is not None:
        return _ext.deform_frames(anchor_vertices, nb_idx, nb_w, lmk_anchor,
                                  lmk_frames, rank_tol)
    return numpy_backend.deform_frames(anchor_vertices, nb_idx, nb_w,
                                       lmk_anchor, lmk_frames, rank_tol)
