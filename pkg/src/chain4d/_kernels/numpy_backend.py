"""Pure numpy/scipy implementations of the two hot kernels.

These are the import-time fallback when the compiled extension is not
available. They produce the same results as the extension (agreement is
covered by tests) but run slower on large inputs, mainly because the
graph search materializes a full landmark-by-vertex distance matrix.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra as _scipy_dijkstra


def multi_source_knn_dijkstra(indptr, indices, weights, sources, k, n_vertices):
    """Per-vertex k nearest sources by graph distance.

    Args:
        indptr, indices, weights: CSR adjacency of the undirected edge
            graph with positive edge weights.
        sources: source vertex ids, one per source slot.
        k: number of nearest source slots to keep per vertex.
        n_vertices: vertex count.

    Returns:
        (nb_src, nb_dist, counts): nb_src is (V, k) int32 source-slot ids
        padded with -1, nb_dist the matching distances padded with inf,
        both ordered by increasing distance (ties: lower slot id);
        counts the number of valid entries per vertex.
    """
    sources = np.asarray(sources, dtype=np.int64)
    graph = sp.csr_array(
        (np.asarray(weights, dtype=np.float64),
         np.asarray(indices, dtype=np.int32),
         np.asarray(indptr, dtype=np.int64)),
        shape=(n_vertices, n_vertices))
    dist = _scipy_dijkstra(graph, directed=False, indices=sources)
    k = min(k, len(sources))
    # stable sort keeps lower slot ids first on exact distance ties
    order = np.argsort(dist, axis=0, kind="stable")[:k]
    nb_dist = np.take_along_axis(dist, order, axis=0).T.copy()
    nb_src = order.T.astype(np.int32)
    invalid = ~np.isfinite(nb_dist)
    nb_src[invalid] = -1
    nb_dist[invalid] = np.inf
    counts = (~invalid).sum(axis=1).astype(np.int32)
    return nb_src, np.ascontiguousarray(nb_dist), counts


def deform_frames(anchor_vertices, nb_idx, nb_w, lmk_anchor, lmk_frames,
                  rank_tol=1e-9):
    """Per-vertex weighted rigid fit against landmark neighborhoods.

    For every vertex and frame, fits the rotation + translation that best
    carries the vertex's weighted anchor-landmark neighborhood onto the
    frame-landmark neighborhood, then applies it to the vertex.

    Args:
        anchor_vertices: (V, 3) anchor positions.
        nb_idx: (V, k) landmark slot ids per vertex, padded with -1.
        nb_w: (V, k) neighborhood weights (zero on padding).
        lmk_anchor: (L, 3) anchor landmark positions.
        lmk_frames: (F, L, 3) per-frame landmark positions.
        rank_tol: relative second-singular-value cutoff below which the
            rotation is unobservable and identity is used instead.

    Returns:
        (F, V, 3) deformed vertex positions.
    """
    va = np.asarray(anchor_vertices, dtype=np.float64)
    nb_idx = np.asarray(nb_idx, dtype=np.int64)
    w = np.asarray(nb_w, dtype=np.float64)
    lmk_frames = np.asarray(lmk_frames, dtype=np.float64)
    n_frames = lmk_frames.shape[0]
    n_vertices = va.shape[0]

    valid = nb_idx >= 0
    idx = np.where(valid, nb_idx, 0)
    w = np.where(valid, w, 0.0)
    wsum = w.sum(axis=1)
    empty = wsum <= 0.0
    wsafe = np.where(empty, 1.0, wsum)

    la = np.asarray(lmk_anchor, dtype=np.float64)[idx]          # (V, k, 3)
    mu_a = np.einsum("vk,vki->vi", w, la) / wsafe[:, None]
    ca = la - mu_a[:, None, :]

    out = np.empty((n_frames, n_vertices, 3))
    eye = np.eye(3)
    for f in range(n_frames):
        lf = lmk_frames[f][idx]                                  # (V, k, 3)
        mu_f = np.einsum("vk,vki->vi", w, lf) / wsafe[:, None]
        # sum_k w * centered_anchor * frame^T; the mu_f term cancels
        # because the weighted centered anchors sum to zero
        cov = np.einsum("vk,vki,vkj->vij", w, ca, lf)
        u, s, vt = np.linalg.svd(cov)
        v = vt.transpose(0, 2, 1)
        det = np.linalg.det(v @ u.transpose(0, 2, 1))
        sign = np.where(det < 0, -1.0, 1.0)
        v_adj = v.copy()
        v_adj[:, :, 2] *= sign[:, None]
        rot = v_adj @ u.transpose(0, 2, 1)
        degenerate = s[:, 1] <= rank_tol * np.maximum(s[:, 0], 1e-300)
        rot[degenerate] = eye
        rot[empty] = eye
        pos = np.einsum("vij,vj->vi", rot, va - mu_a) + mu_f
        pos[empty] = va[empty]
        out[f] = pos
    return out
