# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled kernels: bucket-queue multi-source graph search and the
per-vertex rigid-fit deformation loop.

Build in place with `python3 setup.py build_ext --inplace`. The package
falls back to the numpy implementations when this module is missing.
"""

import numpy as np

from libc.stdlib cimport malloc, realloc, free, calloc
from libc.math cimport sqrt, fabs, INFINITY, nextafterf
from libc.string cimport memcpy, memset
from libcpp.algorithm cimport sort as cpp_sort
from libcpp.pair cimport pair

ctypedef pair[unsigned long long, unsigned long long] qentry


# ---------------------------------------------------------------------------
# multi-source k-nearest Dijkstra
# ---------------------------------------------------------------------------


cdef void _radix_sort_entries(qentry *a, qentry *tmp, Py_ssize_t n,
                              long long *cnt) noexcept nogil:
    """Stable LSD radix sort of entries by distance bits, then a tie-fix
    pass that orders runs of equal distances by the packed payload, so
    the result matches a full (distance, source) comparison sort.
    Passes whose 16-bit digit is constant across the array are skipped,
    which removes most of the work: one bucket spans less than one edge
    weight, so the high digits rarely differ.
    """
    cdef int p, shift
    cdef Py_ssize_t i, j, t, c
    cdef int digit
    cdef qentry *s1 = a
    cdef qentry *s2 = tmp
    cdef qentry *pt
    for p in range(4):
        shift = 16 * p
        memset(cnt, 0, 65536 * sizeof(long long))
        for i in range(n):
            cnt[(s1[i].first >> shift) & 0xffff] += 1
        if cnt[(s1[0].first >> shift) & 0xffff] == n:
            continue
        t = 0
        for i in range(65536):
            c = cnt[i]
            cnt[i] = t
            t += c
        for i in range(n):
            digit = <int>((s1[i].first >> shift) & 0xffff)
            s2[cnt[digit]] = s1[i]
            cnt[digit] += 1
        pt = s1; s1 = s2; s2 = pt
    if s1 != a:
        memcpy(a, s1, n * sizeof(qentry))
    i = 0
    while i < n:
        j = i + 1
        while j < n and a[j].first == a[i].first:
            j += 1
        if j - i > 1:
            cpp_sort(a + i, a + j)
        i = j


def knn_dijkstra(indptr, indices, weights, sources, int k, int n_vertices):
    """Per-vertex k nearest source slots by graph distance.

    Same contract as the numpy backend: returns (nb_src, nb_dist, counts)
    with entries ordered by increasing distance.

    Implementation: labeled multi-source search over a circular bucket
    queue, bucket width = smallest edge weight. Since every relaxation
    adds at least one bucket width, no relaxation re-enters the bucket
    being drained, so each bucket's entry set is fixed once it is
    reached; sorting the drained bucket by (distance, source) makes
    the overall pop order globally ascending, which gives the exact
    Dijkstra invariant and reproduces the stable tie-breaking of the
    dense fallback. Buckets are contiguous grow-on-append arrays and a
    per-(vertex, source) tentative-distance table deduplicates pushes,
    so the queue streams instead of chasing list links.
    """
    cdef const long long[:] c_indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const int[:] c_indices = np.ascontiguousarray(indices, dtype=np.int32)
    cdef const double[:] c_weights = np.ascontiguousarray(weights, dtype=np.float64)
    cdef const int[:] c_sources = np.ascontiguousarray(sources, dtype=np.int32)

    cdef Py_ssize_t n_edges = c_weights.shape[0]
    cdef Py_ssize_t n_src = c_sources.shape[0]
    if n_src == 0:
        raise ValueError("knn_dijkstra: no sources")
    if k <= 0:
        raise ValueError("knn_dijkstra: k must be positive")
    if k > n_src:
        k = <int>n_src

    cdef double min_w = INFINITY
    cdef double max_w = 0.0
    cdef Py_ssize_t i
    for i in range(n_edges):
        if not (c_weights[i] > 0.0):
            raise ValueError("knn_dijkstra: edge weights must be positive")
        if c_weights[i] < min_w:
            min_w = c_weights[i]
        if c_weights[i] > max_w:
            max_w = c_weights[i]
    if n_edges == 0:
        min_w = 1.0
        max_w = 1.0

    cdef long long n_buckets = <long long>(max_w / min_w) + 3
    if n_buckets > 5_000_000:
        raise ValueError("knn_dijkstra: edge weight ratio too large for bucket queue")
    cdef long long n_pairs = <long long>n_vertices * <long long>n_src
    if n_pairs * 4 > (<long long>1 << 31):
        raise ValueError("knn_dijkstra: pair table would exceed the bucket queue memory budget")

    nb_src_arr = np.full((n_vertices, k), -1, dtype=np.int32)
    nb_dist_arr = np.full((n_vertices, k), np.inf, dtype=np.float64)
    counts_arr = np.zeros(n_vertices, dtype=np.int32)
    cdef int[:, ::1] nb_src = nb_src_arr
    cdef double[:, ::1] nb_dist = nb_dist_arr
    cdef int[:] counts = counts_arr

    cdef double delta = min_w
    cdef long long bitmap_bytes = (n_pairs + 7) // 8
    cdef unsigned char *visited = <unsigned char *>calloc(bitmap_bytes, 1)
    # tent[pair] = upper bound on the best queued distance for the pair,
    # stored as an up-rounded float32 (a too-high bound only costs a
    # duplicate push, never a wrong skip); all-ones bytes read as NaN,
    # and NaN comparisons fall through to "push", so memset initializes
    cdef float *tent = <float *>malloc(n_pairs * sizeof(float))
    # one contiguous append-only array per bucket slot; an entry packs
    # the distance bits (IEEE order == numeric order for non-negatives)
    # with (source << 32 | vertex), so std::sort gives (d, s) order
    cdef qentry **b_e = <qentry **>calloc(n_buckets, sizeof(qentry *))
    cdef Py_ssize_t *b_len = <Py_ssize_t *>calloc(n_buckets, sizeof(Py_ssize_t))
    cdef Py_ssize_t *b_cap = <Py_ssize_t *>calloc(n_buckets, sizeof(Py_ssize_t))
    cdef long long *rcnt = <long long *>malloc(65536 * sizeof(long long))
    cdef qentry *rtmp = NULL
    cdef Py_ssize_t rtmp_cap = 0
    cdef bint alloc_bad = (visited == NULL or tent == NULL or b_e == NULL or
                           b_len == NULL or b_cap == NULL or rcnt == NULL)
    cdef long long q
    if alloc_bad:
        free(visited); free(tent)
        free(b_e); free(b_len); free(b_cap); free(rcnt)
        raise MemoryError()

    cdef double inv_delta = 1.0 / delta
    cdef long long remaining = 0
    cdef long long cur = 0
    cdef long long slot, babs, bslot
    cdef long long pkey
    cdef Py_ssize_t j, nb, t, newcap, live
    cdef int v, s, u, c
    cdef double d, nd
    cdef float tf
    cdef qentry *ce
    cdef unsigned long long dbits, payload
    cdef unsigned long long mask32 = 0xffffffff
    cdef bint failed = 0
    cdef long long n_full = 0

    with nogil:
        memset(tent, 0xFF, n_pairs * sizeof(float))

        # seed: every source sits at distance zero in bucket 0
        newcap = n_src if n_src > 1024 else 1024
        b_e[0] = <qentry *>malloc(newcap * sizeof(qentry))
        if b_e[0] == NULL:
            failed = 1
        else:
            b_cap[0] = newcap
            for j in range(n_src):
                b_e[0][j].first = 0
                b_e[0][j].second = (<unsigned long long>j << 32) | <unsigned long long><unsigned int>c_sources[j]
                tent[<long long>j * n_vertices + c_sources[j]] = <float>0.0
            b_len[0] = n_src
            remaining = n_src

        while remaining > 0 and n_full < n_vertices and not failed:
            slot = cur % n_buckets
            nb = b_len[slot]
            if nb == 0:
                cur += 1
                continue
            ce = b_e[slot]
            b_len[slot] = 0          # no relaxation re-enters this bucket
            remaining -= nb

            # drop entries that are already dead before paying for the
            # sort; settled state only grows, so this is conservative
            live = 0
            for t in range(nb):
                payload = ce[t].second
                v = <int>(payload & mask32)
                if counts[v] >= k:
                    continue
                s = <int>(payload >> 32)
                pkey = <long long>s * n_vertices + v
                if visited[pkey >> 3] & (1 << (pkey & 7)):
                    continue
                dbits = ce[t].first
                memcpy(&d, &dbits, 8)
                if d > <double>tent[pkey]:
                    continue
                ce[live] = ce[t]
                live += 1
            nb = live
            if nb >= 4096:
                if nb > rtmp_cap:
                    rtmp_cap = 2 * nb
                    rtmp = <qentry *>realloc(rtmp, rtmp_cap * sizeof(qentry))
                    if rtmp == NULL:
                        failed = 1
                        break
                _radix_sort_entries(ce, rtmp, nb, rcnt)
            else:
                cpp_sort(ce, ce + nb)

            for t in range(nb):
                dbits = ce[t].first
                payload = ce[t].second
                memcpy(&d, &dbits, 8)
                s = <int>(payload >> 32)
                v = <int>(payload & mask32)
                c = counts[v]
                if c >= k:
                    continue
                pkey = <long long>s * n_vertices + v
                if visited[pkey >> 3] & (1 << (pkey & 7)):
                    continue
                if d > <double>tent[pkey]:
                    continue         # superseded by a later, shorter push
                visited[pkey >> 3] |= <unsigned char>(1 << (pkey & 7))
                nb_src[v, c] = s
                nb_dist[v, c] = d
                counts[v] = c + 1
                if counts[v] >= k:
                    n_full += 1
                for j in range(c_indptr[v], c_indptr[v + 1]):
                    u = c_indices[j]
                    if counts[u] >= k:
                        continue
                    pkey = <long long>s * n_vertices + u
                    if visited[pkey >> 3] & (1 << (pkey & 7)):
                        continue
                    nd = d + c_weights[j]
                    if nd >= <double>tent[pkey]:
                        continue     # an at-least-as-good entry is queued
                    tf = <float>nd
                    if <double>tf < nd:
                        tf = nextafterf(tf, <float>INFINITY)
                    tent[pkey] = tf
                    babs = <long long>(nd * inv_delta)
                    # exact-floor fixup for the multiply approximation
                    while (babs + 1) * delta <= nd:
                        babs += 1
                    while babs * delta > nd:
                        babs -= 1
                    bslot = babs % n_buckets
                    if b_len[bslot] >= b_cap[bslot]:
                        newcap = 2 * b_cap[bslot] if b_cap[bslot] > 0 else 1024
                        b_e[bslot] = <qentry *>realloc(b_e[bslot], newcap * sizeof(qentry))
                        if b_e[bslot] == NULL:
                            failed = 1
                            break
                        b_cap[bslot] = newcap
                    memcpy(&dbits, &nd, 8)
                    b_e[bslot][b_len[bslot]].first = dbits
                    b_e[bslot][b_len[bslot]].second = (<unsigned long long><unsigned int>s << 32) | <unsigned long long><unsigned int>u
                    b_len[bslot] += 1
                    remaining += 1
                if failed:
                    break
            cur += 1

    free(visited)
    free(tent)
    for q in range(n_buckets):
        free(b_e[q])
    free(b_e); free(b_len); free(b_cap)
    free(rcnt); free(rtmp)
    if failed:
        raise MemoryError()
    return nb_src_arr, nb_dist_arr, counts_arr


# ---------------------------------------------------------------------------
# per-vertex weighted rigid fit over frames
# ---------------------------------------------------------------------------

cdef void _jacobi4(double *a, double *vec, double *val) noexcept nogil:
    """Eigendecomposition of a symmetric 4x4 via cyclic Jacobi rotations.

    `a` (row-major 16 doubles, both triangles kept in sync) is destroyed;
    eigenvectors land in the columns of `vec`, eigenvalues in `val`.
    """
    cdef int p, q, r, sweep
    cdef double off, theta, t, c, s, tau, h, g
    for p in range(4):
        for q in range(4):
            vec[4 * p + q] = 1.0 if p == q else 0.0
    for sweep in range(50):
        off = 0.0
        for p in range(3):
            for q in range(p + 1, 4):
                off += a[4 * p + q] * a[4 * p + q]
        if off < 1e-30:
            break
        for p in range(3):
            for q in range(p + 1, 4):
                g = a[4 * p + q]
                if fabs(g) < 1e-300:
                    continue
                theta = (a[4 * q + q] - a[4 * p + p]) / (2.0 * g)
                if theta >= 0:
                    t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                tau = s / (1.0 + c)
                h = t * g
                a[4 * p + p] -= h
                a[4 * q + q] += h
                a[4 * p + q] = 0.0
                a[4 * q + p] = 0.0
                for r in range(4):
                    if r == p or r == q:
                        continue
                    g = a[4 * r + p]
                    h = a[4 * r + q]
                    a[4 * r + p] = g - s * (h + tau * g)
                    a[4 * p + r] = a[4 * r + p]
                    a[4 * r + q] = h + s * (g - tau * h)
                    a[4 * q + r] = a[4 * r + q]
                for r in range(4):
                    g = vec[4 * r + p]
                    h = vec[4 * r + q]
                    vec[4 * r + p] = g - s * (h + tau * g)
                    vec[4 * r + q] = h + s * (g - tau * h)
    for p in range(4):
        val[p] = a[4 * p + p]


cdef inline void _rotation_from_cov(double *h, double rank_tol, double *rot) nogil:
    """Best proper rotation R with R @ anchor ~ frame from the 3x3
    weighted cross-covariance, via the quaternion eigen formulation."""
    cdef double n[16]
    cdef double vec[16]
    cdef double val[4]
    cdef double q0, qx, qy, qz, norm
    cdef int best, second, p
    cdef double lmax, lsecond

    n[0] = h[0] + h[4] + h[8]
    n[1] = h[5] - h[7]
    n[2] = h[6] - h[2]
    n[3] = h[1] - h[3]
    n[4] = n[1]
    n[5] = h[0] - h[4] - h[8]
    n[6] = h[1] + h[3]
    n[7] = h[6] + h[2]
    n[8] = n[2]
    n[9] = n[6]
    n[10] = -h[0] + h[4] - h[8]
    n[11] = h[5] + h[7]
    n[12] = n[3]
    n[13] = n[7]
    n[14] = n[11]
    n[15] = -h[0] - h[4] + h[8]

    _jacobi4(n, vec, val)
    best = 0
    for p in range(1, 4):
        if val[p] > val[best]:
            best = p
    lmax = val[best]
    lsecond = -INFINITY
    for p in range(4):
        if p != best and val[p] > lsecond:
            lsecond = val[p]
    # lmax + lsecond == 2 * sigma1 of the covariance; a vanishing gap
    # means the rotation is unobservable (rank-deficient neighborhood)
    if lmax - lsecond <= rank_tol * fabs(lmax + lsecond) or lmax <= 1e-300:
        rot[0] = 1.0; rot[1] = 0.0; rot[2] = 0.0
        rot[3] = 0.0; rot[4] = 1.0; rot[5] = 0.0
        rot[6] = 0.0; rot[7] = 0.0; rot[8] = 1.0
        return
    q0 = vec[4 * 0 + best]
    qx = vec[4 * 1 + best]
    qy = vec[4 * 2 + best]
    qz = vec[4 * 3 + best]
    norm = sqrt(q0 * q0 + qx * qx + qy * qy + qz * qz)
    q0 /= norm; qx /= norm; qy /= norm; qz /= norm
    rot[0] = q0 * q0 + qx * qx - qy * qy - qz * qz
    rot[1] = 2.0 * (qx * qy - q0 * qz)
    rot[2] = 2.0 * (qx * qz + q0 * qy)
    rot[3] = 2.0 * (qy * qx + q0 * qz)
    rot[4] = q0 * q0 - qx * qx + qy * qy - qz * qz
    rot[5] = 2.0 * (qy * qz - q0 * qx)
    rot[6] = 2.0 * (qz * qx - q0 * qy)
    rot[7] = 2.0 * (qz * qy + q0 * qx)
    rot[8] = q0 * q0 - qx * qx - qy * qy + qz * qz


def deform_frames(anchor_vertices, nb_idx, nb_w, lmk_anchor, lmk_frames,
                  double rank_tol=1e-9):
    """Same contract as the numpy backend deform_frames."""
    cdef const double[:, ::1] va = np.ascontiguousarray(anchor_vertices, dtype=np.float64)
    cdef const int[:, ::1] idx = np.ascontiguousarray(nb_idx, dtype=np.int32)
    cdef const double[:, ::1] w = np.ascontiguousarray(nb_w, dtype=np.float64)
    cdef const double[:, ::1] la = np.ascontiguousarray(lmk_anchor, dtype=np.float64)
    cdef const double[:, :, ::1] lfr = np.ascontiguousarray(lmk_frames, dtype=np.float64)

    cdef Py_ssize_t n_v = va.shape[0]
    cdef Py_ssize_t kk = idx.shape[1]
    cdef Py_ssize_t n_f = lfr.shape[0]

    out_arr = np.empty((n_f, n_v, 3), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr

    # per-vertex scratch: packed weighted anchor offsets for valid slots
    cdef double *caw = <double *>malloc(kk * 4 * sizeof(double))
    cdef int *lid = <int *>malloc(kk * sizeof(int))
    if caw == NULL or lid == NULL:
        free(caw); free(lid)
        raise MemoryError()

    cdef Py_ssize_t v, j, f, nval
    cdef int l
    cdef double ws, wj
    cdef double h[9]
    cdef double rot[9]
    cdef double max_, may, maz
    cdef double mfx, mfy, mfz, ax, ay, az, px, py, pz

    with nogil:
        for v in range(n_v):
            # pass 1: weight sum and anchor centroid
            ws = 0.0
            mfx = 0.0; mfy = 0.0; mfz = 0.0
            for j in range(kk):
                l = idx[v, j]
                if l < 0:
                    continue
                wj = w[v, j]
                ws += wj
                mfx += wj * la[l, 0]
                mfy += wj * la[l, 1]
                mfz += wj * la[l, 2]
            if ws <= 0.0:
                for f in range(n_f):
                    out[f, v, 0] = va[v, 0]
                    out[f, v, 1] = va[v, 1]
                    out[f, v, 2] = va[v, 2]
                continue
            max_ = mfx / ws; may = mfy / ws; maz = mfz / ws

            # pass 2: pack weighted centered anchor offsets once
            nval = 0
            for j in range(kk):
                l = idx[v, j]
                if l < 0:
                    continue
                wj = w[v, j]
                caw[4 * nval + 0] = wj * (la[l, 0] - max_)
                caw[4 * nval + 1] = wj * (la[l, 1] - may)
                caw[4 * nval + 2] = wj * (la[l, 2] - maz)
                caw[4 * nval + 3] = wj
                lid[nval] = l
                nval += 1

            ax = va[v, 0] - max_
            ay = va[v, 1] - may
            az = va[v, 2] - maz
            for f in range(n_f):
                mfx = 0.0; mfy = 0.0; mfz = 0.0
                for j in range(9):
                    h[j] = 0.0
                for j in range(nval):
                    l = lid[j]
                    px = lfr[f, l, 0]
                    py = lfr[f, l, 1]
                    pz = lfr[f, l, 2]
                    wj = caw[4 * j + 3]
                    mfx += wj * px
                    mfy += wj * py
                    mfz += wj * pz
                    h[0] += caw[4 * j + 0] * px
                    h[1] += caw[4 * j + 0] * py
                    h[2] += caw[4 * j + 0] * pz
                    h[3] += caw[4 * j + 1] * px
                    h[4] += caw[4 * j + 1] * py
                    h[5] += caw[4 * j + 1] * pz
                    h[6] += caw[4 * j + 2] * px
                    h[7] += caw[4 * j + 2] * py
                    h[8] += caw[4 * j + 2] * pz
                mfx /= ws; mfy /= ws; mfz /= ws
                _rotation_from_cov(h, rank_tol, rot)
                out[f, v, 0] = rot[0] * ax + rot[1] * ay + rot[2] * az + mfx
                out[f, v, 1] = rot[3] * ax + rot[4] * ay + rot[5] * az + mfy
                out[f, v, 2] = rot[6] * ax + rot[7] * ay + rot[8] * az + mfz

    free(caw)
    free(lid)
    return out_arr
