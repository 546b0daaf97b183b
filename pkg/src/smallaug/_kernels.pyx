# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_pykernels`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, floor
from libc.stdlib cimport malloc, free

cnp.import_array()

# numpy's vectorized run-length code is as fast as a compiled loop here
# (see benchmarks/bench_kernels.py), so both backends share it
from smallaug._pykernels import rle_decode, rle_encode  # noqa: F401


cdef inline void _sort(double* a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double v
    for i in range(1, n):
        v = a[i]
        j = i - 1
        while j >= 0 and a[j] > v:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = v


cdef inline Py_ssize_t _first_at_or_after(double c, Py_ssize_t w) noexcept nogil:
    # smallest x with x + 0.5 >= c, clamped to [0, w]
    cdef Py_ssize_t x
    if c <= 0.5:
        return 0
    if c > w + 1.0:
        return w
    x = <Py_ssize_t>ceil(c - 0.5)
    while x > 0 and x - 1 + 0.5 >= c:
        x -= 1
    while x + 0.5 < c:
        x += 1
    if x > w:
        return w
    return x


def fill_polygon(cnp.uint8_t[:, ::1] mask, xs, ys):
    cdef double[::1] px = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] py = np.ascontiguousarray(ys, dtype=np.float64)
    cdef Py_ssize_t n = px.shape[0]
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    cdef Py_ssize_t row, e, k, t, x, xa, xb, ymin, ymax
    cdef double yc, ax, ay, bx, by, lo, hi
    cdef double* cross
    if n < 3 or h == 0 or w == 0:
        return
    lo = py[0]
    hi = py[0]
    for e in range(n):
        if py[e] < lo:
            lo = py[e]
        if py[e] > hi:
            hi = py[e]
    ymin = <Py_ssize_t>floor(lo - 0.5) if lo - 0.5 > 0 else 0
    ymax = <Py_ssize_t>ceil(hi + 0.5) if hi + 0.5 < h else h
    if ymin < 0:
        ymin = 0
    cross = <double*>malloc(n * sizeof(double))
    if cross == NULL:
        raise MemoryError()
    try:
        with nogil:
            for row in range(ymin, ymax):
                yc = row + 0.5
                k = 0
                for e in range(n):
                    ax = px[e]
                    ay = py[e]
                    bx = px[(e + 1) % n]
                    by = py[(e + 1) % n]
                    if (ay > yc) != (by > yc):
                        cross[k] = (bx - ax) * (yc - ay) / (by - ay) + ax
                        k += 1
                if k < 2:
                    continue
                _sort(cross, k)
                t = 0
                while t + 1 < k:
                    xa = _first_at_or_after(cross[t], w)
                    xb = _first_at_or_after(cross[t + 1], w)
                    for x in range(xa, xb):
                        mask[row, x] = 1
                    t += 2
    finally:
        free(cross)


def counts_to_string(counts):
    cdef cnp.int64_t[::1] cnt = np.ascontiguousarray(counts, dtype=np.int64)
    cdef Py_ssize_t n = cnt.shape[0], i, p = 0
    cdef long long x
    cdef int ch
    cdef bint more
    cdef bytearray buf = bytearray(n * 13 + 1)
    cdef unsigned char* s = buf
    for i in range(n):
        x = cnt[i]
        if i > 2:
            x -= cnt[i - 2]
        more = True
        while more:
            ch = <int>(x & 0x1F)
            x >>= 5
            if ch & 0x10:
                more = x != -1
            else:
                more = x != 0
            if more:
                ch |= 0x20
            s[p] = <unsigned char>(ch + 48)
            p += 1
    return bytes(buf[:p]).decode("ascii")


def string_to_counts(s):
    cdef bytes data = s.encode("ascii") if isinstance(s, str) else bytes(s)
    cdef const unsigned char* d = data
    cdef Py_ssize_t n = len(data), p = 0, m = 0, k
    cdef long long x
    cdef int ch
    cdef bint more
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    while p < n:
        x = 0
        k = 0
        more = True
        while more:
            if p >= n:
                raise ValueError("truncated RLE string")
            ch = d[p] - 48
            x |= (<long long>(ch & 0x1F)) << (5 * k)
            more = (ch & 0x20) != 0
            p += 1
            k += 1
            if not more and (ch & 0x10):
                x |= (<long long>-1) << (5 * k)
        if m > 2:
            x += o[m - 2]
        o[m] = x
        m += 1
    return out[:m].copy()


def match_grid(gts, double width, double height, strides, anchor_w, anchor_h,
               double threshold, double straddle):
    cdef double[:, ::1] g = np.ascontiguousarray(gts, dtype=np.float64).reshape(-1, 4)
    cdef double[::1] st = np.ascontiguousarray(strides, dtype=np.float64)
    cdef double[:, ::1] aw = np.ascontiguousarray(anchor_w, dtype=np.float64)
    cdef double[:, ::1] ah = np.ascontiguousarray(anchor_h, dtype=np.float64)
    cdef Py_ssize_t m = g.shape[0], L = st.shape[0], R = aw.shape[1]
    cdef Py_ssize_t q, lv, r, i, j, ilo, ihi, jlo, jhi, order_i, idx, cap, npos = 0
    cdef Py_ssize_t best_idx
    cdef double gx0, gy0, gw, gh, gx1, gy1, garea, s, w_, h_, cx, cy
    cdef double ax0, ay0, ax1, ay1, iw, ih, inter, union, iou, best_iou
    cdef double aarea, bnd
    nx_arr = np.empty(L, dtype=np.int64)
    ny_arr = np.empty(L, dtype=np.int64)
    off_arr = np.zeros(L + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] nx = nx_arr, ny = ny_arr, off = off_arr
    for lv in range(L):
        nx[lv] = <cnp.int64_t>ceil(width / st[lv])
        ny[lv] = <cnp.int64_t>ceil(height / st[lv])
        off[lv + 1] = off[lv] + nx[lv] * ny[lv] * R
    max_iou = np.zeros(m, dtype=np.float64)
    best = np.full(m, -1, dtype=np.int64)
    cdef double[::1] mx = max_iou
    cdef cnp.int64_t[::1] bst = best
    # per (gt, level, ratio) upper bounds; levels visited best-bound first
    bounds = np.zeros((L, R), dtype=np.float64)
    cdef double[:, ::1] bd = bounds
    cap = 64
    pa = np.empty(cap, dtype=np.int64)
    pg = np.empty(cap, dtype=np.int64)
    pv = np.empty(cap, dtype=np.float64)
    cdef cnp.int64_t[::1] pa_v = pa, pg_v = pg
    cdef double[::1] pv_v = pv
    first_valid = _first_valid(st, aw, ah, nx, ny, off, width, height, straddle)
    for q in range(m):
        gx0 = g[q, 0]
        gy0 = g[q, 1]
        gw = g[q, 2]
        gh = g[q, 3]
        gx1 = gx0 + gw
        gy1 = gy0 + gh
        garea = gw * gh
        for lv in range(L):
            for r in range(R):
                aarea = aw[lv, r] * ah[lv, r]
                if aarea <= 0 or garea <= 0:
                    bd[lv, r] = 0.0
                elif aarea < garea:
                    bd[lv, r] = aarea / garea
                else:
                    bd[lv, r] = garea / aarea
        level_order = np.argsort(-bounds.max(axis=1), kind="stable")
        best_iou = 0.0
        best_idx = -1
        for order_i in range(L):
            lv = level_order[order_i]
            s = st[lv]
            for r in range(R):
                bnd = bd[lv, r] * (1.0 + 1e-9)
                if bnd <= threshold and bnd < best_iou:
                    continue
                w_ = aw[lv, r]
                h_ = ah[lv, r]
                ilo = <Py_ssize_t>floor((gx0 - w_ / 2.0 - s / 2.0) / s) - 1
                ihi = <Py_ssize_t>ceil((gx1 + w_ / 2.0 - s / 2.0) / s) + 1
                jlo = <Py_ssize_t>floor((gy0 - h_ / 2.0 - s / 2.0) / s) - 1
                jhi = <Py_ssize_t>ceil((gy1 + h_ / 2.0 - s / 2.0) / s) + 1
                if ilo < 0:
                    ilo = 0
                if jlo < 0:
                    jlo = 0
                if ihi > nx[lv] - 1:
                    ihi = nx[lv] - 1
                if jhi > ny[lv] - 1:
                    jhi = ny[lv] - 1
                for j in range(jlo, jhi + 1):
                    cy = j * s + s / 2.0
                    ay0 = cy - h_ / 2.0
                    ay1 = ay0 + h_
                    for i in range(ilo, ihi + 1):
                        cx = i * s + s / 2.0
                        ax0 = cx - w_ / 2.0
                        ax1 = ax0 + w_
                        if straddle >= 0 and (ax0 < -straddle or ay0 < -straddle
                                              or ax1 > width + straddle
                                              or ay1 > height + straddle):
                            continue
                        iw = (ax1 if ax1 < gx1 else gx1) - (ax0 if ax0 > gx0 else gx0)
                        if iw <= 0:
                            continue
                        ih = (ay1 if ay1 < gy1 else gy1) - (ay0 if ay0 > gy0 else gy0)
                        if ih <= 0:
                            continue
                        inter = iw * ih
                        union = w_ * h_ + garea - inter
                        if union <= 0:
                            continue
                        iou = inter / union
                        idx = off[lv] + (j * nx[lv] + i) * R + r
                        if iou > best_iou or (iou == best_iou and iou > 0 and idx < best_idx):
                            best_iou = iou
                            best_idx = idx
                        if iou > threshold:
                            if npos == cap:
                                cap *= 2
                                pa = np.resize(pa, cap)
                                pg = np.resize(pg, cap)
                                pv = np.resize(pv, cap)
                                pa_v = pa
                                pg_v = pg
                                pv_v = pv
                            pa_v[npos] = idx
                            pg_v[npos] = q
                            pv_v[npos] = iou
                            npos += 1
        mx[q] = best_iou
        bst[q] = best_idx if best_iou > 0 else first_valid
    positive = np.zeros(m, dtype=np.int64)
    if npos:
        a = pa[:npos]
        gq = pg[:npos]
        v = pv[:npos]
        # per anchor: highest iou first, then lowest gt index
        order = np.lexsort((gq, -v, a))
        a, gq = a[order], gq[order]
        lead = np.ones(npos, dtype=bool)
        lead[1:] = a[1:] != a[:-1]
        positive = np.bincount(gq[lead], minlength=m).astype(np.int64)
    return max_iou, best, positive


cdef Py_ssize_t _first_valid(double[::1] st, double[:, ::1] aw, double[:, ::1] ah,
                             cnp.int64_t[::1] nx, cnp.int64_t[::1] ny, cnp.int64_t[::1] off,
                             double width, double height, double straddle):
    cdef Py_ssize_t lv, r, i, j, R = aw.shape[1]
    cdef double s, cx, cy, ax0, ay0
    if straddle < 0:
        return 0 if off[st.shape[0]] > 0 else -1
    for lv in range(st.shape[0]):
        s = st[lv]
        for j in range(ny[lv]):
            cy = j * s + s / 2.0
            for i in range(nx[lv]):
                cx = i * s + s / 2.0
                for r in range(R):
                    ax0 = cx - aw[lv, r] / 2.0
                    ay0 = cy - ah[lv, r] / 2.0
                    if (ax0 >= -straddle and ay0 >= -straddle
                            and ax0 + aw[lv, r] <= width + straddle
                            and ay0 + ah[lv, r] <= height + straddle):
                        return off[lv] + (j * nx[lv] + i) * R + r
    return -1
