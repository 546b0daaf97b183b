"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
The anchor matcher deliberately uses a different algorithm (dense IoU
matrix) from the compiled windowed search so the two can check each other.
"""

import numpy as np


def fill_polygon(mask, xs, ys):
    """OR the even-odd interior of one polygon into ``mask`` (uint8, h x w).

    A pixel is inside when its center ``(x + 0.5, y + 0.5)`` has an odd number
    of edge crossings strictly to its right.
    """
    h, w = mask.shape
    n = len(xs)
    if n < 3 or h == 0 or w == 0:
        return
    x0 = np.asarray(xs, dtype=np.float64)
    y0 = np.asarray(ys, dtype=np.float64)
    x1 = np.roll(x0, -1)
    y1 = np.roll(y0, -1)
    ymin = max(int(np.floor(y0.min() - 0.5)), 0)
    ymax = min(int(np.ceil(y0.max() + 0.5)), h)
    xc = np.arange(w, dtype=np.float64) + 0.5
    for row in range(ymin, ymax):
        yc = row + 0.5
        hit = (y0 > yc) != (y1 > yc)
        if not hit.any():
            continue
        ax, ay, bx, by = x0[hit], y0[hit], x1[hit], y1[hit]
        xint = (bx - ax) * (yc - ay) / (by - ay) + ax
        crossings = (xc[:, None] < xint[None, :]).sum(axis=1)
        mask[row] |= (crossings & 1).astype(np.uint8)


def rle_encode(mask):
    """Column-major run lengths of a 2-D 0/1 array, starting with a zero run."""
    flat = np.asarray(mask, dtype=np.uint8).ravel(order="F")
    n = flat.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [n]))
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.int64)


def rle_decode(counts, h, w):
    counts = np.asarray(counts, dtype=np.int64)
    values = np.zeros(len(counts), dtype=np.uint8)
    values[1::2] = 1
    flat = np.repeat(values, counts)
    return flat.reshape((w, h)).T.copy()


def counts_to_string(counts):
    """COCO's 6-bit char compression of a run list (delta vs. run i-2 for i > 2)."""
    out = bytearray()
    for i, c in enumerate(counts):
        x = int(c)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            ch = x & 0x1F
            x >>= 5
            more = (x != -1) if (ch & 0x10) else (x != 0)
            if more:
                ch |= 0x20
            out.append(ch + 48)
    return out.decode("ascii")


def string_to_counts(s):
    data = s.encode("ascii") if isinstance(s, str) else bytes(s)
    counts = []
    p = 0
    n = len(data)
    while p < n:
        x = 0
        k = 0
        more = True
        while more:
            if p >= n:
                raise ValueError("truncated RLE string")
            ch = data[p] - 48
            x |= (ch & 0x1F) << (5 * k)
            more = bool(ch & 0x20)
            p += 1
            k += 1
            if not more and (ch & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return np.asarray(counts, dtype=np.int64)


def _iou_matrix(boxes, gts):
    ax0, ay0 = boxes[:, 0:1], boxes[:, 1:2]
    ax1, ay1 = ax0 + boxes[:, 2:3], ay0 + boxes[:, 3:4]
    gx0, gy0 = gts[None, :, 0], gts[None, :, 1]
    gx1, gy1 = gx0 + gts[None, :, 2], gy0 + gts[None, :, 3]
    iw = np.clip(np.minimum(ax1, gx1) - np.maximum(ax0, gx0), 0.0, None)
    ih = np.clip(np.minimum(ay1, gy1) - np.maximum(ay0, gy0), 0.0, None)
    inter = iw * ih
    union = boxes[:, 2:3] * boxes[:, 3:4] + gts[None, :, 2] * gts[None, :, 3] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def match_grid(gts, width, height, strides, anchor_w, anchor_h, threshold, straddle):
    """Match ground-truth boxes against an implicit anchor grid.

    Args:
        gts: (M, 4) float64 xywh boxes, ordered by tie-break priority.
        width, height: image size in (possibly resized) pixels.
        strides: (L,) float64 per-level strides.
        anchor_w, anchor_h: (L, R) float64 anchor dims per level and ratio.
        threshold: IoU must be strictly greater to count as positive.
        straddle: anchors reaching further than this outside the image are
            ignored; negative disables the filter.

    Returns:
        ``(max_iou, best_anchor, positive)`` arrays of length M. ``positive``
        counts above-threshold anchors attributed to each gt (each anchor goes
        to its highest-IoU gt, lowest index on ties). ``best_anchor`` is the
        lowest-index anchor achieving ``max_iou`` (-1 if no anchor is usable).
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    m = len(gts)
    boxes = _grid_anchors(width, height, strides, anchor_w, anchor_h)
    valid = np.ones(len(boxes), dtype=bool)
    if straddle >= 0:
        valid = (
            (boxes[:, 0] >= -straddle)
            & (boxes[:, 1] >= -straddle)
            & (boxes[:, 0] + boxes[:, 2] <= width + straddle)
            & (boxes[:, 1] + boxes[:, 3] <= height + straddle)
        )
    max_iou = np.zeros(m, dtype=np.float64)
    best = np.full(m, -1, dtype=np.int64)
    positive = np.zeros(m, dtype=np.int64)
    if m == 0 or not valid.any():
        return max_iou, best, positive
    idx = np.flatnonzero(valid)
    iou = _iou_matrix(boxes[idx], gts)
    max_iou = iou.max(axis=0)
    best = idx[iou.argmax(axis=0)]
    above = iou > threshold
    rows = np.flatnonzero(above.any(axis=1))
    if rows.size:
        owner = iou[rows].argmax(axis=1)
        positive = np.bincount(owner, minlength=m).astype(np.int64)
    return max_iou, best.astype(np.int64), positive


def _grid_anchors(width, height, strides, anchor_w, anchor_h):
    parts = []
    for level, stride in enumerate(strides):
        nx = int(np.ceil(width / stride))
        ny = int(np.ceil(height / stride))
        cx = np.arange(nx) * stride + stride / 2.0
        cy = np.arange(ny) * stride + stride / 2.0
        aw = np.asarray(anchor_w[level], dtype=np.float64)
        ah = np.asarray(anchor_h[level], dtype=np.float64)
        gy, gx, gw = np.meshgrid(cy, cx, aw, indexing="ij")
        _, _, gh = np.meshgrid(cy, cx, ah, indexing="ij")
        lvl = np.stack([gx - gw / 2.0, gy - gh / 2.0, gw, gh], axis=-1)
        parts.append(lvl.reshape(-1, 4))
    if not parts:
        return np.zeros((0, 4), dtype=np.float64)
    return np.concatenate(parts, axis=0)
