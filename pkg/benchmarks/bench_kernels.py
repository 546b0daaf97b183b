"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on COCO-sized inputs (640x480 frames, a handful of
objects). Both backends receive identical inputs and their outputs are
checked for equality before timing.
"""

import argparse
import timeit

import numpy as np

from smallaug import _backend
from smallaug.anchors import AnchorConfig


def _cases(rng):
    h, w = 480, 640
    t = np.linspace(0, 2 * np.pi, 60, endpoint=False)
    r = 150 + 40 * np.sin(5 * t)
    xs, ys = 320 + r * np.cos(t), 240 + r * np.sin(t)
    mask = np.zeros((h, w), np.uint8)
    _backend.python_kernels.fill_polygon(mask, xs, ys)
    counts = _backend.python_kernels.rle_encode(mask)
    text = _backend.python_kernels.counts_to_string(counts)
    cfg = AnchorConfig()
    aw, ah = cfg.anchor_dims()
    strides = np.asarray(cfg.strides, dtype=np.float64)
    side = np.exp(rng.uniform(np.log(6), np.log(300), 7))
    gts = np.column_stack([rng.uniform(0, w - side), rng.uniform(0, h - side), side, side * rng.uniform(0.5, 1.5, 7)])
    return {
        "fill_polygon 60 vertices": lambda k: k.fill_polygon(np.zeros((h, w), np.uint8), xs, ys),
        "rle_encode 640x480": lambda k: k.rle_encode(mask),
        "rle_decode 640x480": lambda k: k.rle_decode(counts, h, w),
        "counts_to_string": lambda k: k.counts_to_string(counts),
        "string_to_counts": lambda k: k.string_to_counts(text),
        "match_grid 7 objects": lambda k: k.match_grid(gts, float(w), float(h), strides, aw, ah, 0.7, -1.0),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _backend.compiled_kernels is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    py, cy = _backend.python_kernels, _backend.compiled_kernels
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in _cases(rng).items():
        if name.startswith("rle_") and cy.rle_encode is py.rle_encode:
            tp = min(timeit.repeat(lambda: fn(py), number=3, repeat=args.repeat)) / 3
            print(f"{name:28s} {tp * 1e3:10.3f} {'(shared)':>10s}")
            continue
        assert _same(fn(py), fn(cy)), f"{name}: backends disagree"
        number = 3
        tp = min(timeit.repeat(lambda: fn(py), number=number, repeat=args.repeat)) / number
        tc = min(timeit.repeat(lambda: fn(cy), number=number, repeat=args.repeat)) / number
        print(f"{name:28s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
