"""Independent reference implementations the tests compare against.

Everything here is deliberately scalar-looped and self-contained so it
shares no code path with the package: same documented conventions
(row-down coordinates, counter-clockwise-positive angles, pixel centers at
integer coordinates), different code.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def brute_force_crop(img: np.ndarray, row0: int, col0: int, a: int, theta: float) -> np.ndarray:
    """Per-pixel rotated resampling: destination (i, j) reads the bilinear
    sample at center + R(theta) (i - (a-1)/2, j - (a-1)/2)."""
    channels = img.shape[2]
    out = np.zeros((a, a, channels))
    cr = row0 + (a - 1) / 2.0
    cc = col0 + (a - 1) / 2.0
    ct, st = math.cos(theta), math.sin(theta)
    for i in range(a):
        for j in range(a):
            dr = i - (a - 1) / 2.0
            dc = j - (a - 1) / 2.0
            sr = cr + ct * dr - st * dc
            sc = cc + st * dr + ct * dc
            r0, c0 = math.floor(sr), math.floor(sc)
            fr, fc = sr - r0, sc - c0
            for ch in range(channels):
                out[i, j, ch] = (
                    img[r0, c0, ch] * (1 - fr) * (1 - fc)
                    + img[r0, c0 + 1, ch] * (1 - fr) * fc
                    + img[r0 + 1, c0, ch] * fr * (1 - fc)
                    + img[r0 + 1, c0 + 1, ch] * fr * fc
                )
    return out


def brute_force_zero_fraction(a: int, theta: float) -> float:
    """Fraction of in-place-rotation destinations whose source leaves the
    a-square (pixel-center span [0, a-1] per axis)."""
    half = (a - 1) / 2.0
    ct, st = math.cos(theta), math.sin(theta)
    zeros = 0
    for i in range(a):
        for j in range(a):
            dr = i - half
            dc = j - half
            sr = ct * dr - st * dc
            sc = st * dr + ct * dc
            if abs(sr) > half or abs(sc) > half:
                zeros += 1
    return zeros / (a * a)


def feasible_starts_by_scan(extent: int, p: int, a: int) -> list[int]:
    """Every multiple of p given sqrt(2)*a/2 clearance, found by scanning."""
    h = math.sqrt(2.0) * a
    margin = (h - a) / 2.0
    return [
        s
        for s in range(0, extent + 1, p)
        if s >= margin and s + a + margin <= extent
    ]


def cost_matrix_by_loops(targets: np.ndarray, preds: np.ndarray) -> np.ndarray:
    n, d = targets.shape
    m = preds.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = targets[i, k] - preds[j, k]
                acc += diff * diff
            out[i, j] = acc / d
    return out


def exact_ot_by_column_permutations(cost: np.ndarray) -> float:
    """Second enumeration route: assign a row to every column instead of a
    column to every row."""
    n = cost.shape[0]
    best = math.inf
    for perm in itertools.permutations(range(n)):
        total = 0.0
        for j in range(n):
            total += cost[perm[j], j]
        best = min(best, total / n)
    return best


def masked_mse_by_loops(preds: np.ndarray, targets: np.ndarray, indices) -> float:
    """Mean over the given patches and all their elements."""
    if len(indices) == 0:
        return 0.0
    acc = 0.0
    count = 0
    for k in indices:
        for v, t in zip(preds[k], targets[k]):
            acc += (v - t) ** 2
            count += 1
    return acc / count
