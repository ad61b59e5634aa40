"""
Brute-force reference implementations.

These functions evaluate the model's formulas literally, one scalar at a
time, with no vectorisation and no shared code with the fast paths in
:mod:`mifcn.tensor_core` and :mod:`mifcn.model`. They exist to be compared
against, by the test-suite and by ``mifcn gradcheck``.

Copyright 2025 The MIFCN Authors
Licensed under the Apache License, Version 2.0
"""

import itertools
import math
from typing import List, Sequence, Tuple

import numpy as np


def conv2d_loop(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, dilation: int) -> np.ndarray:
    """Direct evaluation of (F *_d K)(x) = sum_{a + d*b = x} F(a) K(b).

    Kernel offsets b run over {-r, ..., r}^2 with r = (k - 1) / 2, and F is
    zero outside the image.
    """
    cin, h, w = x.shape
    cout, _, k, _ = kernels.shape
    r = (k - 1) // 2
    out = np.zeros((cout, h, w))
    for i in range(cout):
        for y in range(h):
            for xx in range(w):
                total = bias[i]
                for j in range(cin):
                    for p in range(k):
                        for q in range(k):
                            ay = y - dilation * (p - r)
                            ax = xx - dilation * (q - r)
                            if 0 <= ay < h and 0 <= ax < w:
                                total += x[j, ay, ax] * kernels[i, j, p, q]
                out[i, y, xx] = total
    return out


def lrelu_loop(x: np.ndarray, alpha: float) -> np.ndarray:
    out = np.empty_like(x)
    for idx, value in np.ndenumerate(x):
        out[idx] = value if value > alpha * value else alpha * value
    return out


def layer_stack_loop(
    image: np.ndarray,
    hidden: Sequence[Tuple[np.ndarray, np.ndarray, int]],
    output: Tuple[np.ndarray, np.ndarray],
    alpha: float,
) -> np.ndarray:
    """Compose (conv -> lrelu) layers and a final linear 1x1 layer on [H, W]."""
    features = image[None]
    for kernels, bias, dilation in hidden:
        features = lrelu_loop(conv2d_loop(features, kernels, bias, dilation), alpha)
    kernels, bias = output
    return conv2d_loop(features, kernels, bias, 1)[0]


def fusion_loop(branch_outputs: Sequence[np.ndarray], h: float) -> List[np.ndarray]:
    """Pixel-by-pixel evaluation of D_t, W_t and P_t."""
    main = branch_outputs[0]
    weights = [np.empty_like(main) for _ in branch_outputs]
    for idx in np.ndindex(*main.shape):
        raw = [math.exp(-((main[idx] - out[idx]) ** 2) / h) for out in branch_outputs]
        total = math.fsum(raw)
        for t, value in enumerate(raw):
            weights[t][idx] = value / total
    return weights


def pairwise_mean(values: Sequence[float]) -> float:
    """Mean computed by recursive pairwise summation."""

    def pairwise_sum(items: Sequence[float]) -> float:
        if len(items) <= 2:
            return float(sum(items))
        mid = len(items) // 2
        return pairwise_sum(items[:mid]) + pairwise_sum(items[mid:])

    flat = list(np.asarray(values, dtype=float).reshape(-1))
    return pairwise_sum(flat) / len(flat)


def two_pass_stats(values: np.ndarray) -> Tuple[float, float]:
    """Population mean and standard deviation by the naive two-pass formula."""
    flat = [float(v) for v in np.asarray(values).reshape(-1)]
    mean = sum(flat) / len(flat)
    variance = sum((v - mean) ** 2 for v in flat) / len(flat)
    return mean, math.sqrt(variance)


def wilcoxon_enumeration(differences: Sequence[float]) -> float:
    """Exact two-sided signed-rank p-value by enumerating all 2^n sign patterns.

    Zero differences are dropped; tied magnitudes receive average ranks.
    """
    d = [v for v in differences if v != 0]
    n = len(d)
    order = sorted(range(n), key=lambda i: abs(d[i]))
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and abs(d[order[j + 1]]) == abs(d[order[i]]):
            j += 1
        for m in range(i, j + 1):
            ranks[order[m]] = (i + j) / 2.0 + 1.0
        i = j + 1

    observed = sum(r for r, v in zip(ranks, d) if v > 0)
    low = high = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if w <= observed + 1e-9:
            low += 1
        if w >= observed - 1e-9:
            high += 1
    total = 2**n
    return min(1.0, 2.0 * min(low, high) / total)
