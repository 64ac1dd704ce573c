"""Slow, loop-based reference evaluators used to cross-check the vectorised code."""

from __future__ import annotations

import itertools
import math

import numpy as np


def mean_under(mask, values):
    total, count = 0.0, 0
    for (i, j), on in np.ndenumerate(mask):
        if on:
            total += float(values[i, j])
            count += 1
    return total / count


def select_fg_bg(masks, attribution):
    """(fg index, bg index) by highest / lowest mean; first index wins ties; empty masks skipped."""
    best_fg = best_bg = None
    for i, m in enumerate(masks):
        if not np.any(m):
            continue
        v = mean_under(m, attribution)
        if best_fg is None or v > best_fg[1]:
            best_fg = (i, v)
        if best_bg is None or v < best_bg[1]:
            best_bg = (i, v)
    return best_fg[0], best_bg[0]


def masked_mean(features, mask):
    h, w, d = features.shape
    acc = [0.0] * d
    m = 0
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                m += 1
                for k in range(d):
                    acc[k] += float(features[i, j, k])
    return [a / m for a in acc], m


def weighted_mean(vectors, weights):
    d = len(vectors[0])
    total = sum(weights)
    return [sum(w * float(v[k]) for v, w in zip(vectors, weights)) / total for k in range(d)]


def cosine(x, y):
    dot = sum(float(a) * float(b) for a, b in zip(x, y))
    nx = math.sqrt(sum(float(a) ** 2 for a in x))
    ny = math.sqrt(sum(float(b) ** 2 for b in y))
    if nx == 0 or ny == 0:
        return 0.0
    return dot / (nx * ny)


def segment(features, pools):
    """Per-pixel labels and scores.

    ``pools`` is an ordered list of (label, [prototype vectors]); the first
    entry is the background. Empty pools never win; the first maximum wins.
    """
    h, w, _ = features.shape
    labels = np.zeros((h, w), dtype=np.int64)
    scores = np.full((len(pools), h, w), -np.inf)
    for i in range(h):
        for j in range(w):
            best, best_label = -math.inf, None
            for ci, (label, vecs) in enumerate(pools):
                if not vecs:
                    continue
                s = max(cosine(features[i, j], v) for v in vecs)
                scores[ci, i, j] = s
                if s > best:
                    best, best_label = s, label
            labels[i, j] = best_label
    return labels, scores


def tile_offsets(length, window, stride):
    if length <= window:
        return [0]
    offs = []
    x = 0
    while x + window <= length:
        offs.append(x)
        x += stride
    if offs[-1] + window != length:
        offs.append(length - window)
    return offs


def tile_mean(shape, windows, stride, score_fn):
    """Average of per-tile score maps over every covering tile, enumerated tile by tile."""
    h, w = shape
    total = None
    count = np.zeros((h, w))
    for size in windows:
        for y in tile_offsets(h, size, stride):
            for x in tile_offsets(w, size, stride):
                wh, ww = min(size, h), min(size, w)
                s = score_fn(y, x, wh, ww)
                if total is None:
                    total = np.zeros((s.shape[0], h, w))
                for yy in range(wh):
                    for xx in range(ww):
                        total[:, y + yy, x + xx] += s[:, yy, xx]
                        count[y + yy, x + xx] += 1
    return total / count, count


def prefilter(single_scores, combo_score_fn, eta):
    """Exhaustive pre-filter: softmax > 1/|C|, top-eta, best non-empty subset."""
    n = len(single_scores)
    if n == 1:
        return [0]
    z = [math.exp(s - max(single_scores)) for s in single_scores]
    probs = [v / sum(z) for v in z]
    surv = [i for i in range(n) if probs[i] > 1.0 / n]
    if not surv:
        top = max(probs)
        surv = [i for i in range(n) if probs[i] == top]
    surv = sorted(sorted(surv, key=lambda i: (-probs[i], i))[:eta])
    best, best_subset = -math.inf, None
    for r in range(1, len(surv) + 1):
        for subset in itertools.combinations(surv, r):
            s = combo_score_fn(subset)
            key = sum(1 << surv.index(i) for i in subset)
            if s > best or (s == best and key < best_key):
                best, best_subset, best_key = s, subset, key
    return sorted(best_subset)


def iou_per_class(preds, gts, num_classes, ignore=None):
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    for p_img, g_img in zip(preds, gts):
        for p, g in zip(np.ravel(p_img), np.ravel(g_img)):
            if ignore is not None and g == ignore:
                continue
            if p == g:
                tp[g] += 1
            else:
                fp[p] += 1
                fn[g] += 1
    return {c: tp[c] / (tp[c] + fp[c] + fn[c]) for c in range(num_classes) if tp[c] + fp[c] + fn[c] > 0}
