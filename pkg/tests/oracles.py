"""Slow, loop-based reference computations used to check the vectorized code.

Nothing here imports the implementation it checks.
"""

import math


def filtered_mean_std(values, lo=-40.0, hi=20.0, window=True):
    kept = [float(v) for v in values
            if math.isfinite(v) and (not window or lo <= v <= hi)]
    n = len(kept)
    mean = sum(kept) / n
    var = sum((v - mean) ** 2 for v in kept) / n
    return mean, math.sqrt(var), n


def confusion_loops(pred, truth):
    tp = fp = fn = tn = 0
    for i in range(len(pred)):
        for j in range(len(pred[0])):
            p, t = bool(pred[i][j]), bool(truth[i][j])
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def weighted_bce_loop(pred, target, w_p=3.0, eps=1e-7):
    total, n = 0.0, 0
    for p_row, y_row in zip(pred, target):
        for p, y in zip(p_row, y_row):
            p = min(max(float(p), eps), 1 - eps)
            total += -w_p * y * math.log(p) - (1 - y) * math.log(1 - p)
            n += 1
    return total / n


def _pr(scores, labels, t):
    tp = fp = fn = 0
    for s, y in zip(scores, labels):
        if s >= t:
            if y:
                tp += 1
            else:
                fp += 1
        elif y:
            fn += 1
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, tp, fp, fn


def exhaustive_sweep(scores, labels, beta):
    """(threshold, f) maximizing F-beta over all unique scores; ties -> higher threshold."""
    b2 = beta * beta
    best_t, best_f = None, -1.0
    for t in sorted(set(float(s) for s in scores)):
        p, r, *_ = _pr(scores, labels, t)
        den = b2 * p + r
        f = (1 + b2) * p * r / den if den > 0 else 0.0
        if f >= best_f:
            best_t, best_f = t, f
    return best_t, best_f


def f_at(scores, labels, t, beta):
    p, r, *_ = _pr(scores, labels, t)
    b2 = beta * beta
    den = b2 * p + r
    return (1 + b2) * p * r / den if den > 0 else 0.0


def average_precision_enum(scores, labels):
    n_pos = sum(1 for y in labels if y)
    ap, prev_r = 0.0, 0.0
    for t in sorted(set(float(s) for s in scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        p = tp / (tp + fp)
        r = tp / n_pos
        ap += (r - prev_r) * p
        prev_r = r
    return ap


def blend_bruteforce(tiles, origins, height, width, mode, size, sigma=None, border=0):
    """Per-pixel reduction over every tile covering the pixel, written as plain loops."""
    c = (size - 1) / 2.0
    out = [[None] * width for _ in range(height)]
    for y in range(height):
        for x in range(width):
            vals, weights, writers = [], [], []
            for tile, (r0, c0) in zip(tiles, origins):
                if not (r0 <= y < r0 + size and c0 <= x < c0 + size):
                    continue
                ty, tx = y - r0, x - c0
                v = float(tile[ty][tx])
                vals.append(v)
                d2 = (ty - c) ** 2 + (tx - c) ** 2
                if mode == "gaussian":
                    weights.append(max(math.exp(-d2 / (2 * sigma * sigma)), 1e-6))
                if mode in ("center_crop", "none"):
                    b = 0 if mode == "none" else border
                    lo_y = 0 if r0 == 0 else b
                    hi_y = size if r0 + size == height else size - b
                    lo_x = 0 if c0 == 0 else b
                    hi_x = size if c0 + size == width else size - b
                    if lo_y <= ty < hi_y and lo_x <= tx < hi_x:
                        writers.append((d2, r0, c0, v))
            if mode == "mean":
                out[y][x] = sum(vals) / len(vals)
            elif mode == "max":
                out[y][x] = max(vals)
            elif mode == "min":
                out[y][x] = min(vals)
            elif mode == "gaussian":
                out[y][x] = sum(w * v for w, v in zip(weights, vals)) / sum(weights)
            else:
                out[y][x] = min(writers)[3] if writers else None
    return out


def blend_materialized(tiles, origins, height, width, mode, size, sigma=None, border=0):
    """Stack every tile into a (n, H, W) array padded with NaN and reduce along axis 0."""
    import numpy as np

    n = len(tiles)
    stack = np.full((n, height, width), np.nan)
    for k, (t, (r, c)) in enumerate(zip(tiles, origins)):
        stack[k, r:r + size, c:c + size] = t
    covered = ~np.isnan(stack)
    if mode == "mean":
        return np.nanmean(stack, axis=0)
    if mode == "max":
        return np.nanmax(stack, axis=0)
    if mode == "min":
        return np.nanmin(stack, axis=0)
    ctr = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy - ctr) ** 2 + (xx - ctr) ** 2
    if mode == "gaussian":
        w = np.zeros_like(stack)
        for k, (r, c) in enumerate(origins):
            w[k, r:r + size, c:c + size] = np.maximum(np.exp(-d2 / (2 * sigma * sigma)), 1e-6)
        return np.nansum(stack * w, axis=0) / w.sum(axis=0)
    # crop / none: the writer closest to its own tile centre wins, then the smaller origin
    b = 0 if mode == "none" else border
    dist = np.full_like(stack, np.inf)
    for k, (r, c) in enumerate(origins):
        sub = np.full((size, size), np.inf)
        top, left = (0 if r == 0 else b), (0 if c == 0 else b)
        bottom = size if r + size == height else size - b
        right = size if c + size == width else size - b
        sub[top:bottom, left:right] = d2[top:bottom, left:right]
        dist[k, r:r + size, c:c + size] = sub
    order = sorted(range(n), key=lambda k: tuple(origins[k]))
    dist, stack = dist[order], stack[order]
    pick = np.argmin(dist, axis=0)
    out = np.take_along_axis(stack, pick[None], axis=0)[0]
    out[~np.isfinite(np.min(dist, axis=0))] = np.nan
    assert covered.any(axis=0).all()
    return out


def sweep_vectorized(scores, labels, beta):
    """Exhaustive sweep evaluating every unique threshold at once with a dense comparison matrix."""
    import numpy as np

    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    ts = np.unique(s)
    above = s[None, :] >= ts[:, None]
    tp = (above & y).sum(axis=1)
    fp = (above & ~y).sum(axis=1)
    fn = y.sum() - tp
    best_t, best_f = None, -1.0
    b2 = beta * beta
    for t, a, b, c in zip(ts.tolist(), tp.tolist(), fp.tolist(), fn.tolist()):
        p = a / (a + b) if a + b else 0.0
        r = a / (a + c) if a + c else 0.0
        den = b2 * p + r
        f = (1 + b2) * p * r / den if den > 0 else 0.0
        if f >= best_f:
            best_t, best_f = t, f
    return best_t, best_f
