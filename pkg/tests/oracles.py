"""Independent brute-force oracles.

Everything here reimplements a contract from scratch, deliberately avoiding
the production code paths: two-pass loops instead of vectorized numpy, edge
comparisons instead of index arithmetic, shapely polygons instead of interval
clamps, permutation enumeration instead of scipy. Oracles only ever feed
expected values; they are never imported by src/.
"""

from __future__ import annotations

import itertools
import math

from shapely.geometry import box as shapely_box


def two_pass_variance(values, sample=False):
    """Textbook two-pass mean/variance."""
    n = len(values)
    mean = sum(values) / n
    acc = 0.0
    for v in values:
        acc += (v - mean) ** 2
    return acc / (n - 1 if sample else n)


def binned_error(pairs, n_bins):
    """Two-loop binned calibration error over (confidence, outcome) pairs.

    Walks every bin and every sample, membership decided by the edge
    comparisons lo <= c < hi (last bin closed at 1). Returns the weighted
    error and the per-bin (count, mean_conf, mean_outcome) rows.
    """
    total = len(pairs)
    error = 0.0
    rows = []
    for b in range(n_bins):
        lo = b / n_bins
        hi = (b + 1) / n_bins
        members = []
        for conf, outcome in pairs:
            if b == n_bins - 1:
                inside = lo <= conf <= 1.0
            else:
                inside = lo <= conf < hi
            if inside:
                members.append((conf, outcome))
        if not members:
            rows.append((0, None, None))
            continue
        mean_conf = sum(c for c, _ in members) / len(members)
        mean_out = sum(o for _, o in members) / len(members)
        rows.append((len(members), mean_conf, mean_out))
        error += (len(members) / total) * abs(mean_out - mean_conf)
    return error, rows


def iou_shapely(a, b):
    """IoU via exact polygon intersection (a, b are (x, y, w, h) tuples)."""
    pa = shapely_box(a[0], a[1], a[0] + a[2], a[1] + a[3])
    pb = shapely_box(b[0], b[1], b[0] + b[2], b[1] + b[3])
    union = pa.union(pb).area
    if union == 0.0:
        return 0.0
    return pa.intersection(pb).area / union


def greedy_match_replay(dets, gts, k):
    """Re-derivation of the matcher outcome, scanning all pairs each step.

    dets: list of (image_id, category, (x, y, w, h), score);
    gts: list of (image_id, category, (x, y, w, h)). Returns the list of f
    bits in detection input order. IoU comes from shapely, selection from an
    explicit full scan: highest score first (input order on ties), best
    positive-IoU unconsumed same-image ground truth (lowest index on ties),
    consumption only on a true positive.
    """
    f_bits = [0] * len(dets)
    consumed = set()
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][3], i))
    for i in order:
        img, cat, abox, _score = dets[i]
        best_j, best_iou = None, 0.0
        for j, (gimg, gcat, gbox) in enumerate(gts):
            if gimg != img or j in consumed:
                continue
            v = iou_shapely(abox, gbox)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j is not None and best_iou >= k and cat == gts[best_j][1]:
            consumed.add(best_j)
            f_bits[i] = 1
    return f_bits


def brute_force_assignment(cost):
    """Optimal assignment of min(n, m) pairs by enumerating permutations."""
    n = len(cost)
    m = len(cost[0])
    best_cost = math.inf
    best_pairs = None
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            total = sum(cost[i][perm[i]] for i in range(n))
            if total < best_cost:
                best_cost = total
                best_pairs = sorted((i, perm[i]) for i in range(n))
    else:
        for perm in itertools.permutations(range(n), m):
            total = sum(cost[perm[j]][j] for j in range(m))
            if total < best_cost:
                best_cost = total
                best_pairs = sorted((perm[j], j) for j in range(m))
    return best_cost, best_pairs


def central_difference_grad(f, x, eps=1e-5):
    """Central finite differences of scalar f at flat numpy-like array x."""
    import numpy as np

    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = f(x)
        xf[i] = orig - eps
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def grad_relative_error(analytic, numeric):
    """Max elementwise |a - n| / max(|a|, |n|, 1)."""
    import numpy as np

    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom))


def nll_grid_search(logits, labels, mode, grid):
    """Exhaustive NLL scan; returns the best temperature on the grid."""
    best_t, best_nll = None, math.inf
    for t in grid:
        nll = reference_nll(logits, labels, t, mode)
        if nll < best_nll:
            best_nll, best_t = nll, t
    return best_t


def reference_nll(logits, labels, temperature, mode):
    total = 0.0
    for row, label in zip(logits, labels):
        z = [v / temperature for v in row]
        if mode == "softmax-NLL":
            mx = max(z)
            logz = mx + math.log(sum(math.exp(v - mx) for v in z))
            total += logz - z[label]
        elif mode == "sigmoid-NLL":
            for c, v in enumerate(z):
                t = 1.0 if c == label else 0.0
                # -[t log p + (1-t) log(1-p)] via stable softplus
                softplus_neg = max(-v, 0.0) + math.log1p(math.exp(-abs(v)))
                softplus_pos = max(v, 0.0) + math.log1p(math.exp(-abs(v)))
                total += t * softplus_neg + (1.0 - t) * softplus_pos
        else:
            raise ValueError(mode)
    return total
