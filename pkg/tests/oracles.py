"""Independent reference implementations used as test oracles.

Each one recomputes a result by a different route than the library: plain
loops, exhaustive enumeration, or a textbook algorithm, so that agreement is
evidence rather than tautology.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


# ----------------------------------------------------------------- linear algebra


def jacobi_eigh(A, tol=1e-15, max_sweeps=100):
    """Cyclic Jacobi eigenvalue algorithm for a symmetric matrix.

    Returns (eigenvalues ascending, eigenvectors as columns).
    """
    A = np.array(A, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    scale = np.linalg.norm(A)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * max(scale, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if A[p, q] == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = s, -s
                A = J.T @ A @ J
                V = V @ J
    evals = np.diag(A).copy()
    order = np.argsort(evals)
    return evals[order], V[:, order]


def population_covariance_loops(X):
    """B x B covariance of (P, B) observations by explicit double loop."""
    P, B = X.shape
    mu = [sum(X[:, b]) / P for b in range(B)]
    C = np.zeros((B, B))
    for i in range(B):
        for j in range(B):
            C[i, j] = sum((X[p, i] - mu[i]) * (X[p, j] - mu[j]) for p in range(P)) / P
    return C


# ---------------------------------------------------------------- band selection


def residual(xb, xr):
    """min_w ||xb - w xr||^2 by the closed form (the definition under test)."""
    nr = np.dot(xr, xr)
    if nr == 0.0:
        return float(np.dot(xb, xb))
    w = np.dot(xb, xr) / nr
    d = xb - w * xr
    return float(np.dot(d, d))


def exhaustive_band_selection(planes, k):
    """Enumerate every contiguous k-partition and every representative choice.

    Objective is accumulated segment by segment, band by band, left to
    right. Strictly smaller wins, so iteration order (lexicographic over
    boundaries, then representatives) implements the tie rule.
    """
    B = planes.shape[0]
    X = planes.reshape(B, -1).astype(np.float64)
    R = {}
    best = (math.inf, None, None)
    for cuts in itertools.combinations(range(1, B), k - 1):
        bounds = (0,) + cuts + (B,)
        segs = list(zip(bounds, bounds[1:]))
        for reps in itertools.product(*[range(s, e) for s, e in segs]):
            total = 0.0
            for (s, e), r in zip(segs, reps):
                seg = 0.0
                for b in range(s, e):
                    if (b, r) not in R:
                        R[b, r] = residual(X[b], X[r])
                    seg += R[b, r]
                total += seg
            if total < best[0]:
                best = (total, bounds, reps)
    return best


# ------------------------------------------------------------------- quantiles


def sorted_quantile(values, q):
    """Linear-interpolated quantile from a sorted copy (position q*(n-1))."""
    v = sorted(float(x) for x in np.ravel(values))
    pos = q * (len(v) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    frac = pos - lo
    if frac == 0.0:
        return v[lo]
    return v[lo] + (v[hi] - v[lo]) * frac


def stretch_oracle(plane, lo_q, hi_q):
    lo, hi = sorted_quantile(plane, lo_q), sorted_quantile(plane, hi_q)
    out = np.zeros(plane.shape, dtype=np.uint8)
    if hi <= lo:
        return out
    for idx, x in np.ndenumerate(plane):
        t = min(max((float(x) - lo) / (hi - lo), 0.0), 1.0)
        out[idx] = math.floor(t * 255.0 + 0.5)
    return out


# --------------------------------------------------------------------- conv


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    N, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    xp = np.zeros((N, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, Co, Ho, Wo))
    for n in range(N):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(Ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def depthwise_loops(x, w, stride=1, padding=0):
    N, C, H, W = x.shape
    _, kh, kw = w.shape
    xp = np.zeros((N, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, C, Ho, Wo))
    for n in range(N):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    out[n, c, i, j] = sum(
                        xp[n, c, i * stride + u, j * stride + v] * w[c, u, v] for u in range(kh) for v in range(kw)
                    )
    return out


# ---------------------------------------------------------------------- boxes


def iou_exact(a, b):
    """IoU as an exact rational for boxes with rational (e.g. integer) corners."""
    a = [Fraction(v) for v in a]
    b = [Fraction(v) for v in b]
    area_a = max(Fraction(0), a[2] - a[0]) * max(Fraction(0), a[3] - a[1])
    area_b = max(Fraction(0), b[2] - b[0]) * max(Fraction(0), b[3] - b[1])
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if area_a == 0 or area_b == 0 or iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_raster(a, b):
    """IoU of integer boxes by counting unit cells."""
    cells_a = {(x, y) for x in range(a[0], a[2]) for y in range(a[1], a[3])}
    cells_b = {(x, y) for x in range(b[0], b[2]) for y in range(b[1], b[3])}
    union = cells_a | cells_b
    return Fraction(len(cells_a & cells_b), len(union)) if union else Fraction(0)


def iou_float(a, b):
    """Straight float IoU with the same arithmetic order as the library."""
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if area_a <= 0 or area_b <= 0 or iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def nms_quadratic(dets, thr):
    """Keep a box unless an already-kept same-class box overlaps it by more than thr."""
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, dets[k].box[0], dets[k].box[1], k))
    kept = []
    for k in order:
        if all(dets[j].class_id != dets[k].class_id or iou_float(dets[j].box, dets[k].box) <= thr for j in kept):
            kept.append(k)
    return kept


def ap_bruteforce(dets, gts_by_image, thr):
    """Greedy matching by plain loops, then the all-points envelope.

    The area is summed with math.fsum so the result does not depend on
    summation order.
    """
    order = sorted(dets, key=lambda d: (-d.score, d.image_id, d.box[0]))
    n_gt = sum(len(v) for v in gts_by_image.values())
    if n_gt == 0 or not order:
        return 0.0
    used = {img: [False] * len(v) for img, v in gts_by_image.items()}
    flags = []
    for d in order:
        best, best_j = -1.0, None
        for j, g in enumerate(gts_by_image.get(d.image_id, [])):
            if used[d.image_id][j]:
                continue
            o = iou_float(d.box, g)
            if o >= thr and o > best:
                best, best_j = o, j
        if best_j is not None:
            used[d.image_id][best_j] = True
        flags.append(best_j is not None)
    tp = 0
    recalls, precisions = [], []
    for k, f in enumerate(flags):
        tp += f
        recalls.append(tp / n_gt)
        precisions.append(tp / (k + 1))
    terms, prev = [], 0.0
    for i, r in enumerate(recalls):
        if r != prev:
            terms.append((r - prev) * max(precisions[i:]))
            prev = r
    return math.fsum(terms)


# ------------------------------------------------------------------------ SSA


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def ssa_dense(a, e, cfg, p):
    """Whole SSA block in dense numpy, with the 2d-channel weights assembled
    from their per-stream halves (concatenation, joint key set, full MLP)."""
    P = {k: v.data for k, v in p.items()}
    N, n, d = a.shape
    out_a, out_e = np.zeros_like(a), np.zeros_like(e)
    W1 = np.concatenate([P["sam_w1_a"], P["sam_w1_e"]], axis=0)
    W2 = np.concatenate([P["sam_w2_a"], P["sam_w2_e"]], axis=1)
    b2 = np.concatenate([P["sam_b2_a"], P["sam_b2_e"]])
    Sa = np.concatenate([P["split_a_from_a"], P["split_a_from_e"]], axis=1)  # (d, 2d)
    Se = np.concatenate([P["split_e_from_a"], P["split_e_from_e"]], axis=1)
    r, h, w, m = cfg.r, cfg.h, cfg.w, cfg.m
    for s in range(N):
        f = np.stack([a[s], e[s]], axis=-1)  # (n, d, 2)
        keys, vals = [], []
        for t in range(2):
            for W, dw, bucket in ((P["W_K"], P["dw_K"], keys), (P["W_V"], P["dw_V"], vals)):
                proj = (f[:, :, t] @ W).reshape(h, w, -1)
                red = np.zeros((h // r, w // r, proj.shape[-1]))
                for i in range(h // r):
                    for j in range(w // r):
                        for c in range(proj.shape[-1]):
                            red[i, j, c] = np.sum(proj[i * r:(i + 1) * r, j * r:(j + 1) * r, c] * dw[c])
                bucket.append(red.reshape(m, -1))
        K = np.concatenate(keys, axis=0)
        V = np.concatenate(vals, axis=0)
        bars = []
        for x, WQ in ((a[s], P["W_Q_a"]), (e[s], P["W_Q_e"])):
            z = (x @ WQ) @ K.T / math.sqrt(cfg.d_k)
            z = np.exp(z - z.max(axis=1, keepdims=True))
            att = z / z.sum(axis=1, keepdims=True)
            xt = x + att @ V
            hid = np.maximum(xt @ P["ffn_w1"] + P["ffn_b1"], 0.0)
            bars.append(xt + hid @ P["ffn_w2"] + P["ffn_b2"])
        F = np.concatenate(bars, axis=1)  # (n, 2d)
        mlp = lambda v: np.maximum(v @ W1 + P["sam_b1"], 0.0) @ W2 + b2  # noqa: E731
        Mc = _sigmoid(mlp(F.mean(axis=0)) + mlp(F.max(axis=0)))
        Fc = F * Mc
        maps = np.stack([Fc.mean(axis=1).reshape(h, w), Fc.max(axis=1).reshape(h, w)])
        k = cfg.sam_kernel
        pad = np.zeros((2, h + k - 1, w + k - 1))
        pad[:, k // 2:k // 2 + h, k // 2:k // 2 + w] = maps
        logit = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                logit[i, j] = np.sum(pad[:, i:i + k, j:j + k] * P["sam_conv_w"][0]) + P["sam_conv_b"][0]
        Fs = Fc * _sigmoid(logit.reshape(n, 1))
        out_a[s] = Fs @ Sa.T
        out_e[s] = Fs @ Se.T
    return out_a, out_e
