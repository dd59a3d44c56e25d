"""Hyperspectral information decoupling.

Turns a cube into two 3-channel 8-bit images: a spectral-aggregated one
(PCA scores) and a spatial-aggregated one (three selected bands, contrast
stretched).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cube_io import AggregatedImage, HyperCube, Role


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def bands(self):
        return self.mean.shape[0]

    @property
    def k(self):
        return self.components.shape[0]


@dataclass(frozen=True)
class BandSelection:
    segment_boundaries: tuple
    representatives: tuple
    objective_value: float


@dataclass(frozen=True)
class GenerationParams:
    low_percentile: float = 0.02
    high_percentile: float = 0.98
    per_channel: bool = True

    def __post_init__(self):
        if not (0.0 <= self.low_percentile < 0.5 < self.high_percentile <= 1.0):
            raise ValueError(
                f"need 0 <= low < 0.5 < high <= 1, got ({self.low_percentile}, {self.high_percentile})"
            )


def _round_half_up(x):
    return np.floor(x + 0.5)


def _minmax_u8(channel):
    lo, hi = channel.min(), channel.max()
    if hi <= lo:
        return np.zeros(channel.shape, dtype=np.uint8)
    return _round_half_up((channel - lo) / (hi - lo) * 255.0).astype(np.uint8)


# ------------------------------------------------------------------------- PCA


def covariance(cube):
    """Population covariance (divide by pixel count) of the pixel spectra."""
    X = cube.pixels()
    mu = X.mean(axis=0)
    Xc = X - mu
    return mu, Xc.T @ Xc / X.shape[0]


def fit_pca(cube, k):
    if not 1 <= k <= cube.bands:
        raise ValueError(f"k must be in [1, {cube.bands}], got {k}")
    if cube.height * cube.width < k:
        raise ValueError(f"need at least {k} pixels to fit {k} components")
    mu, C = covariance(cube)
    evals, evecs = np.linalg.eigh(C)
    order = np.argsort(evals, kind="stable")[::-1][:k]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mu, comps, evals)


def pca_scores(cube, model):
    if model.bands != cube.bands:
        raise ValueError(f"model has {model.bands} bands, cube has {cube.bands}")
    return (cube.pixels() - model.mean) @ model.components.T


def project_pca(cube, model):
    """Spectral-aggregated image: per-channel min-max scaled PCA scores."""
    if model.k != 3:
        raise ValueError(f"projection to an image needs exactly 3 components, model has {model.k}")
    scores = pca_scores(cube, model).reshape(cube.height, cube.width, 3)
    out = np.stack([_minmax_u8(scores[..., c]) for c in range(3)], axis=-1)
    prov = "pca k=3 explained_variance=" + ",".join(f"{v:.6g}" for v in model.explained_variance)
    return AggregatedImage(out, Role.SPECTRAL, prov)


# -------------------------------------------------------------- band selection


def reconstruction_residuals(cube):
    """R[b, r] = min_w ||x_b - w x_r||^2 over raw band planes."""
    X = cube.data.reshape(cube.bands, -1).astype(np.float64)
    B = X.shape[0]
    R = np.empty((B, B))
    for r in range(B):
        xr = X[r]
        nr = np.dot(xr, xr)
        for b in range(B):
            xb = X[b]
            if nr == 0.0:
                R[b, r] = np.dot(xb, xb)
            else:
                w = np.dot(xb, xr) / nr
                d = xb - w * xr
                R[b, r] = np.dot(d, d)
    return R


def _segment_table(R):
    """cost[s, e], rep[s, e] for the segment [s, e) with its best representative."""
    B = R.shape[0]
    cost = np.full((B + 1, B + 1), np.inf)
    rep = np.full((B + 1, B + 1), -1, dtype=int)
    for s in range(B):
        running = np.zeros(B)
        for e in range(s + 1, B + 1):
            running = running + R[e - 1]
            cand = running[s:e]
            j = int(np.argmin(cand))
            cost[s, e] = cand[j]
            rep[s, e] = s + j
    return cost, rep


def select_bands(cube, k):
    """Exact contiguous-segment band selection by dynamic programming.

    The band axis is cut into ``k`` contiguous segments; each band in a
    segment is reconstructed from the segment's representative by a scalar
    least-squares fit. The partition and representatives minimizing the total
    squared residual are returned. Ties go to the lexicographically smallest
    boundary sequence, then the smallest representative.
    """
    B = cube.bands
    if not 1 <= k <= B:
        raise ValueError(f"k must be in [1, {B}], got {k}")
    cost, rep = _segment_table(reconstruction_residuals(cube))

    # best[j, e]: minimal cost of covering [0, e) with j segments, summed left to right
    best = np.full((k + 1, B + 1), np.inf)
    best[0, 0] = 0.0
    for j in range(1, k + 1):
        for e in range(j, B + 1):
            cands = best[j - 1, j - 1 : e] + cost[j - 1 : e, e]
            best[j, e] = cands.min()

    # nodes lying on some optimal path back from (k, B)
    on_path = np.zeros((k + 1, B + 1), dtype=bool)
    on_path[k, B] = True
    for j in range(k, 0, -1):
        for e in range(B + 1):
            if not on_path[j, e]:
                continue
            for s in range(j - 1, e):
                if best[j - 1, s] + cost[s, e] == best[j, e]:
                    on_path[j - 1, s] = True

    bounds, s = [0], 0
    for j in range(1, k + 1):
        for e in range(s + 1, B + 1):
            if on_path[j, e] and best[j - 1, s] + cost[s, e] == best[j, e]:
                bounds.append(e)
                s = e
                break
    reps = tuple(int(rep[a, b]) for a, b in zip(bounds, bounds[1:]))
    return BandSelection(tuple(bounds), reps, float(best[k, B]))


def percentile_stretch(plane, gen):
    plane = np.asarray(plane, dtype=np.float64)
    lo = np.quantile(plane, gen.low_percentile)
    hi = np.quantile(plane, gen.high_percentile)
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    t = np.clip((plane - lo) / (hi - lo), 0.0, 1.0)
    return _round_half_up(t * 255.0).astype(np.uint8)


def compose_sa(cube, sel, gen=GenerationParams()):
    """Spatial-aggregated image: R, G, B = longest to shortest selected wavelength."""
    reps = list(sel.representatives)
    if len(reps) != 3:
        raise ValueError(f"need exactly 3 representative bands, got {len(reps)}")
    if any(not 0 <= r < cube.bands for r in reps):
        raise ValueError(f"representatives {reps} out of range for {cube.bands} bands")
    by_wl = sorted(reps, key=lambda r: cube.wavelengths_nm[r], reverse=True)
    if gen.per_channel:
        chans = [percentile_stretch(cube.data[r], gen) for r in by_wl]
    else:
        joint = percentile_stretch(np.stack([cube.data[r] for r in by_wl]), gen)
        chans = list(joint)
    prov = (
        f"band selection bands={by_wl} boundaries={list(sel.segment_boundaries)} "
        f"objective={sel.objective_value:.6g} stretch=({gen.low_percentile}, {gen.high_percentile})"
    )
    return AggregatedImage(np.stack(chans, axis=-1), Role.SPATIAL, prov)


def decouple(cube, k_se=3, k_sa=3, gen=GenerationParams()):
    """Return the (spatial-aggregated, spectral-aggregated) image pair."""
    sel = select_bands(cube, k_sa)
    model = fit_pca(cube, k_se)
    sa = compose_sa(cube, sel, gen)
    se = project_pca(cube, model)
    src = f"source bands={cube.bands} size={cube.height}x{cube.width} k_sa={k_sa} k_se={k_se}"
    sa = AggregatedImage(sa.data, sa.role, f"{src}\n{sa.provenance}")
    se = AggregatedImage(se.data, se.role, f"{src}\n{se.provenance}")
    return sa, se
