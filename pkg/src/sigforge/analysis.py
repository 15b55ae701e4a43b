"""Correlation statistics linking synthetic-sample SSIM to attack FAR."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import betainc

P_METHODS = ("permutation", "exhaustive", "t-approx")
# relative slack when deciding whether a permuted |r| is at least as extreme
_TIE_TOL = 1e-12


class StatsError(ValueError):
    pass


def _validate(xs, ys, need_y_var: bool = True):
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise StatsError(f"length mismatch: {x.size} x values vs {y.size} y values")
    if x.size < 3:
        raise StatsError(f"need at least 3 points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise StatsError("inputs must be finite")
    if np.ptp(x) == 0:
        raise StatsError("x has zero variance; correlation is undefined")
    if need_y_var and np.ptp(y) == 0:
        raise StatsError("y has zero variance; correlation is undefined")
    return x, y


def pearson(xs, ys) -> float:
    x, y = _validate(xs, ys)
    dx, dy = x - x.mean(), y - y.mean()
    r = float(np.dot(dx, dy) / math.sqrt(np.dot(dx, dx) * np.dot(dy, dy)))
    return min(1.0, max(-1.0, r))


def _perm_rs(dx: np.ndarray, dy: np.ndarray, perms: np.ndarray) -> np.ndarray:
    denom = math.sqrt(np.dot(dx, dx) * np.dot(dy, dy))
    return np.abs(dy[perms] @ dx) / denom


def p_value(xs, ys, method: str = "permutation", n_permutations: int = 10000, seed: int = 0) -> float:
    """Two-tailed p-value for the Pearson correlation of ``xs`` and ``ys``.

    ``permutation``: each of ``n_permutations`` seeded shuffles pi counts
    half for pi and half for its inverse, so swapping x and y gives the same
    answer; p = (1 + count) / (1 + N).
    ``exhaustive``: every one of the n! pairings, identity included, no
    smoothing (n <= 9).
    ``t-approx``: t = r sqrt((n-2)/(1-r^2)) with the Student-t tail from the
    regularized incomplete beta function, p = I_{df/(df+t^2)}(df/2, 1/2).
    """
    x, y = _validate(xs, ys)
    r = pearson(x, y)
    n = x.size
    if method == "t-approx":
        if abs(r) >= 1.0:
            return 0.0
        df = n - 2
        t2 = r * r * df / (1.0 - r * r)
        return float(min(1.0, max(0.0, betainc(df / 2.0, 0.5, df / (df + t2)))))
    dx, dy = x - x.mean(), y - y.mean()
    threshold = abs(r) * (1.0 - _TIE_TOL) - _TIE_TOL
    if method == "exhaustive":
        if n > 9:
            raise StatsError(f"exhaustive enumeration of {n}! pairings is too large; use 'permutation'")
        perms = np.array(list(itertools.permutations(range(n))))
        return float(np.count_nonzero(_perm_rs(dx, dy, perms) >= threshold) / len(perms))
    if method != "permutation":
        raise StatsError(f"unknown p-value method {method!r}; expected one of {P_METHODS}")
    if n_permutations < 1:
        raise StatsError("n_permutations must be >= 1")
    rng = np.random.default_rng(seed)
    perms = np.argsort(rng.random((n_permutations, n)), axis=1)
    inverse = np.argsort(perms, axis=1)
    hits = np.count_nonzero(_perm_rs(dx, dy, perms) >= threshold) + np.count_nonzero(
        _perm_rs(dx, dy, inverse) >= threshold
    )
    return float((1.0 + hits / 2.0) / (1.0 + n_permutations))


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


def linear_fit(xs, ys) -> LinearFit:
    """Ordinary least squares ``y = slope * x + intercept``."""
    x, y = _validate(xs, ys, need_y_var=False)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, sxy, syy = float(np.dot(dx, dx)), float(np.dot(dx, dy)), float(np.dot(dy, dy))
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    r2 = 0.0 if syy == 0 else min(1.0, (sxy * sxy) / (sxx * syy))
    return LinearFit(slope, intercept, r2)


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    r_squared: float
    p_value: float
    n: int
    slope: float
    intercept: float
    method: str
    points: tuple = field(default=())

    def __post_init__(self):
        if not -1.0 <= self.r <= 1.0:
            raise StatsError(f"r = {self.r} outside [-1, 1]")
        if not 0.0 <= self.p_value <= 1.0:
            raise StatsError(f"p = {self.p_value} outside [0, 1]")
        if self.n < 3:
            raise StatsError("a correlation result needs n >= 3")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["points"] = [dict(p) for p in self.points]
        return d


def correlate(xs, ys, method: str = "permutation", n_permutations: int = 10000, seed: int = 0, points=()) -> CorrelationResult:
    r = pearson(xs, ys)
    fit = linear_fit(xs, ys)
    p = p_value(xs, ys, method, n_permutations, seed)
    return CorrelationResult(r, fit.r_squared, p, len(np.asarray(xs).reshape(-1)), fit.slope, fit.intercept, method,
                             tuple(points))


def band_points(ssims, accepted, width: float = 0.1, min_count: int = 1) -> list[dict]:
    """Bin per-attempt (ssim, accepted) pairs into SSIM bands of ``width``.

    Each non-empty band yields one point: mean SSIM of its samples and the
    fraction accepted (FAR). Bands are half-open ``[k*width, (k+1)*width)``.
    """
    s = np.asarray(ssims, dtype=np.float64).reshape(-1)
    a = np.asarray(accepted, dtype=bool).reshape(-1)
    if s.size != a.size:
        raise StatsError("ssims and decisions differ in length")
    if width <= 0:
        raise StatsError("band width must be positive")
    keys = np.floor(s / width + 1e-9).astype(int)
    points = []
    for k in sorted(set(keys.tolist())):
        mask = keys == k
        if mask.sum() < min_count:
            continue
        points.append({
            "label": f"[{k * width:.2f},{(k + 1) * width:.2f})",
            "band_low": round(k * width, 10),
            "band_high": round((k + 1) * width, 10),
            "mean_ssim": float(s[mask].mean()),
            "far": float(a[mask].mean()),
            "attempts": int(mask.sum()),
        })
    return points


def ssim_far_study(points, method: str = "permutation", n_permutations: int = 10000, seed: int = 0) -> CorrelationResult:
    """Correlate FAR with mean SSIM over points ``{"label", "mean_ssim", "far", ...}``."""
    points = list(points)
    if len(points) < 3:
        raise StatsError(f"the SSIM/FAR study needs at least 3 points, got {len(points)}")
    xs = [p["mean_ssim"] for p in points]
    ys = [p["far"] for p in points]
    return correlate(xs, ys, method, n_permutations, seed, points)
