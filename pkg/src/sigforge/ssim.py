"""Windowed structural similarity with explicit luminance, contrast and structure terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SsimParams:
    window: str = "gaussian"
    size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window not in ("gaussian", "uniform"):
            raise ValueError(f"window must be 'gaussian' or 'uniform', got {self.window!r}")
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError(f"window size must be odd and >= 3, got {self.size}")
        if self.sigma <= 0 or self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValueError("sigma, K1, K2 and L must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2.0

    def weights(self) -> np.ndarray:
        """Normalized 2-D window weights."""
        if self.window == "uniform":
            w = np.ones((self.size, self.size))
        else:
            r = np.arange(self.size) - (self.size - 1) / 2.0
            g = np.exp(-(r * r) / (2.0 * self.sigma ** 2))
            w = np.outer(g, g)
        return w / w.sum()


DEFAULT_PARAMS = SsimParams()


@dataclass(frozen=True, eq=False)
class SsimComponents:
    mu_x: np.ndarray
    mu_y: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    sigma_xy: np.ndarray
    luminance: np.ndarray
    contrast: np.ndarray
    structure: np.ndarray
    d: np.ndarray

    def means(self) -> dict:
        return {
            "ssim": float(self.d.mean()),
            "luminance": float(self.luminance.mean()),
            "contrast": float(self.contrast.mean()),
            "structure": float(self.structure.mean()),
        }


def ssim_map(x, y, p: SsimParams = DEFAULT_PARAMS) -> SsimComponents:
    """Per-window statistics and l, c, s, d over every valid window (stride 1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"SSIM inputs differ in shape: {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < p.size:
        raise ValueError(f"images of shape {x.shape} are smaller than the {p.size}x{p.size} window")
    w = p.weights()
    k = p.size
    wx = np.lib.stride_tricks.sliding_window_view(x, (k, k))
    wy = np.lib.stride_tricks.sliding_window_view(y, (k, k))
    mu_x = np.einsum("hwij,ij->hw", wx, w)
    mu_y = np.einsum("hwij,ij->hw", wy, w)
    dx = wx - mu_x[..., None, None]
    dy = wy - mu_y[..., None, None]
    var_x = np.einsum("hwij,ij->hw", dx * dx, w)
    var_y = np.einsum("hwij,ij->hw", dy * dy, w)
    cov = np.einsum("hwij,ij->hw", dx * dy, w)
    sx, sy = np.sqrt(var_x), np.sqrt(var_y)
    lum = (2.0 * mu_x * mu_y + p.c1) / (mu_x ** 2 + mu_y ** 2 + p.c1)
    con = (2.0 * sx * sy + p.c2) / (var_x + var_y + p.c2)
    struct = (cov + p.c3) / (sx * sy + p.c3)
    # rounding can push |cov| a hair past sx*sy
    struct = np.clip(struct, -1.0, 1.0)
    return SsimComponents(mu_x, mu_y, sx, sy, cov, lum, con, struct, lum * con * struct)


def ssim_score(x, y, p: SsimParams = DEFAULT_PARAMS) -> float:
    return float(ssim_map(x, y, p).d.mean())


def mean_ssim(pairs, p: SsimParams = DEFAULT_PARAMS) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mean_ssim needs at least one pair")
    return float(np.mean([ssim_score(a, b, p) for a, b in pairs]))
