"""Composite restoration loss (MSE + weighted SSIM) and evaluation metrics.

The SSIM term uses Gaussian-weighted local moments computed with banded
convolution matrices applied as matmuls along each spatial axis, which
keeps the whole term differentiable through the tensor engine. Metrics
(psnr, ssim value, mae) operate on plain numpy arrays.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


class SSIMConfig:
    """Canonical constants: 11x11 Gaussian window, sigma 1.5, K1/K2 0.01/0.03."""

    __slots__ = ("window_size", "sigma", "c1", "c2", "dynamic_range")

    def __init__(self, window_size=11, sigma=1.5, k1=0.01, k2=0.03, dynamic_range=1.0):
        self.window_size = window_size
        self.sigma = sigma
        self.dynamic_range = dynamic_range
        self.c1 = (k1 * dynamic_range) ** 2
        self.c2 = (k2 * dynamic_range) ** 2

    def window_1d(self):
        n = self.window_size
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        g = np.exp(-(x * x) / (2.0 * self.sigma ** 2))
        return g / g.sum()


_DEFAULT_SSIM = SSIMConfig()


def _require_same_shape(a, b, opname):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def mse_loss(restored: Tensor, target: Tensor) -> Tensor:
    """Mean squared pixel difference over every value."""
    _require_same_shape(restored, target, "mse_loss")
    d = ad.sub(restored, target)
    return ad.tmean(ad.mul(d, d))


def _band_matrix(n, window, dtype):
    """[n-w+1, n] matrix whose row r holds the window at offset r."""
    w = window.size
    rows = n - w + 1
    m = np.zeros((rows, n), dtype=dtype)
    for j in range(w):
        m[np.arange(rows), np.arange(rows) + j] = window[j]
    return m


def _local_mean(t, bh, bwt):
    return ad.matmul(ad.matmul(bh, t), bwt)


def ssim(restored: Tensor, target: Tensor, cfg: SSIMConfig = _DEFAULT_SSIM) -> Tensor:
    """Mean structural similarity over valid windows, scalar Tensor.

    Gaussian-weighted means/variances/covariance per window, per channel,
    averaged. Inputs must be [B,C,H,W] with H,W at least the window size.
    """
    _require_same_shape(restored, target, "ssim")
    if restored.ndim != 4:
        raise ShapeError(f"ssim: expected [B,C,H,W], got {restored.shape}")
    H, W = restored.shape[2], restored.shape[3]
    w = cfg.window_size
    if H < w or W < w:
        raise ShapeError(f"ssim: image {H}x{W} smaller than {w}x{w} window")
    dtype = restored.data.dtype
    g = cfg.window_1d()
    bh = Tensor(_band_matrix(H, g, dtype))
    bwt = Tensor(_band_matrix(W, g, dtype).T.copy())

    x, y = restored, target
    mu_x = _local_mean(x, bh, bwt)
    mu_y = _local_mean(y, bh, bwt)
    mu_xx = ad.mul(mu_x, mu_x)
    mu_yy = ad.mul(mu_y, mu_y)
    mu_xy = ad.mul(mu_x, mu_y)
    var_x = ad.sub(_local_mean(ad.mul(x, x), bh, bwt), mu_xx)
    var_y = ad.sub(_local_mean(ad.mul(y, y), bh, bwt), mu_yy)
    cov = ad.sub(_local_mean(ad.mul(x, y), bh, bwt), mu_xy)

    c1, c2 = cfg.c1, cfg.c2
    num = ad.mul(ad.add(ad.mul(mu_xy, 2.0), c1), ad.add(ad.mul(cov, 2.0), c2))
    den = ad.mul(ad.add(ad.add(mu_xx, mu_yy), c1), ad.add(ad.add(var_x, var_y), c2))
    return ad.tmean(ad.div(num, den))


def ssim_loss(restored: Tensor, target: Tensor, cfg: SSIMConfig = _DEFAULT_SSIM) -> Tensor:
    return ad.sub(1.0, ssim(restored, target, cfg))


def total_loss(restored: Tensor, target: Tensor, alpha: float = 0.2) -> Tensor:
    """MSE plus alpha-weighted SSIM loss."""
    if alpha < 0:
        raise ValueError(f"total_loss: alpha must be nonnegative, got {alpha}")
    return ad.add(mse_loss(restored, target), ad.mul(ssim_loss(restored, target), alpha))


# ---------------------------------------------------------------------------
# metrics (plain numpy, evaluation only)
# ---------------------------------------------------------------------------

PSNR_CAP_DB = 100.0


def psnr(restored: np.ndarray, target: np.ndarray, max_val: float = 1.0) -> float:
    """10*log10(max^2/MSE), capped at 100 dB for identical images."""
    restored = np.asarray(restored, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _require_same_shape(restored, target, "psnr")
    err = np.mean((restored - target) ** 2)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(max_val * max_val / err)), PSNR_CAP_DB)


def mae(restored: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute error scaled by 255 (8-bit reporting convention)."""
    restored = np.asarray(restored, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _require_same_shape(restored, target, "mae")
    return float(np.mean(np.abs(restored - target)) * 255.0)


def ssim_value(restored: np.ndarray, target: np.ndarray, cfg: SSIMConfig = _DEFAULT_SSIM) -> float:
    """SSIM of two [C,H,W] or [B,C,H,W] arrays as a python float."""
    a = np.asarray(restored, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.ndim == 3:
        a, b = a[None], b[None]
    with ad.no_grad():
        return float(ssim(Tensor(a), Tensor(b), cfg).data)


class MetricsReport:
    """Per-image and aggregate metrics for one evaluation pass."""

    def __init__(self, config_hash: str):
        self.config_hash = config_hash
        self.image_ids = []
        self.psnr = []
        self.ssim = []
        self.mae = []

    def add(self, image_id: str, psnr_db: float, ssim_val: float, mae_val: float):
        self.image_ids.append(image_id)
        # plain floats: repr() of numpy scalars would corrupt the CSV
        self.psnr.append(float(psnr_db))
        self.ssim.append(float(ssim_val))
        self.mae.append(float(mae_val))

    @property
    def count(self):
        return len(self.image_ids)

    def mean_psnr(self):
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def mean_mae(self):
        return float(np.mean(self.mae)) if self.mae else float("nan")

    def to_csv(self) -> str:
        lines = ["image_id,psnr,ssim,mae"]
        for i in range(self.count):
            lines.append(f"{self.image_ids[i]},{self.psnr[i]!r},{self.ssim[i]!r},{self.mae[i]!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [
            f"images: {self.count}",
            f"config: {self.config_hash}",
            f"mean_psnr_db: {self.mean_psnr()!r}",
            f"mean_ssim: {self.mean_ssim()!r}",
            f"mean_mae: {self.mean_mae()!r}",
        ]
        return "\n".join(lines) + "\n"
