"""Loss and metric checks against scalar reference implementations."""

import numpy as np
import numpy.testing as npt
import pytest

from stainr import autodiff as ad
from stainr import losses
from stainr.errors import ShapeError


# ---------------------------------------------------------------------------
# scalar SSIM reference: explicit window loops, no shared code with the
# banded-matrix implementation under test
# ---------------------------------------------------------------------------

def gaussian_window_ref(size=11, sigma=1.5):
    half = size // 2
    g = np.array([np.exp(-(i - half) ** 2 / (2.0 * sigma ** 2)) for i in range(size)])
    return g / g.sum()


def ssim_ref(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Mean SSIM over valid windows of two [C,H,W] images."""
    w1d = gaussian_window_ref(size, sigma)
    w2d = np.outer(w1d, w1d)
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    C, H, W = a.shape
    vals = []
    for c in range(C):
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                pa = a[c, i:i + size, j:j + size]
                pb = b[c, i:i + size, j:j + size]
                mu_a = (w2d * pa).sum()
                mu_b = (w2d * pb).sum()
                var_a = (w2d * pa * pa).sum() - mu_a ** 2
                var_b = (w2d * pb * pb).sum() - mu_b ** 2
                cov = (w2d * pa * pb).sum() - mu_a * mu_b
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
                vals.append(num / den)
    return float(np.mean(vals))


def mse_ref(a, b):
    return float(np.mean((a - b) ** 2))


def mae_ref(a, b):
    return float(np.mean(np.abs(a - b)) * 255.0)


def psnr_ref(a, b, max_val=1.0):
    m = mse_ref(a, b)
    if m == 0:
        return 100.0
    return float(10.0 * np.log10(max_val ** 2 / m))


def test_ssim_matches_scalar_reference(rng):
    a = rng.random((2, 14, 13))
    b = np.clip(a + rng.normal(0, 0.08, a.shape), 0, 1)
    got = float(losses.ssim(ad.Tensor(a[None]), ad.Tensor(b[None])).data)
    want = ssim_ref(a, b)
    assert abs(got - want) < 1e-9, (got, want)


def test_ssim_identical_images_is_one(rng):
    a = rng.random((1, 1, 16, 16))
    val = float(losses.ssim(ad.Tensor(a), ad.Tensor(a.copy())).data)
    assert abs(val - 1.0) < 1e-12


def test_ssim_checkerboard_vs_inverse_is_negative():
    c = np.indices((16, 16)).sum(axis=0) % 2
    a = c[None, None].astype(np.float64)
    b = 1.0 - a
    val = float(losses.ssim(ad.Tensor(a), ad.Tensor(b)).data)
    assert val < -0.9


def test_ssim_rejects_small_images(rng):
    a = ad.Tensor(rng.random((1, 1, 8, 8)))
    with pytest.raises(ShapeError):
        losses.ssim(a, a)


def test_ssim_window_sums_to_one():
    cfg = losses.SSIMConfig()
    w = cfg.window_1d()
    npt.assert_allclose(w.sum(), 1.0, atol=1e-12)
    npt.assert_allclose(w, gaussian_window_ref(), atol=1e-12)
    assert w[5] == w.max()  # centered


def test_mse_and_mae_match_oracles_100_instances():
    rng = np.random.default_rng(21)
    for trial in range(100):
        shape = (1, int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        a = rng.random(shape)
        b = rng.random(shape)
        got_mse = float(losses.mse_loss(ad.Tensor(a), ad.Tensor(b)).data)
        assert abs(got_mse - mse_ref(a, b)) < 1e-10
        got_mae = losses.mae(a, b)
        assert abs(got_mae - mae_ref(a, b)) < 1e-10
        got_psnr = losses.psnr(a, b)
        assert abs(got_psnr - psnr_ref(a, b)) < 1e-9


def test_psnr_known_values():
    a = np.zeros((1, 8, 8))
    b = np.full((1, 8, 8), 0.5)
    # mse = 0.25 -> 10*log10(1/0.25) = 6.0206 dB
    assert abs(losses.psnr(a, b) - 6.020599913279624) < 1e-9
    assert losses.psnr(a, a) == 100.0  # capped rather than infinite


def test_mae_known_value():
    a = np.zeros((1, 4, 4))
    b = np.full((1, 4, 4), 0.1)
    assert abs(losses.mae(a, b) - 25.5) < 1e-12


def test_total_loss_composition(rng):
    a = ad.Tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
    b = ad.Tensor(rng.random((1, 1, 16, 16)))
    total = float(losses.total_loss(a, b, alpha=0.2).data)
    m = float(losses.mse_loss(a, b).data)
    s = float(losses.ssim_loss(a, b).data)
    assert abs(total - (m + 0.2 * s)) < 1e-12
    # alpha=0 reduces to pure mse
    t0 = float(losses.total_loss(a, b, alpha=0.0).data)
    assert abs(t0 - m) < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_losses(seed):
    rng = np.random.default_rng(800 + seed)
    a = ad.Tensor(rng.random((1, 1, 12, 12)), requires_grad=True)
    b = ad.Tensor(rng.random((1, 1, 12, 12)), requires_grad=True)
    rep = ad.gradcheck(losses.mse_loss, [a, b], seed=seed)
    assert rep.passed, f"mse {rep.max_rel_error:.2e}"
    rep = ad.gradcheck(losses.ssim_loss, [a, b], seed=seed)
    assert rep.passed, f"ssim {rep.max_rel_error:.2e}"
    rep = ad.gradcheck(lambda u, v: losses.total_loss(u, v, alpha=0.2), [a, b], seed=seed)
    assert rep.passed, f"total {rep.max_rel_error:.2e}"


def test_ssim_value_numpy_helper_matches_tensor_path(rng):
    a = rng.random((3, 16, 16))
    b = rng.random((3, 16, 16))
    v1 = losses.ssim_value(a, b)
    v2 = float(losses.ssim(ad.Tensor(a[None]), ad.Tensor(b[None])).data)
    assert abs(v1 - v2) < 1e-12


def test_metrics_report_accumulation_and_csv(rng):
    rep = losses.MetricsReport("deadbeef")
    a = rng.random((3, 16, 16))
    b = np.clip(a + 0.05, 0, 1)
    p1 = losses.psnr(a, b)
    rep.add("img0", 100.0, 1.0, 0.0)
    rep.add("img1", p1, losses.ssim_value(a, b), losses.mae(a, b))
    assert rep.count == 2
    assert rep.mean_psnr() == pytest.approx((100.0 + p1) / 2)
    csv = rep.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "image_id,psnr,ssim,mae"
    assert len(lines) == 3
    assert lines[1].startswith("img0,")
    # repr round trip: parsing a float field back gives the same double
    assert float(lines[2].split(",")[1]) == p1
    text = rep.to_text()
    assert "psnr" in text.lower()
