"""Acceptance gate: ten numbered criteria, one printed verdict line each.

Criteria 5 and 6 consume full 2000-step training runs at the desk-scale
defaults (400 train / 40 test pairs, 64x64).  Those runs are cached under
tests/.cache by acceptance_protocol.run_protocol; on a cold cache this file
trains them inline, which takes a few hours on one core.  Run

    python3 tests/acceptance_protocol.py <variant> <seed>

ahead of time (variants: both x seeds 0,1,2 plus transformer_only,
memory_only, neither at seed 0) to pay that cost outside pytest.
"""

import os
import time

import numpy as np
import pytest

import acceptance_protocol as proto
from test_losses import mae_ref, mse_ref, ssim_ref
from test_tensor_ops import conv2d_oracle, depthwise_oracle

from stainr import autodiff as ad
from stainr import checkpoint as ckpt
from stainr import losses
from stainr import memory as mem
from stainr import synthdata as sd
from stainr import training
from stainr.autodiff import Tensor
from stainr.cli import gradcheck_suite
from stainr.config import TrainConfig
from stainr.model import (BlockParams, ModelConfig, build_model, model_forward,
                          srtransformer_block)
from stainr.optim import OptimState, adamw_step, cosine_anneal_lr
from stainr.ppm import read_ppm, write_ppm


def _verdict(num, name, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    print(f"[criterion {num:2d}] {tag} {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {num} failed: {name} {detail}"


@pytest.fixture(scope="session")
def run_both_s0():
    return proto.run_protocol("both", 0)


@pytest.fixture(scope="session")
def run_both_s1():
    return proto.run_protocol("both", 1)


@pytest.fixture(scope="session")
def run_both_s2():
    return proto.run_protocol("both", 2)


@pytest.fixture(scope="session")
def run_transformer_only():
    return proto.run_protocol("transformer_only", 0)


@pytest.fixture(scope="session")
def run_memory_only():
    return proto.run_protocol("memory_only", 0)


@pytest.fixture(scope="session")
def run_neither():
    return proto.run_protocol("neither", 0)


# ---------------------------------------------------------------------------
# 1. gradient checks on every differentiable op
# ---------------------------------------------------------------------------

def test_criterion_1_gradcheck_all_ops():
    t0 = time.monotonic()
    worst = 0.0
    failures = []
    for seed in range(5):
        for name, rep in gradcheck_suite(seed).items():
            worst = max(worst, rep.max_rel_error)
            if not rep.passed or rep.max_rel_error > 1e-3:
                failures.append((name, seed, rep.max_rel_error))
    elapsed = time.monotonic() - t0
    ok = not failures and elapsed < 300.0
    _verdict(1, "float64 gradchecks, 5 seeds, every op", ok,
             f"max rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. addressing invariants over 10,000 randomized trials
# ---------------------------------------------------------------------------

def test_criterion_2_addressing_invariants(monkeypatch):
    from stainr import model as M

    rng = np.random.default_rng(2024)
    worst_row = 0.0
    worst_mix = 0.0
    min_nonzero = 10 ** 9
    for trial in range(10_000):
        n = int(rng.integers(2, 13))
        c = int(rng.integers(1, 17))
        b = int(rng.integers(1, 9))
        bank = mem.MemoryBank(Tensor(rng.standard_normal((n, c))), "part")
        f = Tensor(rng.standard_normal((b, c)) * rng.uniform(0.1, 10.0))
        thr = float(rng.uniform(0.0, 1.0 / n))
        with ad.no_grad():
            w = mem.address_memory(f, bank, thr).data
            s = ad.softmax(Tensor(rng.standard_normal((b, n)) * 20.0),
                           axis=-1).data
        worst_row = max(worst_row, float(np.abs(w.sum(axis=-1) - 1.0).max()),
                        float(np.abs(s.sum(axis=-1) - 1.0).max()))
        min_nonzero = min(min_nonzero, int((w > 0).sum(axis=-1).min()))
        gs, gi, gp = mem.protomix_coefficients(float(rng.normal(0.0, 5.0)))
        worst_mix = max(worst_mix, abs(gs + gi + gp - 1.0))

        if trial % 100 == 0:  # genuine attention rows, spied mid-forward
            rows = []
            true_softmax = ad.softmax

            def spy(t, axis=-1):
                out = true_softmax(t, axis=axis)
                rows.append(out.data.reshape(-1, out.shape[-1]))
                return out

            monkeypatch.setattr(ad, "softmax", spy)
            try:
                xr = Tensor(rng.standard_normal((1, 4, 4, 4)))
                pm = M.MHDCAParams(rng, 4, 2, np.float64)
                po = M.OCAParams(rng, 4, 2, 2, 4, np.float64)
                with ad.no_grad():
                    M.mhdca(xr, pm)
                    M.oca(xr, po)
            finally:
                monkeypatch.setattr(ad, "softmax", true_softmax)
            for r in rows:
                worst_row = max(worst_row,
                                float(np.abs(r.sum(axis=-1) - 1.0).max()))
    ok = worst_row <= 1e-9 and worst_mix <= 1e-12 and min_nonzero >= 1
    _verdict(2, "10k trials: softmax/attention/addressing rows sum 1, "
                ">=1 kept after sparsify", ok,
             f"row {worst_row:.1e}, mix {worst_mix:.1e}, min kept {min_nonzero}")


# ---------------------------------------------------------------------------
# 3. identity starts
# ---------------------------------------------------------------------------

def test_criterion_3_identity_starts(tiny_model_config, tmp_path):
    rng = np.random.default_rng(3)
    block = BlockParams(rng, channels=8, heads=2, ffn_expansion=2,
                        q_window=4, kv_window=6, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 8, 8, 8)))
    with ad.no_grad():
        y = srtransformer_block(x, block)
    block_ok = np.array_equal(y.data, x.data)

    params = build_model(tiny_model_config, seed=0, dtype=np.float32)
    img = rng.random((1, 3, 32, 32)).astype(np.float32)
    with ad.no_grad():
        out = model_forward(Tensor(img), params, inference=True)
    model_ok = np.array_equal(out.data, img)

    data = str(tmp_path / "d")
    sd.gen_dataset(data, 12, 64, 64, seed=5, test_fraction=0.25)
    restored, inp = training.evaluate(params, data, split="test",
                                      max_resolution=64)
    eval_ok = (restored.psnr == inp.psnr and restored.ssim == inp.ssim
               and restored.mae == inp.mae and restored.count > 0)
    ok = block_ok and model_ok and eval_ok
    _verdict(3, "zero-init residuals: block, model, eval row all identity", ok,
             f"block={block_ok} model={model_ok} eval={eval_ok}")


# ---------------------------------------------------------------------------
# 4. oracle agreement
# ---------------------------------------------------------------------------

def test_criterion_4_oracles():
    rng = np.random.default_rng(4)
    worst_conv = worst_dw = worst_mse = worst_mae = 0.0
    for _ in range(100):
        b = int(rng.integers(1, 3))
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
        h = int(rng.integers(3, 8))
        w = int(rng.integers(3, 8))
        x = rng.standard_normal((b, cin, h, w))
        wgt = rng.standard_normal((cout, cin, 3, 3))
        bias = rng.standard_normal(cout)
        with ad.no_grad():
            got = ad.conv2d(Tensor(x), Tensor(wgt), Tensor(bias),
                            stride=1, pad=1).data
        ref = conv2d_oracle(x, wgt, bias, stride=1, pad=1)
        worst_conv = max(worst_conv, float(np.abs(got - ref).max()))

        dwgt = rng.standard_normal((cin, 1, 3, 3))
        dbias = rng.standard_normal(cin)
        with ad.no_grad():
            gotd = ad.depthwise_conv2d(Tensor(x), Tensor(dwgt),
                                       Tensor(dbias)).data
        refd = depthwise_oracle(x, dwgt, dbias)
        worst_dw = max(worst_dw, float(np.abs(gotd - refd).max()))

        p = rng.random((b, cin, h, w))
        q = rng.random((b, cin, h, w))
        with ad.no_grad():
            m = float(losses.mse_loss(Tensor(p), Tensor(q)).data)
        worst_mse = max(worst_mse, abs(m - mse_ref(p, q)))
        worst_mae = max(worst_mae, abs(losses.mae(p, q) - mae_ref(p, q)))

    x = np.random.default_rng(44).random((2, 14, 13))
    y = np.random.default_rng(45).random((2, 14, 13))
    with ad.no_grad():
        s = float(losses.ssim(Tensor(x[None]), Tensor(y[None])).data)
    worst_ssim = abs(s - ssim_ref(x, y))

    ok = (worst_conv <= 1e-10 and worst_dw <= 1e-10
          and worst_mse <= 1e-10 and worst_mae <= 1e-10
          and worst_ssim <= 1e-9)
    _verdict(4, "conv/depthwise/mse/mae vs loop oracles, ssim vs scalar ref", ok,
             f"conv {worst_conv:.1e}, dw {worst_dw:.1e}, mse {worst_mse:.1e}, "
             f"mae {worst_mae:.1e}, ssim {worst_ssim:.1e}")


# ---------------------------------------------------------------------------
# 5. the training protocol learns (2 of 3 seeds)
# ---------------------------------------------------------------------------

def _seed_passes(s):
    drop = 1.0 - s["late_total_mean"] / s["early_total_mean"]
    dpsnr = s["restored_psnr"] - s["input_psnr"]
    dssim = s["restored_ssim"] - s["input_ssim"]
    return (drop >= 0.5 and dpsnr >= 2.0 and dssim >= 0.03,
            f"seed {s['seed']}: drop {drop:.1%}, dPSNR {dpsnr:+.2f}dB, "
            f"dSSIM {dssim:+.4f}")


def test_criterion_5_training_protocol(run_both_s0, run_both_s1, run_both_s2):
    details = []
    passed = 0
    for s in (run_both_s0, run_both_s1, run_both_s2):
        good, msg = _seed_passes(s)
        passed += int(good)
        details.append(msg + (" ok" if good else " MISS"))
    ok = passed >= 2
    _verdict(5, "2000-step runs: loss halves, +2dB PSNR, +0.03 SSIM", ok,
             "; ".join(details))


# ---------------------------------------------------------------------------
# 6. ablation ordering
# ---------------------------------------------------------------------------

def test_criterion_6_ablation(run_both_s0, run_transformer_only,
                              run_memory_only, run_neither):
    runs = {s["variant"]: s for s in (run_both_s0, run_transformer_only,
                                      run_memory_only, run_neither)}
    finished = all(s["steps"] == 2000 for s in runs.values())
    both = runs["both"]["restored_psnr"]
    t_only = runs["transformer_only"]["restored_psnr"]
    m_only = runs["memory_only"]["restored_psnr"]
    ordering = both >= t_only - 0.3 and both >= m_only - 0.3
    ok = finished and ordering
    _verdict(6, "all four variants train; both >= each single - 0.3dB", ok,
             f"both {both:.2f}, transformer_only {t_only:.2f}, "
             f"memory_only {m_only:.2f}, "
             f"neither {runs['neither']['restored_psnr']:.2f}")


# ---------------------------------------------------------------------------
# 7. bitwise reproducibility
# ---------------------------------------------------------------------------

def test_criterion_7_reproducibility(tmp_path):
    data = proto.dataset_dir()
    outs = []
    for tag in ("a", "b"):
        cfg = TrainConfig(seed=0, data_dir=data, out_dir=str(tmp_path / tag),
                          total_steps=25, batch_size=4, train_resolution=64,
                          eval_resolution=64, checkpoint_interval=10,
                          test_fraction=proto.TEST_FRACTION)
        training.train(cfg)
        outs.append(cfg.out_dir)
    train_ok = True
    for name in ("train_log.txt", "train_log.csv", "ckpt_000010.stainr",
                 "ckpt_000020.stainr", "model_final.stainr"):
        with open(os.path.join(outs[0], name), "rb") as f1, \
             open(os.path.join(outs[1], name), "rb") as f2:
            if f1.read() != f2.read():
                train_ok = False

    gen_ok = True
    d1, d2 = str(tmp_path / "g1"), str(tmp_path / "g2")
    sd.gen_dataset(d1, 8, 64, 64, seed=7)
    sd.gen_dataset(d2, 8, 64, 64, seed=7)
    for name in sorted(os.listdir(d1)):
        with open(os.path.join(d1, name), "rb") as f1, \
             open(os.path.join(d2, name), "rb") as f2:
            if f1.read() != f2.read():
                gen_ok = False
    ok = train_ok and gen_ok
    _verdict(7, "identical reruns byte-identical (train + gen-data)", ok,
             f"train={train_ok} gen={gen_ok}")


# ---------------------------------------------------------------------------
# 8. optimizer arithmetic
# ---------------------------------------------------------------------------

def test_criterion_8_optimizer_math():
    ends_ok = (cosine_anneal_lr(0, 100, 3e-4, 1e-6) == 3e-4
               and cosine_anneal_lr(100, 100, 3e-4, 1e-6) == 1e-6)
    mid = cosine_anneal_lr(50, 100, 3e-4, 1e-6)
    mid_ok = abs(mid - (3e-4 + 1e-6) / 2) < 1e-19

    p = Tensor(np.array(1.0), requires_grad=True)
    p.grad = np.array(0.0)
    adamw_step([("w", p)], OptimState(), 0.1)
    decay_ok = abs(float(p.data) - 0.999) < 1e-12
    ok = ends_ok and mid_ok and decay_ok
    _verdict(8, "cosine endpoints + midpoint exact, AdamW decoupled decay", ok,
             f"mid err {abs(mid - (3e-4 + 1e-6) / 2):.1e}, "
             f"decay err {abs(float(p.data) - 0.999):.1e}")


# ---------------------------------------------------------------------------
# 9. round trips
# ---------------------------------------------------------------------------

def test_criterion_9_round_trips(tiny_model_config, tmp_path):
    params = build_model(tiny_model_config, seed=0, dtype=np.float32)
    p1, p2 = str(tmp_path / "a.stainr"), str(tmp_path / "b.stainr")
    ckpt.save_checkpoint(p1, params)
    fresh = build_model(tiny_model_config, seed=3, dtype=np.float32)
    ckpt.load_into_model(p1, fresh)
    ckpt.save_checkpoint(p2, fresh)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        ckpt_ok = f1.read() == f2.read()

    ramp = np.arange(256, dtype=np.uint8)
    img = np.stack([ramp.reshape(16, 16)] * 3).astype(np.float64) / 255.0
    ppm_path = str(tmp_path / "ramp.ppm")
    write_ppm(ppm_path, img)
    back = read_ppm(ppm_path)
    ppm_ok = np.array_equal(np.round(back * 255).astype(np.uint8),
                            np.round(img * 255).astype(np.uint8))

    x = np.random.default_rng(9).standard_normal((2, 3, 8, 8))
    with ad.no_grad():
        y = ad.pixel_shuffle(ad.pixel_unshuffle(Tensor(x), 2), 2).data
    shuffle_ok = np.array_equal(y, x)
    ok = ckpt_ok and ppm_ok and shuffle_ok
    _verdict(9, "checkpoint, ppm, pixel-shuffle round trips", ok,
             f"ckpt={ckpt_ok} ppm={ppm_ok} shuffle={shuffle_ok}")


# ---------------------------------------------------------------------------
# 10. tiled inference matches direct inference
# ---------------------------------------------------------------------------

def test_criterion_10_tiling(run_both_s0):
    params = build_model(proto.protocol_config("both", 0).model, seed=0,
                         dtype=np.float32)
    ckpt.load_into_model(os.path.join(run_both_s0["out_dir"],
                                      "model_final.stainr"), params)
    pair = sd.make_pair("black_tea", 2, seed=91, h=128, w=128)
    img = pair.stained.astype(np.float32)
    direct = training.restore_array(params, img)
    tiled = training.restore_tiled(params, img, tile=64, overlap=16)
    mad = float(np.abs(tiled - direct).mean())
    ok = mad < 1e-3
    _verdict(10, "2x-tile image: tiled vs direct restoration", ok,
             f"MAD {mad:.2e}")
