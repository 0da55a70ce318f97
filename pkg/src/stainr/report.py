"""Figure rendering for training, evaluation, and ablation reports.

Every report path writes machine-readable delimited text first and PNG
figures alongside it; matplotlib runs on the Agg backend so reports work
headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_figure(log, path):
    """Loss components and learning rate over training steps."""
    steps = [r[0] for r in log.rows]
    if not steps:
        return
    lr = [r[1] for r in log.rows]
    mse = [r[2] for r in log.rows]
    ssim = [r[3] for r in log.rows]
    total = [r[4] for r in log.rows]

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(steps, total, label="total", color="#1f4e8c", lw=1.2)
    ax1.plot(steps, mse, label="mse", color="#c05020", lw=0.9, alpha=0.8)
    ax1.plot(steps, ssim, label="ssim", color="#2a7a4b", lw=0.9, alpha=0.8)
    ax1.set_yscale("log")
    ax1.set_ylabel("loss")
    ax1.legend(loc="upper right", fontsize=8)
    ax1.grid(True, alpha=0.3)
    ax2.plot(steps, lr, color="#555", lw=1.0)
    ax2.set_ylabel("learning rate")
    ax2.set_xlabel("step")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_eval_figure(restored_rep, input_rep, path):
    """Per-image restored-vs-input PSNR scatter plus SSIM histogram."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    x = np.asarray(input_rep.psnr)
    y = np.asarray(restored_rep.psnr)
    lo = min(x.min(), y.min()) - 1 if len(x) else 0
    hi = max(x.max(), y.max()) + 1 if len(x) else 1
    ax1.scatter(x, y, s=14, color="#1f4e8c", alpha=0.75)
    ax1.plot([lo, hi], [lo, hi], color="#999", lw=1, ls="--")
    ax1.set_xlabel("input PSNR (dB)")
    ax1.set_ylabel("restored PSNR (dB)")
    ax1.set_title(f"mean {input_rep.mean_psnr():.2f} -> {restored_rep.mean_psnr():.2f} dB",
                  fontsize=9)
    ax1.grid(True, alpha=0.3)
    bins = np.linspace(0, 1, 21)
    ax2.hist(input_rep.ssim, bins=bins, alpha=0.55, label="input", color="#c05020")
    ax2.hist(restored_rep.ssim, bins=bins, alpha=0.55, label="restored", color="#1f4e8c")
    ax2.set_xlabel("SSIM")
    ax2.set_ylabel("images")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_figure(rows, path):
    """Grouped bars over configurations; rows are (name, psnr, ssim, mae)."""
    names = [r[0] for r in rows]
    psnr = [r[1] for r in rows]
    ssim = [r[2] for r in rows]
    xs = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.bar(xs, psnr, color="#1f4e8c", width=0.6)
    ax1.set_xticks(xs, names, rotation=20, ha="right", fontsize=8)
    ax1.set_ylabel("held-out PSNR (dB)")
    ax1.grid(True, axis="y", alpha=0.3)
    ax2.bar(xs, ssim, color="#2a7a4b", width=0.6)
    ax2.set_xticks(xs, names, rotation=20, ha="right", fontsize=8)
    ax2.set_ylabel("held-out SSIM")
    ax2.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
