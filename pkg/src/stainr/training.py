"""Training loop, evaluation pass, and (tiled) single-image restoration.

Everything here is deterministic given (config, seed): batch indices,
augmentation draws, and mixup decisions all derive from counter-based
seed sequences, so reruns produce byte-identical logs and checkpoints.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import losses
from . import synthdata as sd
from .autodiff import Tensor
from .config import TrainConfig, worker_count
from .errors import DataError, NumericError
from .model import ModelParams, build_model, model_forward
from .optim import OptimState, adamw_step, cosine_anneal_lr


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _pad_to_multiple(img: np.ndarray, m: int):
    """Edge-replicate [3,H,W] up to the next multiple of m; returns (img, H, W)."""
    h, w = img.shape[1], img.shape[2]
    ph = (m - h % m) % m
    pw = (m - w % m) % m
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return img, h, w


class TrainLog:
    """Accumulates per-step scalars and serializes them two ways."""

    COLUMNS = ("step", "lr", "mse", "ssim", "total")

    def __init__(self):
        self.rows = []

    def add(self, step, lr, mse, ssim, total):
        # builtin floats so the repr-based serialization stays parseable
        self.rows.append((int(step), float(lr), float(mse), float(ssim), float(total)))

    def text_lines(self):
        for step, lr, mse, ssim, total in self.rows:
            yield f"step={step} lr={lr!r} mse={mse!r} ssim={ssim!r} total={total!r}"

    def to_text(self):
        return "\n".join(self.text_lines()) + ("\n" if self.rows else "")

    def to_csv(self):
        lines = [",".join(self.COLUMNS)]
        for step, lr, mse, ssim, total in self.rows:
            lines.append(f"{step},{lr!r},{mse!r},{ssim!r},{total!r}")
        return "\n".join(lines) + "\n"


def _assemble_batch(pairs, cfg: TrainConfig, step: int):
    """Seeded sampling + augmentation for one step; [B,3,R,R] float32 pair."""
    n = len(pairs)
    rng = np.random.default_rng([0xBA7C4, cfg.seed, step])
    idx = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
    stained, clean = [], []
    res = cfg.train_resolution
    for slot, i in enumerate(idx):
        entry, s_img, c_img = pairs[i]
        pair = sd.ImagePair(s_img, c_img, entry.kind, entry.severity, entry.seed)
        partner = None
        if cfg.mixup_prob > 0 and rng.random() < cfg.mixup_prob:
            partner_i = int(rng.integers(0, n))
            pe, ps, pc = pairs[partner_i]
            partner = sd.ImagePair(ps, pc, pe.kind, pe.severity, pe.seed)
        aug = sd.augment(pair, _derive_seed(cfg.seed, step, slot), res,
                         mixup_alpha=cfg.mixup_alpha, partner=partner)
        stained.append(aug.stained)
        clean.append(aug.clean)
    x = np.stack(stained).astype(np.float32)
    y = np.stack(clean).astype(np.float32)
    return x, y


def train(cfg: TrainConfig, progress=None) -> tuple[ModelParams, TrainLog]:
    """Run the full schedule; writes logs and checkpoints under cfg.out_dir."""
    pairs = sd.load_pairs(cfg.data_dir, split="train", dtype=np.float32)
    if len(pairs) < 1:
        raise DataError(f"no training pairs found in {cfg.data_dir}")
    os.makedirs(cfg.out_dir, exist_ok=True)

    params = build_model(cfg.model, cfg.seed, dtype=np.float32)
    named = list(params.named_tensors())
    state = OptimState()
    log = TrainLog()

    for step in range(cfg.total_steps):
        x, y = _assemble_batch(pairs, cfg, step)
        lr = cosine_anneal_lr(step, max(cfg.total_steps, 1), cfg.lr_max, cfg.lr_min)
        with ad.GradTape():
            restored = model_forward(Tensor(x), params)
            mse = losses.mse_loss(restored, Tensor(y))
            ssim_l = losses.ssim_loss(restored, Tensor(y))
            total = ad.add(mse, ad.mul(ssim_l, cfg.alpha))
            mse_v, ssim_v, total_v = float(mse.data), float(ssim_l.data), float(total.data)
            if not np.isfinite(total_v):
                raise NumericError(
                    f"non-finite loss at step {step}: mse={mse_v} ssim={ssim_v}")
            for _, t in named:
                t.zero_grad()
            ad.backward(total)
        adamw_step(named, state, lr)
        log.add(step, lr, mse_v, ssim_v, total_v)
        if progress is not None:
            progress(step, total_v)
        if (step + 1) % cfg.checkpoint_interval == 0 and (step + 1) < cfg.total_steps:
            ckpt.save_checkpoint(
                os.path.join(cfg.out_dir, f"ckpt_{step + 1:06d}.stainr"), params, state)

    ckpt.save_checkpoint(os.path.join(cfg.out_dir, "model_final.stainr"), params, state)
    with open(os.path.join(cfg.out_dir, "train_log.txt"), "w", encoding="utf-8") as f:
        f.write(log.to_text())
    with open(os.path.join(cfg.out_dir, "train_log.csv"), "w", encoding="utf-8") as f:
        f.write(log.to_csv())
    return params, log


def restore_array(params: ModelParams, stained: np.ndarray) -> np.ndarray:
    """[3,H,W] -> clamped restoration at native size (pads as needed)."""
    m = params.config.spatial_multiple
    padded, h, w = _pad_to_multiple(stained.astype(params.dtype, copy=False), m)
    with ad.no_grad():
        out = model_forward(Tensor(padded[None]), params, inference=True)
    return out.data[0, :, :h, :w]


def evaluate(params: ModelParams, data_dir: str, split: str = "test",
             max_resolution: int | None = None):
    """Per-image metrics for restored-vs-clean plus the stained-vs-clean
    input baseline. Returns (restored_report, input_report)."""
    # load at the model dtype so the untrained identity model scores exactly
    # like the input baseline; metrics themselves still run in float64
    triples = sd.load_pairs(data_dir, split=split, dtype=params.dtype)
    if not triples:
        raise DataError(f"no {split} pairs found in {data_dir}")
    chash = params.config.hash()
    restored_rep = losses.MetricsReport(chash)
    input_rep = losses.MetricsReport(chash)

    def crop(img):
        if max_resolution is not None and (img.shape[1] > max_resolution
                                           or img.shape[2] > max_resolution):
            return img[:, :max_resolution, :max_resolution]
        return img

    def one(triple):
        entry, stained, clean = triple
        restored = restore_array(params, crop(stained))
        stained = crop(stained).astype(np.float64)
        clean = crop(clean).astype(np.float64)
        restored = restored.astype(np.float64)
        return (entry.pair_id,
                (losses.psnr(restored, clean), losses.ssim_value(restored, clean),
                 losses.mae(restored, clean)),
                (losses.psnr(stained, clean), losses.ssim_value(stained, clean),
                 losses.mae(stained, clean)))

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, triples))
    else:
        results = [one(t) for t in triples]

    for pair_id, rest, inp in results:
        restored_rep.add(f"{pair_id:06d}", *rest)
        input_rep.add(f"{pair_id:06d}", *inp)
    return restored_rep, input_rep


def _feather_weights(th, tw, oy, ox, overlap):
    """Per-pixel blend weight for a tile: ramps from ~0 on edges that
    overlap already-written content (top/left) up to 1 inside."""
    wy = np.ones(th)
    wx = np.ones(tw)
    if oy and overlap:
        ramp = (np.arange(1, overlap + 1)) / (overlap + 1.0)
        wy[:overlap] = ramp
    if ox and overlap:
        ramp = (np.arange(1, overlap + 1)) / (overlap + 1.0)
        wx[:overlap] = ramp
    return wy[None, :, None] * wx[None, None, :]


def restore_tiled(params: ModelParams, stained: np.ndarray, tile: int,
                  overlap: int) -> np.ndarray:
    """Restore a large image in overlapping tiles with feathered blending.

    The blend is written as canvas + w*(tile - canvas), which leaves the
    canvas bit-identical wherever overlapping tiles agree (identity model
    output therefore equals its input exactly).
    """
    m = params.config.spatial_multiple
    if tile % m:
        raise DataError(f"tile {tile} not divisible by model multiple {m}")
    if overlap < 0 or overlap >= tile / 2:
        raise DataError(f"overlap {overlap} must sit in [0, tile/2)")
    c, h, w = stained.shape
    if h <= tile and w <= tile:
        return restore_array(params, stained)

    padded, h0, w0 = _pad_to_multiple(stained, m)
    H, W = padded.shape[1], padded.shape[2]
    step = tile - overlap
    canvas = np.full((c, H, W), np.nan, dtype=np.float64)

    ys = list(range(0, max(H - tile, 0) + 1, step))
    if ys[-1] + tile < H:
        ys.append(H - tile)
    xs = list(range(0, max(W - tile, 0) + 1, step))
    if xs[-1] + tile < W:
        xs.append(W - tile)

    for oy in ys:
        for ox in xs:
            th = min(tile, H - oy)
            tw = min(tile, W - ox)
            piece = restore_array(params, padded[:, oy:oy + th, ox:ox + tw]).astype(np.float64)
            region = canvas[:, oy:oy + th, ox:ox + tw]
            fresh = np.isnan(region)
            weights = _feather_weights(th, tw, oy, ox, overlap)
            blended = region + weights * (piece - region)
            region[...] = np.where(fresh, piece, blended)

    if np.isnan(canvas).any():
        raise NumericError("tiling left uncovered pixels; bad tile geometry")
    return np.clip(canvas[:, :h0, :w0], 0.0, 1.0)
