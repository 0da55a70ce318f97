"""Command-line surface: gen-data, train, eval, restore, gradcheck, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss, failed gradient check, corrupt checkpoint).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import losses
from . import report
from . import synthdata as sd
from . import training
from .config import TrainConfig, load_config
from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import build_model
from .optim import OptimState


def _add_config_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")


def _build_parser():
    p = argparse.ArgumentParser(prog="stainr",
                                description="Document stain removal at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=440)
    g.add_argument("--size", type=int, default=64, help="square image side")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mix", default=None,
                   help="comma list kind=fraction; fractions must sum to 1")
    g.add_argument("--test-fraction", type=float, default=0.1)

    t = sub.add_parser("train", help="train a model")
    _add_config_args(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_config_args(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--report-dir", default=None,
                   help="where to write metrics files (default: checkpoint dir)")

    r = sub.add_parser("restore", help="restore one image file")
    _add_config_args(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, dest="in_path")
    r.add_argument("--output", required=True, dest="out_path")
    r.add_argument("--tile", type=int, default=256)
    r.add_argument("--overlap", type=int, default=16)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op")
    c.add_argument("--seeds", type=int, default=1)

    a = sub.add_parser("ablate", help="train/eval the four module on/off variants")
    _add_config_args(a)

    return p


def _parse_mix(raw):
    if raw is None:
        return None
    mix = {}
    for part in raw.split(","):
        if "=" not in part:
            raise ConfigError(f"--mix entry {part!r} is not kind=fraction")
        k, v = part.split("=", 1)
        try:
            mix[k.strip()] = float(v)
        except ValueError:
            raise ConfigError(f"--mix fraction {v!r} is not a number") from None
    return mix


def _cmd_gen_data(args):
    entries = sd.gen_dataset(args.out, args.count, args.size, args.size,
                             mix=_parse_mix(args.mix), seed=args.seed,
                             test_fraction=args.test_fraction)
    n_test = sum(1 for e in entries if e.split == "test")
    print(f"wrote {len(entries)} pairs to {args.out} "
          f"({len(entries) - n_test} train / {n_test} test)")
    return 0


def _cmd_train(args):
    cfg = load_config(args.config, args.set)
    last = {"pct": -1}

    def progress(step, loss):
        pct = (step + 1) * 100 // max(cfg.total_steps, 1)
        if pct != last["pct"] and pct % 5 == 0:
            print(f"step {step + 1}/{cfg.total_steps} loss {loss:.5f}", flush=True)
            last["pct"] = pct

    params, log = training.train(cfg, progress=progress)
    report.save_loss_figure(log, os.path.join(cfg.out_dir, "train_loss.png"))
    print(f"final checkpoint: {os.path.join(cfg.out_dir, 'model_final.stainr')}")
    return 0


def _load_params(cfg: TrainConfig, checkpoint_path):
    params = build_model(cfg.model, cfg.seed, dtype=np.float32)
    ckpt.load_into_model(checkpoint_path, params)
    return params


def _write_eval_outputs(restored_rep, input_rep, out_dir, stem="metrics"):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(restored_rep.to_csv())
    with open(os.path.join(out_dir, f"{stem}_input.csv"), "w", encoding="utf-8") as f:
        f.write(input_rep.to_csv())
    with open(os.path.join(out_dir, f"{stem}.txt"), "w", encoding="utf-8") as f:
        f.write("restored vs clean\n" + restored_rep.to_text())
        f.write("input vs clean\n" + input_rep.to_text())
    report.save_eval_figure(restored_rep, input_rep,
                            os.path.join(out_dir, f"{stem}.png"))
    return csv_path


def _cmd_eval(args):
    cfg = load_config(args.config, args.set)
    params = _load_params(cfg, args.checkpoint)
    restored_rep, input_rep = training.evaluate(
        params, cfg.data_dir, split=args.split, max_resolution=cfg.eval_resolution)
    out_dir = args.report_dir or os.path.dirname(os.path.abspath(args.checkpoint))
    _write_eval_outputs(restored_rep, input_rep, out_dir)
    print(f"images: {restored_rep.count}")
    print(f"input    psnr {input_rep.mean_psnr():.3f} dB  ssim {input_rep.mean_ssim():.4f}  "
          f"mae {input_rep.mean_mae():.3f}")
    print(f"restored psnr {restored_rep.mean_psnr():.3f} dB  ssim {restored_rep.mean_ssim():.4f}  "
          f"mae {restored_rep.mean_mae():.3f}")
    print(f"report written to {out_dir}")
    return 0


def _cmd_restore(args):
    from . import ppm
    cfg = load_config(args.config, args.set)
    params = _load_params(cfg, args.checkpoint)
    img = ppm.read_ppm(args.in_path)
    out = training.restore_tiled(params, img, args.tile, args.overlap)
    ppm.write_ppm(args.out_path, out)
    print(f"restored {args.in_path} -> {args.out_path}")
    return 0


def gradcheck_suite(seed: int):
    """Finite-difference checks for every differentiable op, small float64
    instances. Returns {op name: gradcheck report}."""
    from . import autodiff as adm
    from . import memory as mem
    from . import model as M

    rng = np.random.default_rng(seed)
    x = adm.Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)

    checks = {}
    w3 = adm.Tensor(rng.standard_normal((4, 4, 3, 3)) * 0.3, requires_grad=True)
    checks["conv2d"] = adm.gradcheck(lambda a, w: adm.conv2d(a, w, pad=1), [x, w3], seed=seed)
    wd = adm.Tensor(rng.standard_normal((4, 1, 3, 3)) * 0.3, requires_grad=True)
    checks["depthwise_conv2d"] = adm.gradcheck(
        lambda a, w: adm.depthwise_conv2d(a, w), [x, wd], seed=seed)
    g = adm.Tensor(rng.standard_normal(4), requires_grad=True)
    b = adm.Tensor(rng.standard_normal(4), requires_grad=True)
    checks["layer_norm"] = adm.gradcheck(
        lambda a, gg, bb: adm.layer_norm(adm.transpose(a, (0, 2, 3, 1)), gg, bb),
        [x, g, b], seed=seed)
    checks["softmax"] = adm.gradcheck(lambda a: adm.softmax(a, axis=1), [x], seed=seed)
    checks["l2_normalize"] = adm.gradcheck(lambda a: adm.l2_normalize(a, axis=1), [x], seed=seed)

    pm = M.MHDCAParams(rng, 4, 2, np.float64)
    pm.out_proj.data = rng.standard_normal(pm.out_proj.shape) * 0.3
    checks["mhdca"] = adm.gradcheck(lambda a: M.mhdca(a, pm), [x], seed=seed)
    po = M.OCAParams(rng, 4, 2, 2, 4, np.float64)
    po.out_proj.data = rng.standard_normal(po.out_proj.shape) * 0.3
    checks["oca"] = adm.gradcheck(lambda a: M.oca(a, po), [x], seed=seed)
    # expansion 2.5 makes the gate width differ from the channel count,
    # exercising the non-square output projection
    pf = M.FFNParams(rng, 4, 2.5, np.float64)
    pf.project_out.data = rng.standard_normal(pf.project_out.shape) * 0.3
    checks["ffn"] = adm.gradcheck(lambda a: M.ffn(a, pf), [x], seed=seed)

    # the whole block, residual projections knocked off zero so every
    # path carries gradient
    blk = M.BlockParams(rng, 4, 2, q_window=2, kv_window=4,
                        ffn_expansion=2.5, dtype=np.float64)
    for sub in (blk.attn_channel.out_proj, blk.ffn1.project_out,
                blk.attn_window.out_proj, blk.ffn2.project_out):
        sub.data = rng.standard_normal(sub.shape) * 0.3
    checks["srtransformer_block"] = adm.gradcheck(
        lambda a: M.srtransformer_block(a, blk), [x], seed=seed)

    dm = mem.init_docmemory(rng, 4, n_part=5, n_ins=4, n_sem=3)

    def mem_fwd(a, bp, bi, bs, w):
        yp, yi, ys = mem.docmemory_forward(a, dm)
        return mem.protomix(yp, yi, ys, w)

    checks["docmemory"] = adm.gradcheck(
        mem_fwd, [x, dm.bank_part.items, dm.bank_ins.items, dm.bank_sem.items,
                  dm.mix_weight], seed=seed)

    ys = [adm.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
          for _ in range(3)]
    wmix = adm.Tensor(np.array(rng.normal()), requires_grad=True)
    checks["protomix"] = adm.gradcheck(
        lambda a, b, c, w: mem.protomix(a, b, c, w), [*ys, wmix], seed=seed)

    xa = adm.Tensor(rng.random((1, 1, 12, 12)), requires_grad=True)
    xb = adm.Tensor(rng.random((1, 1, 12, 12)), requires_grad=True)
    checks["mse_loss"] = adm.gradcheck(losses.mse_loss, [xa, xb], seed=seed)
    checks["ssim_loss"] = adm.gradcheck(losses.ssim_loss, [xa, xb], seed=seed)
    return checks


def _cmd_gradcheck(args):
    failures = []
    for seed in range(args.seeds):
        for name, rep in gradcheck_suite(seed).items():
            status = "PASS" if rep.passed else "FAIL"
            print(f"seed {seed} {name:18s} {status} (max rel err {rep.max_rel_error:.2e})")
            if not rep.passed:
                failures.append((seed, name))

    if failures:
        raise NumericError(f"gradient checks failed: {failures}")
    print("all gradient checks passed")
    return 0


ABLATION_VARIANTS = (
    ("neither", dict(enable_docmemory=False, enable_srtransformer=False)),
    ("memory_only", dict(enable_docmemory=True, enable_srtransformer=False)),
    ("transformer_only", dict(enable_docmemory=False, enable_srtransformer=True)),
    ("both", dict(enable_docmemory=True, enable_srtransformer=True)),
)


def run_ablation(cfg: TrainConfig):
    """Train and evaluate the four module on/off variants; returns rows."""
    rows = []
    base_out = cfg.out_dir
    for name, toggles in ABLATION_VARIANTS:
        vcfg = TrainConfig(
            batch_size=cfg.batch_size, lr_max=cfg.lr_max, lr_min=cfg.lr_min,
            total_steps=cfg.total_steps, alpha=cfg.alpha,
            train_resolution=cfg.train_resolution, eval_resolution=cfg.eval_resolution,
            seed=cfg.seed, data_dir=cfg.data_dir,
            out_dir=os.path.join(base_out, name),
            checkpoint_interval=cfg.checkpoint_interval,
            mixup_alpha=cfg.mixup_alpha, mixup_prob=cfg.mixup_prob,
            test_fraction=cfg.test_fraction, model=cfg.model.replace(**toggles))
        params, log = training.train(vcfg)
        report.save_loss_figure(log, os.path.join(vcfg.out_dir, "train_loss.png"))
        restored_rep, input_rep = training.evaluate(
            params, vcfg.data_dir, split="test", max_resolution=vcfg.eval_resolution)
        rows.append((name, restored_rep.mean_psnr(), restored_rep.mean_ssim(),
                     restored_rep.mean_mae()))
        if name == "both":
            rows.append(("input", input_rep.mean_psnr(), input_rep.mean_ssim(),
                         input_rep.mean_mae()))
    return rows


def _cmd_ablate(args):
    cfg = load_config(args.config, args.set)
    rows = run_ablation(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "ablation.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("variant,psnr,ssim,mae\n")
        for name, p, s, m in rows:
            f.write(f"{name},{p!r},{s!r},{m!r}\n")
    report.save_ablation_figure(rows, os.path.join(cfg.out_dir, "ablation.png"))
    print(f"{'variant':18s} {'psnr':>8s} {'ssim':>8s} {'mae':>8s}")
    for name, p, s, m in rows:
        print(f"{name:18s} {p:8.3f} {s:8.4f} {m:8.3f}")
    print(f"table written to {csv_path}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "restore": _cmd_restore,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ShapeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
