"""Command-line entry point: gen-data, train, eval, gradcheck, bench, demo."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .autodiff import configure_threads, set_deterministic
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config, write_config_echo
from .evaluation import benchmark, evaluate, ground_truth_predictions, predict
from .geometry import CameraIntrinsics
from .metrics import dump_report, format_report
from .model import IUPPose, count_parameters
from .ppm import read_ppm, to_uint8, write_pgm, write_ppm
from .scenes import PairDataset, generate_dataset, load_dataset, read_meta
from .training import load_checkpoint, train_loop

log = logging.getLogger("iuppose")

# --ablate names -> AblationFlags fields they switch off
ABLATIONS = {
    "rt-dec": "rt_decoupled",
    "iter": "iterative",
    "ida": "ida",
    "uncert": "uncertainty",
    "homo": "homography_warp",
}


class UsageError(Exception):
    pass


def _load(path) -> RunConfig:
    return load_config(path) if path else parse_config("")


def apply_ablations(cfg: RunConfig, spec: str | None) -> RunConfig:
    if not spec:
        return cfg
    for name in (s.strip() for s in spec.split(",") if s.strip()):
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        setattr(cfg.ablation, ABLATIONS[name], False)
    if not cfg.ablation.rt_decoupled and cfg.ablation.homography_warp:
        raise UsageError("--ablate rt-dec also needs homo: the joint decoder has no warp stage")
    cfg.validate()
    return cfg


def build_model(cfg: RunConfig) -> IUPPose:
    model = IUPPose(dataclasses.replace(cfg.model), dataclasses.replace(cfg.ablation), cfg.run.detach_warp)
    return model.double() if cfg.run.precision == "float64" else model


def ckpt_config_path(ckpt) -> Path:
    return Path(str(ckpt) + ".cfg")


def load_model(ckpt) -> tuple[IUPPose, RunConfig]:
    cfg_path = ckpt_config_path(ckpt)
    if not Path(ckpt).exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    cfg = load_config(cfg_path) if cfg_path.exists() else parse_config("")
    model = load_checkpoint(build_model(cfg), ckpt)
    model.eval()
    return model, cfg


def cmd_gen_data(args) -> int:
    cfg = _load(args.config)
    out = Path(args.out)
    manifest = generate_dataset(cfg.scene, out, filtered=not args.eval_unfiltered)
    write_config_echo(cfg, out / "config.echo.cfg")
    print(f"wrote {len(manifest)} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = apply_ablations(_load(args.config), args.ablate)
    if cfg.run.deterministic:
        set_deterministic(cfg.optim.seed)
    configure_threads()
    data = load_dataset(args.data)
    if args.steps is not None:
        cfg.optim.total_steps = args.steps
        cfg.optim.warmup_steps = min(cfg.optim.warmup_steps, max(0, args.steps - 1))
        cfg.validate()
    model = build_model(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, ckpt_config_path(out))
    log_path = Path(str(out) + ".log.csv")
    print(f"training {count_parameters(model)} parameters for {cfg.optim.total_steps} steps on {len(data)} pairs")
    rows = train_loop(model, data, cfg.optim, cfg.ablation, log_path=log_path, ckpt_path=out)
    print(f"final total loss {rows[-1][-1]:.5f}; checkpoint {out}; log {log_path}")
    return 0


def cmd_eval(args) -> int:
    data = load_dataset(args.data)
    if args.oracle_gt:
        pred = ground_truth_predictions(data)
    else:
        model, _ = load_model(args.ckpt)
        configure_threads()
        pred = predict(model, data)
    report = evaluate(pred, data)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        dump_report(report, args.report)
    print(format_report(report))
    if args.compare:
        other = json.loads(Path(args.compare).read_text())
        print(comparison_table({Path(args.compare).stem: other, "this run": report}))
    return 0


def comparison_table(reports: dict[str, dict]) -> str:
    """Side-by-side AUC and median errors for several eval reports."""
    head = f"{'run':<24}{'AUC@5':>8}{'AUC@10':>8}{'AUC@20':>8}{'rot med':>10}{'trans med':>11}"
    lines = [head, "-" * len(head)]
    for name, r in reports.items():
        a = r["auc"]
        lines.append(
            f"{name:<24}{100 * a['5']:>8.2f}{100 * a['10']:>8.2f}{100 * a['20']:>8.2f}"
            f"{r['median_rot_err_deg']:>10.2f}{r['median_trans_err_deg']:>11.2f}"
        )
    return "\n".join(lines)


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITE, run_suite

    names = None
    if args.block:
        names = [b.strip() for b in args.block.split(",")]
        unknown = sorted(set(names) - {c.name for c in SUITE})
        if unknown:
            raise UsageError(f"unknown block(s) {', '.join(unknown)}; choose from {', '.join(c.name for c in SUITE)}")
    rows = run_suite(names)
    print(f"{'block':<28}{'max rel err':>14}{'tol':>9}  result")
    for name, err, tol, ok, secs in rows:
        print(f"{name:<28}{err:>14.3e}{tol:>9.0e}  {'ok' if ok else 'FAIL'}  ({secs:.1f}s)")
    return 0 if all(r[3] for r in rows) else 1


def cmd_bench(args) -> int:
    model, cfg = load_model(args.ckpt)
    configure_threads()
    if args.pairs < 1:
        raise UsageError("--pairs must be positive")
    if args.data:
        data = load_dataset(args.data)
    else:
        data = random_dataset(cfg, 4)
    res = benchmark(model, data, args.pairs)
    print(f"{res['pairs']} pairs  mean latency {res['mean_latency_ms']:.2f} ms  {res['fps']:.1f} FPS (per pair, CPU)")
    return 0


def random_dataset(cfg: RunConfig, n: int) -> PairDataset:
    """Noise images with nominal intrinsics, enough to time the forward pass."""
    rng = np.random.default_rng(cfg.optim.seed)
    h, w = cfg.scene.image_h, cfg.scene.image_w
    img = rng.integers(0, 256, size=(n, h, w, 3), dtype=np.uint8)
    k = np.tile([60.0, 60.0, (w - 1) / 2, (h - 1) / 2], (n, 1))
    eye = np.repeat(np.eye(3)[None], n, 0)
    return PairDataset(Path("."), [f"noise_{i}" for i in range(n)], img, img[::-1].copy(), k, k.copy(), eye,
                       np.tile([1.0, 0, 0], (n, 1)), np.ones(n), np.ones(n))


def _heat(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def _upsample(x: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.kron(x, np.ones((h // x.shape[0], w // x.shape[1])))


@torch.no_grad()
def cmd_demo(args) -> int:
    from .warp import warp_by_rotation_matrix

    model, _ = load_model(args.ckpt)
    pair = Path(args.pair)
    i0, i1 = read_ppm(pair / "i0.ppm"), read_ppm(pair / "i1.ppm")
    meta = read_meta(pair / "meta.txt")
    dtype = next(model.parameters()).dtype
    t0 = torch.from_numpy(i0.copy()).to(dtype).permute(2, 0, 1)[None] / 255.0
    t1 = torch.from_numpy(i1.copy()).to(dtype).permute(2, 0, 1)[None] / 255.0
    k0 = torch.tensor(meta["K0"], dtype=dtype)[None]
    k1 = torch.tensor(meta["K1"], dtype=dtype)[None]
    est = model(t0, t1, k0, k1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = i0.shape[:2]
    write_ppm(out / "i0.ppm", i0)
    write_ppm(out / "i1.ppm", i1)
    for tag, r in (("pred", est.rotation), ("gt", torch.tensor(meta["R"].reshape(1, 3, 3), dtype=dtype))):
        warped, valid = warp_by_rotation_matrix(t0, k0, k1, r, (h, w))
        img = warped[0].permute(1, 2, 0).numpy() * valid[0, :, :, None].numpy()
        write_ppm(out / f"i0_warped_{tag}.ppm", to_uint8(img))
    for key in ("f0", "f1", "f0_coarse_warp", "f0_final_warp"):
        f = est.extras.get(key)
        if f is not None:
            write_pgm(out / f"{key}.pgm", to_uint8(_upsample(_heat(f[0].abs().mean(0).numpy()), h, w)))
    if model.flags.ida:
        a = model.mhbc.block.last_attention  # (2B, heads, Nq, Nk); first half is view 0 -> view 1
        gh, gw = model.cfg.tokens_h, model.cfg.tokens_w
        att = a[0].mean(0).numpy()
        for q in range(att.shape[0]):
            write_pgm(out / f"attention_q{q}.pgm", to_uint8(_upsample(_heat(att[q].reshape(gh, gw)), h, w)))
    rot_deg = np.degrees(np.arccos(np.clip((np.trace(est.rotation[0].numpy().T @ meta["R"].reshape(3, 3)) - 1) / 2, -1, 1)))
    print(f"rotation error {rot_deg:.2f} deg; images written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iuppose", description="Relative pose regression toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic pair dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--eval-unfiltered", action="store_true", help="skip the overlap filter")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--ablate", help="comma list of components to disable: " + ",".join(ABLATIONS))
    t.add_argument("--steps", type=int, help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.add_argument("--compare", help="another report JSON to tabulate against")
    e.add_argument("--oracle-gt", action="store_true", help=argparse.SUPPRESS)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--block", help="comma list of checks to run")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time forward passes")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--pairs", type=int, default=100)
    b.add_argument("--data")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("demo", help="dump warps and attention maps for one pair")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--pair", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "eval" and not args.oracle_gt and not args.ckpt:
        parser.error("eval needs --ckpt")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"iuppose {args.command}: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, FileNotFoundError, FloatingPointError) as e:
        print(f"iuppose {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
