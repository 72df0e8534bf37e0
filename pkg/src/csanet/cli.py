"""Command-line entry point: train, eval, predict, gradcheck, synth."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .data import SYNTH_MODES, CENTER_NOISE, generate_synthetic, write_synthetic
from .errors import CSANetError
from .harness import RunConfig


def _model_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="run config file (key = value lines)")
    p.add_argument("--seed", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--no-csa", action="store_true", default=None, help="disable cross-slice attention")
    p.add_argument("--no-isa", action="store_true", default=None, help="disable in-slice attention")
    p.add_argument("--center-role", choices=("keyvalue", "query"))
    p.add_argument("--attn-scaling", action="store_true", default=None,
                   help="scale attention scores by 1/sqrt(d)")
    p.add_argument("--clahe", action="store_true", default=None, help="apply CLAHE per slice")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any run config key")


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = "\n".join(args.set)
    cfg = RunConfig.from_text(overrides, base=cfg)
    for key in ("seed", "heads", "no_csa", "no_isa", "center_role", "attn_scaling", "clahe"):
        value = getattr(args, key)
        if value is not None:
            cfg = cfg.replace(**{key: value})
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve(args).validate()
    result = harness.train(cfg)
    last = result.epochs[-1]
    print(f"trained {result.checkpoint.step} steps; final epoch loss {last['mean_loss']:.5f}")
    print(f"checkpoint: {cfg.checkpoint}\nloss log: {cfg.log}")
    return 0


def cmd_eval(args) -> int:
    ckpt = harness.load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.config or args.set or any(getattr(args, k) is not None for k in
                                      ("seed", "heads", "no_csa", "no_isa", "center_role",
                                       "attn_scaling", "clahe")):
        cfg = _resolve(args)
    if args.manifest:
        cfg = cfg.replace(manifest=str(args.manifest))
    rows = harness.evaluate(ckpt, cfg, split=args.split)
    harness.write_metrics(rows, args.out)
    for r in rows:
        if r["volume_id"] == "mean":
            hd = "undefined" if r["hd95_mm"] is None else f"{r['hd95_mm']:.3f} mm"
            print(f"class {r['class']}: mean DSC {r['dsc']:.4f}, mean HD95 {hd}")
    print(f"metrics: {args.out}")
    return 0


def cmd_predict(args) -> int:
    ckpt = harness.load_checkpoint(args.checkpoint)
    pred = harness.predict(ckpt, args.input, args.output)
    print(f"wrote {args.output} ({'x'.join(map(str, pred.dims))})")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args) if args.config or args.set else None
    groups = harness.gradcheck(cfg, samples=args.samples, seed=args.seed or 0)
    sys.stdout.write(harness.format_gradcheck(groups))
    return 0 if all(g.passed for g in groups) else 1


def cmd_synth(args) -> int:
    ds = generate_synthetic(args.seed or 0, args.volumes, tuple(args.dims), args.mode, args.classes,
                            contrast=args.contrast)
    manifest = write_synthetic(ds, args.out, args.train)
    cfg = _resolve(args).replace(
        manifest=str(manifest.resolve()), classes=args.classes, image_size=args.dims[1],
        center_noise=CENTER_NOISE[args.mode],
        checkpoint=str((args.out / "model.ckpt").resolve()),
        log=str((args.out / "train_log.csv").resolve()))
    cfg_path = args.out / "run.cfg"
    cfg_path.write_text(cfg.to_text(), encoding="utf-8")
    print(f"wrote {len(ds)} volumes, {manifest} and {cfg_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csanet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a manifest")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    _model_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", type=Path, default=Path("metrics.csv"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one SVOL volume")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="compare backward against finite differences")
    _model_flags(p)
    p.add_argument("--samples", type=int, default=20, help="entries checked per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic ellipsoid dataset")
    _model_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--volumes", type=int, default=28)
    p.add_argument("--train", type=int, default=20, help="number of training volumes")
    p.add_argument("--dims", type=int, nargs=3, default=(8, 64, 64), metavar=("D", "H", "W"))
    p.add_argument("--mode", choices=SYNTH_MODES, default="clean")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--contrast", type=float, default=0.15, help="intensity step between classes")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CSANetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
