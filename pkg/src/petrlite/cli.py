"""Command line entry point: gen-scenes, train, eval, pe-sim, ablate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, PetrError
from .harness.config import RunConfig, load_config


def _anchor(text: str) -> tuple[int, int, int]:
    try:
        v, h, w = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected v,h,w integers, got {text!r}") from None
    return v, h, w


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("runs"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="petrlite", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", parents=[common], help="write synthetic scenes")
    g.add_argument("--n-scenes", type=int, default=4)

    t = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    t.add_argument("--steps", type=int)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--n-scenes", type=int)
    e.add_argument("--score-threshold", type=float)

    s = sub.add_parser("pe-sim", parents=[common], help="PE similarity heatmaps")
    s.add_argument("--checkpoint", type=Path, help="trained weights; fresh init if omitted")
    s.add_argument("--anchor", type=_anchor, default=(0, 0, 0), help="view,row,col")

    a = sub.add_parser("ablate", parents=[common], help="run a named ablation grid")
    a.add_argument("grid")
    a.add_argument("--steps", type=int)
    return p


def _config(args) -> RunConfig:
    overrides = {"seed": args.seed, "steps": getattr(args, "steps", None)}
    if getattr(args, "score_threshold", None) is not None:
        overrides["score_threshold"] = args.score_threshold
    return load_config(args.config, **overrides)


def _gen_scenes(cfg: RunConfig, args) -> None:
    from .harness.train import build_rig, make_scene, scene_seed
    from .scenegen import save_scene

    args.out.mkdir(parents=True, exist_ok=True)
    rig = build_rig(cfg)
    for i in range(args.n_scenes):
        scene = make_scene(cfg, rig, scene_seed(cfg.seed, 1, i))
        save_scene(scene, args.out / f"scene_{i:04d}.json", args.out / f"scene_{i:04d}.bin")
    print(f"wrote {args.n_scenes} scenes to {args.out}")


def _train(cfg: RunConfig, args) -> None:
    from .harness.train import train_loop

    result = train_loop(cfg, args.out)
    msg = f"trained {cfg.steps} steps; checkpoint at {args.out / 'checkpoint.bin'}"
    if result.report is not None:
        msg += f"; mAP {result.report.mean_ap:.4f}"
    print(msg)


def _eval(cfg: RunConfig, args) -> None:
    from .harness.train import evaluate, report_json

    report = evaluate(cfg, args.checkpoint, args.n_scenes, args.score_threshold)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.json").write_text(report_json(report) + "\n")
    print(report_json(report))


def _pe_sim(cfg: RunConfig, args) -> None:
    from .harness.pesim import emit_similarity
    from .harness.train import build_rig, load_checkpoint
    from .model import PETR

    model = load_checkpoint(cfg, args.checkpoint) if args.checkpoint else PETR(cfg.model_config())
    sim = emit_similarity(model, build_rig(cfg), args.anchor, args.out)
    print(f"wrote {len(sim)} heatmaps to {args.out}")


def _ablate(cfg: RunConfig, args) -> None:
    from .harness.ablate import grid_configs, run_grid

    grid_configs(args.grid, cfg)  # reject unknown names before any training
    rows = run_grid(args.grid, cfg, args.out, log=print)
    print(f"wrote {len(rows)} rows to {args.out / f'ablation_{args.grid}.csv'}")


COMMANDS = {"gen-scenes": _gen_scenes, "train": _train, "eval": _eval, "pe-sim": _pe_sim,
            "ablate": _ablate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        where = f"{args.config}: " if args.config else ""
        print(f"error: {where}{exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PetrError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
