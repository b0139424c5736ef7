"""Command line entry point: ``morphalign <stage> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from morphalign.pipeline.config import ConfigError, load_config
from morphalign.refiner.checkpoint import CheckpointError

log = logging.getLogger("morphalign")

STAGES = ("perturb", "chain", "compose", "train", "refine", "eval", "report")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides config key seed)")
    p.add_argument("--pair", help="restrict the stage to one pair id")
    p.add_argument("--split", help="restrict the stage to a split (train/val/test/all)")
    p.add_argument("--jobs", type=int, help="worker processes for per-pair stages")
    p.add_argument("--dataset-root", help="source images (overrides config and $MORPHALIGN_DATASET_ROOT)")
    p.add_argument("--work-dir", help="output directory of the run")
    p.add_argument("--K", type=int, help="morph chain length")
    p.add_argument("--flow-source", choices=["builtin_estimator", "external_flo_dir", "analytic_gt", "corrupted_gt"])
    p.add_argument("--external-flow-dir")
    p.add_argument("--mask-policy", choices=["valid", "interior", "full"])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set refiner.epochs=5")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "perturb": "perturb source images and write the split manifest",
        "chain": "build morph chains and step flows",
        "compose": "compose step flows into one flow per pair",
        "train": "train the residual refiner",
        "refine": "refine composed flows with the trained refiner",
        "eval": "evaluate alignment variants",
        "report": "write summary tables and figures",
        "run": "run every stage in order",
        "scenes": "write procedural source images",
    }
    for name in (*STAGES, "run", "scenes"):
        p = sub.add_parser(name, help=helps[name])
        _common(p)
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from models/last.ckpt")
        if name in ("report", "run"):
            p.add_argument("--delimiter", default=",", help="summary table delimiter (use 'tab' for TSV)")
        if name == "scenes":
            p.add_argument("--count", type=int, default=20)
            p.add_argument("--size", type=int, default=256)
            p.add_argument("--out", required=True)
        if name == "run":
            p.add_argument("--skip-train", action="store_true",
                           help="reuse an existing models/best.ckpt instead of training")
    return parser


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "jobs", "dataset_root", "work_dir", "K", "flow_source", "external_flow_dir", "mask_policy"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def write_scenes(out: Path, count: int, size: int, seed: int) -> list:
    from morphalign.flowcore import write_image
    from morphalign.synthmotion import item_seed, synthetic_scene

    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = out / f"scene_{i:04d}.png"
        write_image(synthetic_scene(item_seed(seed, i), size, size), p)
        paths.append(str(p))
    return paths


def dispatch(args) -> dict:
    from morphalign.pipeline import stages
    from morphalign.pipeline.report import cmd_report

    cfg = load_config(args.config, _overrides(args))
    cmd = args.command
    delim = getattr(args, "delimiter", ",")
    delim = "\t" if delim in ("tab", "\\t") else delim
    if cmd == "scenes":
        return {"written": len(write_scenes(Path(args.out), args.count, args.size, cfg.seed))}
    if cmd == "perturb":
        return {"splits": stages.cmd_perturb(cfg)}
    if cmd == "chain":
        return {"pairs": stages.cmd_chain(cfg, args.split, args.pair)}
    if cmd == "compose":
        return {"pairs": stages.cmd_compose(cfg, args.split, args.pair)}
    if cmd == "train":
        return stages.cmd_train(cfg, resume=args.resume)
    if cmd == "refine":
        return {"pairs": stages.cmd_refine(cfg, args.split, args.pair)}
    if cmd == "eval":
        rep = stages.cmd_eval(cfg, args.split, args.pair)
        return {"aggregate": rep.aggregate(), "missing": rep.missing}
    if cmd == "report":
        return cmd_report(cfg, args.split, delim, args.pair)
    # run: every stage
    out = {"splits": stages.cmd_perturb(cfg)}
    stages.cmd_chain(cfg)
    stages.cmd_compose(cfg)
    if not args.skip_train:
        out["train"] = stages.cmd_train(cfg)
    stages.cmd_refine(cfg)
    out["aggregate"] = stages.cmd_eval(cfg).aggregate()
    out["report"] = cmd_report(cfg, None, delim)
    return out


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from morphalign.pipeline.stages import StageError
    from morphalign.refiner.trainer import TrainingError

    try:
        result = dispatch(args)
    except StageError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = "config", str(exc)
    except CheckpointError as exc:
        code, msg = "checkpoint", str(exc)
    except TrainingError as exc:
        code, msg = "training", str(exc)
    except (OSError, ValueError) as exc:
        code, msg = type(exc).__name__, str(exc)
    else:
        print(json.dumps({"command": args.command, "status": "ok", "result": result},
                         sort_keys=True, default=_json_default))
        return 0
    print(json.dumps({"command": args.command, "status": "error", "error": code, "message": msg}, sort_keys=True),
          file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
