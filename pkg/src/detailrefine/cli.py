"""Command-line entry point: ``detailrefine <command> ...``.

Every command accepts ``--config`` (a JSON file, see :mod:`detailrefine.config`),
``--seed`` and repeated ``--set key=value`` overrides; command-specific flags
are shorthands for config keys.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .errors import RefineError

log = logging.getLogger("detailrefine")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="seed for this command's stage")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any dotted config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="detailrefine", description="Reference-guided region refinement at desk scale")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic quadruple corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)

    p = sub.add_parser("train-sft", help="supervised fine-tuning with the weighted region loss")
    _common(p)
    p.add_argument("--data", required=True, help="manifest.jsonl (or its directory)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", help="loss CSV (default: <out>.loss.csv)")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("train-grpo", help="group-relative policy optimisation from an SFT checkpoint")
    _common(p)
    p.add_argument("--init", required=True, help="SFT checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="reward CSV (default: <out>.rewards.csv)")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("refine", help="refine one image region")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--instruction", help="space-separated instruction words (default: derived from the mask)")
    p.add_argument("--tags", default="blur", help="comma-separated degradation tags used for the default instruction")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report-dir", required=True)

    p = sub.add_parser("ablate", help="run ablations over one or more axes")
    _common(p)
    p.add_argument("--axes", required=True, help="comma-separated subset of: rl,pe_mode,lam,loss_mode")
    p.add_argument("--out", help="output directory (default: ablate.out)")
    p.add_argument("--data", help="training manifest (generated when omitted)")
    p.add_argument("--eval-data", help="evaluation manifest (generated when omitted)")

    p = sub.add_parser("report", help="summarise a run directory into CSV, JSON and plots")
    _common(p)
    p.add_argument("--dir", required=True)
    return ap


def _overrides(args, mapping: dict) -> dict:
    out = {}
    for flag, key in mapping.items():
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = val
    for text in args.set:
        key, value = config_mod.parse_assignment(text)
        out[key] = value
    return out


def cmd_gen_data(args, cfg) -> None:
    from .synth import write_corpus

    data = config_mod.section(cfg, "data")
    path = write_corpus(args.out, int(cfg["data"]["count"]), int(cfg["data"]["seed"]), data)
    print(path)


def cmd_train_sft(args, cfg) -> None:
    from .sft import train_sft

    scfg = config_mod.section(cfg, "sft")
    log_path = args.log or f"{args.out}.loss.csv"
    ck = train_sft(args.data, scfg, out_path=args.out, log_path=log_path, resume=args.resume)
    print(f"{args.out} step {ck.step}")


def cmd_train_grpo(args, cfg) -> None:
    from .grpo import train_grpo

    gcfg = config_mod.section(cfg, "grpo")
    log_path = args.log or f"{args.out}.rewards.csv"
    ck = train_grpo(args.init, args.data, gcfg, out_path=args.out, log_path=log_path)
    print(f"{args.out} step {ck.step}")


def cmd_refine(args, cfg) -> None:
    from .evaluation import refine
    from .imaging import load_mask, load_png, save_png
    from .synth import instruction_template, region_description

    inp = load_png(args.input)
    ref = load_png(args.reference)
    mask = load_mask(args.mask)
    if args.instruction:
        words = args.instruction.split()
    else:
        words = instruction_template(args.tags.split(","), region_description(mask))
    ecfg = config_mod.section(cfg, "eval")
    out = refine(args.ckpt, inp, ref, mask, words, ecfg.sample_steps, ecfg.seed)
    save_png(args.out, out)
    print(args.out)


def cmd_eval(args, cfg) -> None:
    from .evaluation import evaluate

    report = evaluate(args.ckpt, args.data, config_mod.section(cfg, "eval"))
    out = report.write(args.report_dir)
    print(json.dumps({"report": str(out), "win_fraction": report.win_fraction, **report.means}, sort_keys=True))


def cmd_ablate(args, cfg) -> None:
    from .experiments import run_ablation

    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    out = Path(args.out or cfg["ablate"]["out"])
    summary = run_ablation(cfg, axes, out, train_manifest=args.data, eval_manifest=args.eval_data)
    print(json.dumps(summary["axes"], sort_keys=True))


def cmd_report(args, cfg) -> None:
    from .reporting import write_report

    paths = write_report(args.dir)
    for p in paths:
        print(p)


COMMANDS = {
    "gen-data": (cmd_gen_data, {"count": "data.count", "seed": "data.seed"}),
    "train-sft": (cmd_train_sft, {"steps": "sft.steps", "seed": "sft.seed"}),
    "train-grpo": (cmd_train_grpo, {"steps": "grpo.steps", "seed": "grpo.seed"}),
    "refine": (cmd_refine, {"seed": "eval.seed"}),
    "eval": (cmd_eval, {"seed": "eval.seed"}),
    "ablate": (cmd_ablate, {}),
    "report": (cmd_report, {}),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    fn, mapping = COMMANDS[args.command]
    try:
        overrides = _overrides(args, mapping)
        if args.command == "ablate" and args.seed is not None:
            overrides["ablate.seeds"] = [args.seed]
        cfg = config_mod.load(args.config, overrides)
        fn(args, cfg)
    except (RefineError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
