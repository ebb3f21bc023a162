"""Ablation driver: trains and evaluates the configurations of each requested axis.

Axes (aliases in parentheses):

* ``rl`` (``rl_on_off``): SFT checkpoint vs. the same checkpoint after GRPO.
* ``pe_mode``: offset vs. clone positional IDs, both SFT only.
* ``lam`` (``lambda_zero_vs_default``): GRPO with lambda = 0 vs. the configured lambda.
* ``loss_mode``: weighted-mask vs. plain SFT loss.

All variants share the training corpus, the evaluation corpus and the
per-seed training seeds, so paired comparisons differ only in the axis value.
A finished run is reused when its directory holds a ``run.json`` identical to
the one that would be written, which makes interrupted ablations resumable.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import config as config_mod
from .evaluation import evaluate
from .grpo import train_grpo
from .sft import train_sft
from .synth import write_corpus

log = logging.getLogger(__name__)

AXIS_ALIASES = {
    "rl": "rl",
    "rl_on_off": "rl",
    "pe_mode": "pe_mode",
    "lam": "lam",
    "lambda": "lam",
    "lambda_zero_vs_default": "lam",
    "loss_mode": "loss_mode",
}


def canonical_axes(axes) -> list[str]:
    out = []
    for a in axes:
        if a not in AXIS_ALIASES:
            raise ValueError(f"unknown ablation axis {a!r}; choose from {sorted(AXIS_ALIASES)}")
        if AXIS_ALIASES[a] not in out:
            out.append(AXIS_ALIASES[a])
    return out


def _fresh(run_dir: Path, spec: dict, outputs) -> bool:
    marker = run_dir / "run.json"
    if not marker.exists() or not all((run_dir / o).exists() for o in outputs):
        return False
    return json.loads(marker.read_text(encoding="utf-8")) == spec


def _mark(run_dir: Path, spec: dict) -> None:
    config_mod.dump(spec, run_dir / "run.json")


def ensure_corpus(out: Path, count: int, seed: int, cfg: dict) -> Path:
    data = config_mod.section(cfg, "data")
    spec = {"kind": "corpus", "count": count, "seed": seed, "data": asdict(data)}
    if not _fresh(out, spec, ["manifest.jsonl"]):
        write_corpus(out, count, seed, data)
        _mark(out, spec)
    return out / "manifest.jsonl"


def sft_run(run_dir: Path, manifest: Path, cfg: dict, **changes) -> Path:
    scfg = config_mod.section(cfg, "sft")
    for k, v in changes.items():
        setattr(scfg, k, v)
    spec = {"kind": "sft", "manifest": ckpt_io.file_hash(manifest), "sft": asdict(scfg)}
    ckpt = run_dir / "model.ckpt"
    if not _fresh(run_dir, spec, ["model.ckpt"]):
        log.info("training SFT %s", run_dir)
        train_sft(manifest, scfg, out_path=ckpt, log_path=run_dir / "train.loss.csv")
        _mark(run_dir, spec)
    return ckpt


def grpo_run(run_dir: Path, init: Path, manifest: Path, cfg: dict, **changes) -> Path:
    gcfg = config_mod.section(cfg, "grpo")
    for k, v in changes.items():
        setattr(gcfg, k, v)
    spec = {"kind": "grpo", "init": ckpt_io.file_hash(init), "manifest": ckpt_io.file_hash(manifest), "grpo": asdict(gcfg)}
    ckpt = run_dir / "model.ckpt"
    if not _fresh(run_dir, spec, ["model.ckpt"]):
        log.info("training GRPO %s", run_dir)
        train_grpo(init, manifest, gcfg, out_path=ckpt, log_path=run_dir / "train.rewards.csv")
        _mark(run_dir, spec)
    return ckpt


def eval_run(run_dir: Path, ckpt: Path, manifest: Path, cfg: dict) -> dict:
    ecfg = config_mod.section(cfg, "eval")
    spec = {"kind": "eval", "ckpt": ckpt_io.file_hash(ckpt), "manifest": ckpt_io.file_hash(manifest), "eval": asdict(ecfg)}
    report_dir = run_dir / "eval"
    if not _fresh(report_dir, spec, ["eval_report.json"]):
        evaluate(ckpt, manifest, ecfg).write(report_dir)
        _mark(report_dir, spec)
    with open(report_dir / "eval_report.json", encoding="utf-8") as fh:
        rep = json.load(fh)
    return {"win_fraction": rep["win_fraction"], "composite_ok_rate": rep["composite_ok_rate"], **rep["means"]}


def run_ablation(cfg: dict, axes, out, train_manifest=None, eval_manifest=None) -> dict:
    """Train/evaluate every variant needed by ``axes`` for each seed in ``cfg['ablate']['seeds']``."""
    axes = canonical_axes(axes)
    cfg = copy.deepcopy(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ab = cfg["ablate"]
    if train_manifest is None:
        train_manifest = ensure_corpus(out / "data" / "train", int(cfg["data"]["count"]), int(cfg["data"]["seed"]), cfg)
    if eval_manifest is None:
        eval_manifest = ensure_corpus(out / "data" / "eval", int(ab["eval_count"]), int(ab["eval_seed"]), cfg)
    train_manifest, eval_manifest = Path(train_manifest), Path(eval_manifest)
    default_lam = float(cfg["grpo"]["lam"])
    results: dict[str, dict[str, dict]] = {}

    def record(variant, seed, metrics):
        results.setdefault(variant, {})[str(seed)] = metrics

    for seed in ab["seeds"]:
        sdir = out / f"seed{seed}"
        base = {"seed": int(seed), "init_seed": int(seed)}
        sft_offset = sft_run(sdir / "sft_offset", train_manifest, cfg, pe_mode="offset", loss_mode="weighted_mask", **base)
        record("sft_offset", seed, eval_run(sdir / "sft_offset", sft_offset, eval_manifest, cfg))
        if "pe_mode" in axes:
            ck = sft_run(sdir / "sft_clone", train_manifest, cfg, pe_mode="clone", loss_mode="weighted_mask", **base)
            record("sft_clone", seed, eval_run(sdir / "sft_clone", ck, eval_manifest, cfg))
        if "loss_mode" in axes:
            ck = sft_run(sdir / "sft_plain", train_manifest, cfg, pe_mode="offset", loss_mode="plain", **base)
            record("sft_plain", seed, eval_run(sdir / "sft_plain", ck, eval_manifest, cfg))
        if "rl" in axes or "lam" in axes:
            name = f"grpo_lam{default_lam:g}"
            ck = grpo_run(sdir / name, sft_offset, train_manifest, cfg, lam=default_lam, seed=int(seed))
            record("grpo_default", seed, eval_run(sdir / name, ck, eval_manifest, cfg))
        if "lam" in axes and default_lam != 0.0:
            ck = grpo_run(sdir / "grpo_lam0", sft_offset, train_manifest, cfg, lam=0.0, seed=int(seed))
            record("grpo_lam0", seed, eval_run(sdir / "grpo_lam0", ck, eval_manifest, cfg))

    comparisons = {
        "rl": ("grpo_default", "sft_offset"),
        "pe_mode": ("sft_clone", "sft_offset"),
        "lam": ("grpo_lam0", "grpo_default"),
        "loss_mode": ("sft_plain", "sft_offset"),
    }
    summary = {"seeds": list(ab["seeds"]), "variants": results, "axes": {}}
    for axis in axes:
        a, b = comparisons[axis]
        if a not in results or b not in results:
            continue
        seeds = sorted(results[a])
        diffs = [results[a][s]["masked_mse_in"] - results[b][s]["masked_mse_in"] for s in seeds]
        summary["axes"][axis] = {
            "variant": a,
            "baseline": b,
            "masked_mse_variant": float(np.mean([results[a][s]["masked_mse_in"] for s in seeds])),
            "masked_mse_baseline": float(np.mean([results[b][s]["masked_mse_in"] for s in seeds])),
            "masked_mse_diff_per_seed": diffs,
            "r_total_variant": float(np.mean([results[a][s]["r_total"] for s in seeds])),
            "r_total_baseline": float(np.mean([results[b][s]["r_total"] for s in seeds])),
        }
    config_mod.dump(summary, out / "ablation_summary.json")
    return summary
