"""Summaries of a run directory: a CSV and JSON digest plus PNG training curves.

The directory is searched recursively for SFT loss logs (``*.loss.csv``),
reward logs (``*.rewards.csv``) and evaluation reports (``eval_report.json``).
Everything written here is a deterministic function of those files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PNG_META = {"Software": None}


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    data = np.array([[float(x) for x in r] for r in body], dtype=np.float64).reshape(len(body), len(header))
    return header, data


def window_means(values: np.ndarray, frac: float = 0.1) -> tuple[float, float, float, float]:
    """Mean and standard error of the first and last ``frac`` of a series."""
    n = max(1, int(round(len(values) * frac)))
    first, last = values[:n], values[-n:]

    def se(x):
        return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0

    return float(first.mean()), se(first), float(last.mean()), se(last)


def smooth(values: np.ndarray, width: int) -> np.ndarray:
    if width <= 1 or len(values) < width:
        return values
    kernel = np.ones(width) / width
    return np.convolve(values, kernel, mode="valid")


def _label(path: Path, root: Path) -> str:
    rel = path.relative_to(root).as_posix()
    for suffix in (".loss.csv", ".rewards.csv", "/eval_report.json"):
        if rel.endswith(suffix):
            return rel[: -len(suffix)]
    return rel


def _plot(series: dict[str, tuple[np.ndarray, np.ndarray]], ylabel: str, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4), dpi=100)
    for name, (x, y) in sorted(series.items()):
        ax.plot(x, y, label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)


def write_report(run_dir) -> list[Path]:
    """Scan ``run_dir`` and write ``summary.csv``, ``summary.json`` and curve plots into it."""
    root = Path(run_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"no such run directory: {root}")
    summary: dict = {"sft": {}, "grpo": {}, "eval": {}}
    loss_curves, reward_curves, kl_curves = {}, {}, {}
    for path in sorted(root.rglob("*.loss.csv")):
        header, data = read_csv(path)
        name = _label(path, root)
        steps, loss = data[:, 0], data[:, header.index("loss")]
        w = max(1, len(loss) // 50)
        loss_curves[name] = (steps[w - 1 :], smooth(loss, w))
        f, _, l, _ = window_means(loss)
        summary["sft"][name] = {"steps": int(steps[-1]) if len(steps) else 0, "loss_first10": f, "loss_last10": l}
    for path in sorted(root.rglob("*.rewards.csv")):
        header, data = read_csv(path)
        name = _label(path, root)
        steps = data[:, 0]
        total = data[:, header.index("mean_total")]
        w = max(1, len(total) // 20)
        reward_curves[name] = (steps[w - 1 :], smooth(total, w))
        kl_curves[name] = (steps, data[:, header.index("kl")])
        f, fse, l, lse = window_means(total)
        summary["grpo"][name] = {
            "steps": int(steps[-1]) if len(steps) else 0,
            "reward_first10": f,
            "reward_first10_se": fse,
            "reward_last10": l,
            "reward_last10_se": lse,
            "mean_clip_frac": float(data[:, header.index("clip_frac")].mean()),
        }
    for path in sorted(root.rglob("eval_report.json")):
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        summary["eval"][_label(path, root)] = {
            "count": rep["count"],
            "win_fraction": rep["win_fraction"],
            "composite_ok_rate": rep["composite_ok_rate"],
            **rep["means"],
        }
    written = []
    with open(root / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(root / "summary.json")
    with open(root / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "name", "metric", "value"])
        for kind in ("sft", "grpo", "eval"):
            for name, metrics in sorted(summary[kind].items()):
                for metric, value in sorted(metrics.items()):
                    w.writerow([kind, name, metric, "" if value is None else repr(value)])
    written.append(root / "summary.csv")
    if loss_curves:
        _plot(loss_curves, "weighted loss (smoothed)", "SFT training loss", root / "sft_loss.png")
        written.append(root / "sft_loss.png")
    if reward_curves:
        _plot(reward_curves, "mean total reward (smoothed)", "GRPO reward", root / "grpo_reward.png")
        _plot(kl_curves, "KL to reference", "GRPO KL", root / "grpo_kl.png")
        written += [root / "grpo_reward.png", root / "grpo_kl.png"]
    return written
