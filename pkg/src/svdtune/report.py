"""Tables and figures built from finished run directories."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .baselines import SVD_TOGGLES, ParamReport  # noqa: E402
from .metrics import DiceResult  # noqa: E402


class ReportError(RuntimeError):
    pass


def run_name(run_dir: Path) -> str:
    cfg = run_dir / "config.json"
    if cfg.exists():
        d = json.loads(cfg.read_text())
        method = d.get("method", run_dir.name)
        toggles = {k: v for k, v in (d.get("toggles") or {}).items() if not v}
        if toggles:
            method += " (no " + ", ".join(sorted(toggles)) + ")"
        return method
    return run_dir.name


def load_runs(run_dirs: Sequence) -> Dict[str, dict]:
    """name -> {"dir", "eval", "params"}; every run needs eval.json and param_report.json."""
    runs: Dict[str, dict] = {}
    for d in map(Path, run_dirs):
        missing = [f for f in ("eval.json", "param_report.json") if not (d / f).exists()]
        if missing:
            raise ReportError(f"run directory {d} is missing {', '.join(missing)}")
        name = run_name(d)
        if name in runs:
            name = f"{name} [{d.name}]"
        runs[name] = {
            "dir": str(d),
            "eval": DiceResult.from_dict(json.loads((d / "eval.json").read_text())),
            "params": ParamReport.from_dict(json.loads((d / "param_report.json").read_text())),
        }
    return runs


def dice_table(results: Dict[str, DiceResult]) -> str:
    """Markdown table: one row per method, one column per class, then the average."""
    if not results:
        raise ReportError("no results to tabulate")
    classes: List[str] = list(next(iter(results.values())).per_class)
    lines = ["| Method | " + " | ".join(classes) + " | Avg. |", "|" + "---|" * (len(classes) + 2)]
    for name, r in results.items():
        cells = [f"{r.per_class[c]:.2f}" if c in r.per_class else "-" for c in classes]
        lines.append(f"| {name} | " + " | ".join(cells) + f" | {r.average:.2f} |")
    return "\n".join(lines) + "\n"


def param_chart(reports: Dict[str, ParamReport], path) -> Path:
    """Horizontal bars of trainable parameter counts on a log axis, each bar labelled."""
    names = list(reports)
    counts = [reports[n].trainable for n in names]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(names) + 1.2))
    y = np.arange(len(names))
    ax.barh(y, [max(c, 1) for c in counts], color="tab:blue")
    ax.set_yticks(y, names)
    ax.set_xscale("log")
    ax.set_xlabel("trainable parameters")
    for yi, n in zip(y, names):
        r = reports[n]
        ax.text(max(r.trainable, 1), yi, f" {r.trainable:,} ({100 * r.fraction:.2f}%)", va="center", fontsize=8)
    ax.set_xlim(1, max(max(counts), 10) * 30)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def ablation_table(ablation: dict) -> str:
    """Markdown version of the toggle ablation: a check per enabled component, mean and spread."""
    head = "| Row | " + " | ".join(SVD_TOGGLES) + " | DSC mean | DSC std |"
    lines = [head, "|" + "---|" * (len(SVD_TOGGLES) + 3)]
    for row in ablation["rows"]:
        if row["method"] == "svd":
            marks = ["x" if row["toggles"].get(t, True) else "" for t in SVD_TOGGLES]
        else:
            marks = ["n/a"] * len(SVD_TOGGLES)
        lines.append(f"| {row['name']} | " + " | ".join(marks)
                     + f" | {row['mean']:.3f} | {np.std(row['dsc']):.3f} |")
    return "\n".join(lines) + "\n"


def ablation_chart(ablation: dict, path) -> Path:
    names = [r["name"] for r in ablation["rows"]]
    means = [r["mean"] for r in ablation["rows"]]
    stds = [float(np.std(r["dsc"])) for r in ablation["rows"]]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(names, means, yerr=stds, color="tab:green", capsize=3)
    ax.set_ylabel("target avg DSC")
    ax.set_ylim(0, 1)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def build_report(run_dirs: Sequence = (), out_dir="report", ablation: Optional[dict] = None) -> Dict[str, str]:
    """Write the DSC table, parameter chart and (optionally) the ablation table into ``out_dir``.

    Returns a mapping of artifact name to path.
    """
    if not run_dirs and ablation is None:
        raise ReportError("nothing to report: give run directories and/or an ablation result")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: Dict[str, str] = {}
    if run_dirs:
        runs = load_runs(run_dirs)
        results = {n: r["eval"] for n, r in runs.items()}
        reports = {n: r["params"] for n, r in runs.items()}
        (out / "dice_table.md").write_text(dice_table(results))
        (out / "dice_table.json").write_text(json.dumps(
            {n: {"per_class": r.per_class, "average": r.average} for n, r in results.items()}, indent=1))
        (out / "params.json").write_text(json.dumps({n: p.to_dict() for n, p in reports.items()}, indent=1))
        written["dice_table"] = str(out / "dice_table.md")
        written["params"] = str(param_chart(reports, out / "params.png"))
    if ablation is not None:
        (out / "ablation.md").write_text(ablation_table(ablation))
        (out / "ablation.json").write_text(json.dumps(ablation, indent=1))
        written["ablation"] = str(out / "ablation.md")
        written["ablation_chart"] = str(ablation_chart(ablation, out / "ablation.png"))
    return written
