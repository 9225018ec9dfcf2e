"""Tables, JSON reports and figures written into run directories."""

from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes independent of the matplotlib version string
_PNG_META = {"Software": None}


def _plain(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_plain) + "\n", encoding="utf-8")


def write_table(path: str | Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    """CSV or TSV depending on the file suffix."""
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    delimiter = "\t" if path.suffix == ".tsv" else ","
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, columns, delimiter=delimiter, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in columns})


def read_table(path: str | Path) -> list[dict]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh, delimiter="\t" if path.suffix == ".tsv" else ","))


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return ";".join(map(str, v))
    return "" if v is None else v


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None, precision: int = 4) -> str:
    """Fixed-width text table for the terminal."""
    if not rows:
        return "(no rows)"
    columns = list(columns or rows[0].keys())

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.{precision}f}"
        return "-" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths)))
              for row in cells]
    return "\n".join(lines)


# -- schema ---------------------------------------------------------------------------------
def report_schema() -> dict:
    text = resources.files("nsva").joinpath("data/report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def schema_errors(report: dict) -> list[str]:
    validator = jsonschema.Draft202012Validator(report_schema())
    return [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
            for e in sorted(validator.iter_errors(report), key=lambda e: list(map(str, e.absolute_path)))]


# -- figures ----------------------------------------------------------------------------------
def _save(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curve(history: Sequence[dict], path: str | Path, title: str = "training loss") -> None:
    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [r["loss"] for r in history], color="C0", lw=1.5, label="train")
    val = [(r["epoch"], r["val_loss"]) for r in history if "val_loss" in r]
    if val:
        ax.plot(*zip(*val), "o", color="C3", label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("NLL per clip")
    if min(r["loss"] for r in history) > 0:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_metric_bars(metrics: dict[str, float], path: str | Path, title: str = "") -> None:
    names = list(metrics)
    fig, ax = plt.subplots(figsize=(max(3.0, 0.7 * len(names) + 1), 3.2))
    ax.bar(names, [metrics[n] for n in names], color="C0")
    for i, n in enumerate(names):
        ax.annotate(f"{metrics[n]:.3f}", (i, metrics[n]), ha="center", va="bottom", fontsize=8)
    ax.set_title(title)
    _save(fig, path)


def plot_ablation(summaries: Sequence[dict], path: str | Path,
                  panels: Iterable[tuple[str, str]] = (("val_loss", "val loss"),
                                                       ("distance_acc", "distance-token acc."))) -> None:
    """One horizontal bar panel per column, rows in table order, seed std as error bars."""
    panels = [(k, lab) for k, lab in panels if any(k in s for s in summaries)]
    labels = [s["row"] for s in summaries]
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 0.35 * len(labels) + 1.5), squeeze=False)
    for ax, (key, lab) in zip(axes[0], panels):
        vals = [s.get(key, math.nan) for s in summaries]
        err = [s.get(f"{key}_std", 0.0) for s in summaries]
        ax.barh(range(len(labels)), vals, xerr=err, color="C0", ecolor="0.3", capsize=2)
        ax.set_yticks(range(len(labels)), labels)
        ax.invert_yaxis()
        ax.set_xlabel(lab)
    _save(fig, path)
