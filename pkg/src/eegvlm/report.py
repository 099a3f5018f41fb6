"""Metric files, tables and figures for one or more evaluated runs."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import IoFailure, ValidationError  # noqa: E402
from .evaluate import ConfusionMatrix, MetricsBundle, metrics  # noqa: E402
from .stages import CLASS_ORDER  # noqa: E402

METRIC_KEYS = ("accuracy", "mf1", "kappa", "f1.wake", "f1.n1", "f1.n2", "f1.n3", "f1.rem")
COLUMN_TITLES = ("Accuracy", "MF1", "Kappa", "Wake", "N1", "N2", "N3", "REM")

# Okabe-Ito, colour-blind safe
PALETTE = ("#0072B2", "#E69F00", "#009E73", "#D55E00", "#CC79A7", "#56B4E9", "#F0E442", "#000000")

STYLE = {
    "font.family": "sans-serif",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "eegvlm",
}

# keeps PNG/SVG bytes stable across runs
_SAVE_METADATA = {"png": {"Software": None}, "svg": {"Date": None, "Creator": None}}


def _save(fig, path: Path) -> Path:
    fmt = path.suffix.lstrip(".")
    try:
        fig.savefig(path, format=fmt, metadata=_SAVE_METADATA.get(fmt))
    except OSError as exc:
        raise IoFailure(f"could not write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def score_chart(runs: Mapping[str, MetricsBundle], path: str | Path):
    """Grouped bars: overall scores and per-class F1, one bar per run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.0))
        x = np.arange(len(METRIC_KEYS))
        width = 0.8 / max(1, len(runs))
        for i, (name, bundle) in enumerate(runs.items()):
            values = [bundle.as_dict()[k] for k in METRIC_KEYS]
            ax.bar(x + (i - (len(runs) - 1) / 2) * width, values, width, label=name, color=PALETTE[i % len(PALETTE)])
        ax.set_xticks(x, COLUMN_TITLES)
        ax.axvline(2.5, color="0.6", lw=0.8, ls=":")
        ax.set_ylim(min(0.0, ax.get_ylim()[0]), 1.05)
        ax.set_ylabel("score")
        ax.legend(frameon=False, ncols=min(4, len(runs)), loc="upper center", bbox_to_anchor=(0.5, 1.18))
        fig.tight_layout()
    return _save(fig, Path(path))


def draw_confusion(cm: ConfusionMatrix, ax, cmap: str = "Blues"):
    """Heatmap of ``cm`` on ``ax``; returns the image artist."""
    counts = cm.counts
    im = ax.imshow(counts, cmap=cmap, vmin=0, vmax=max(1, counts.max()))
    names = [s.value for s in CLASS_ORDER]
    ax.set_xticks(range(len(names)), names)
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("Predicted stage")
    ax.set_ylabel("True stage")
    threshold = counts.max() / 2 if counts.max() else 1
    for (r, c), v in np.ndenumerate(counts):
        ax.text(c, r, str(v), ha="center", va="center", fontsize=8, color="white" if v > threshold else "black")
    return im


def confusion_heatmap(cm: ConfusionMatrix, path: str | Path, title: str = ""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        draw_confusion(cm, ax)
        if title:
            ax.set_title(title)
        fig.tight_layout()
    return _save(fig, Path(path))


def metrics_table_rows(runs: Mapping[str, MetricsBundle]) -> list[list[str]]:
    rows = [["run", *COLUMN_TITLES]]
    for name, bundle in runs.items():
        d = bundle.as_dict()
        rows.append([name] + [f"{d[k]:.3f}" for k in METRIC_KEYS])
    return rows


def markdown_table(runs: Mapping[str, MetricsBundle]) -> str:
    rows = metrics_table_rows(runs)
    lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    return "\n".join(lines) + "\n"


def write_metrics_file(bundle: MetricsBundle, path: str | Path, metadata: Mapping | None = None) -> Path:
    payload = dict(bundle.as_dict())
    if metadata:
        payload["run"] = dict(metadata)
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_metrics_file(path: str | Path) -> MetricsBundle:
    d = json.loads(Path(path).read_text())
    missing = [k for k in METRIC_KEYS if k not in d]
    if missing:
        raise ValidationError(f"{path}: missing keys {missing}")
    return MetricsBundle(d["accuracy"], tuple(d[k] for k in METRIC_KEYS[3:]), d["mf1"], d["kappa"])


def report(
    bundle: MetricsBundle,
    cm: ConfusionMatrix,
    run_metadata: Mapping,
    out_dir: str | Path,
    name: str = "run",
) -> dict[str, Path]:
    """Write metrics.json, table.csv/.md, scores.png and confusion.png into ``out_dir``."""
    recomputed = metrics(cm)
    if not np.allclose(_values(recomputed), _values(bundle), rtol=0, atol=1e-9):
        raise ValidationError("metrics bundle does not match the confusion matrix")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    runs = {name: bundle}
    paths = {
        "metrics": write_metrics_file(bundle, out / "metrics.json", run_metadata),
        "table_csv": write_csv(metrics_table_rows(runs), out / "table.csv"),
        "table_md": out / "table.md",
        "scores": score_chart(runs, out / "scores.png"),
        "confusion": confusion_heatmap(cm, out / "confusion.png", title=name),
    }
    paths["table_md"].write_text(markdown_table(runs))
    (out / "confusion.csv").write_text(_confusion_csv(cm))
    return paths


def comparison_report(runs: Mapping[str, MetricsBundle], out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "table_csv": write_csv(metrics_table_rows(runs), out / "comparison.csv"),
        "table_md": out / "comparison.md",
        "scores": score_chart(runs, out / "comparison.png"),
    }
    paths["table_md"].write_text(markdown_table(runs))
    return paths


def _values(bundle: MetricsBundle) -> np.ndarray:
    d = bundle.as_dict()
    return np.array([d[k] for k in METRIC_KEYS])


def write_csv(rows: Sequence[Sequence[str]], path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return path


def _confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    names = [s.value for s in CLASS_ORDER]
    w = csv.writer(buf)
    w.writerow(["true\\pred", *names])
    for name, row in zip(names, cm.counts):
        w.writerow([name, *map(int, row)])
    return buf.getvalue()
