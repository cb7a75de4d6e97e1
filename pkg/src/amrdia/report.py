"""Evaluation report output: text table, JSONL records, figures.

The table mirrors the usual results layout — one row per system, columns
B-1..B-4, R-1, R-2, R-L, Dist-1..Dist-4, all printed with four decimal
places.  The same numbers go to a line-delimited JSON file (one record
per metric) so other tooling never has to parse the table.  Figures are
rendered headlessly to PNG files.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import ScoreReport


def format_table(report: ScoreReport, system: str = "amrdia") -> str:
    columns = report.columns()
    headers = ["System"] + [label for label, _ in columns]
    row = [system] + [f"{value:.4f}" for _, value in columns]
    widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
    header_line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    value_line = "  ".join(v.rjust(w) for v, w in zip(row, widths))
    # left-align the system name; numbers stay right-aligned
    value_line = system.ljust(widths[0]) + value_line[widths[0] :]
    return header_line + "\n" + value_line + "\n"


def report_records(report: ScoreReport, system: str = "amrdia") -> list[dict]:
    records = [
        {"system": system, "metric": label, "value": value}
        for label, value in report.columns()
    ]
    records.append(
        {"system": system, "metric": "n_examples", "value": report.n_examples}
    )
    return records


def write_report(report: ScoreReport, table_path, system: str = "amrdia") -> Path:
    """Write the text table plus a ``.jsonl`` twin; returns the JSONL path."""
    table_path = Path(table_path)
    table_path.parent.mkdir(parents=True, exist_ok=True)
    table_path.write_text(format_table(report, system))
    jsonl_path = table_path.with_suffix(".jsonl")
    jsonl_path.write_text(
        "".join(json.dumps(r) + "\n" for r in report_records(report, system))
    )
    return jsonl_path


def load_scores(jsonl_path) -> list[tuple[str, float]]:
    pairs = []
    for line in Path(jsonl_path).read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record.get("metric") == "n_examples":
            continue
        pairs.append((str(record["metric"]), float(record["value"])))
    return pairs


def load_losses(jsonl_path) -> list[tuple[int, float]]:
    points = []
    for line in Path(jsonl_path).read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        points.append((int(record["epoch"]), float(record["loss"])))
    return points


def metrics_figure(pairs: list[tuple[str, float]], out_path) -> Path:
    out_path = Path(out_path)
    labels = [label for label, _ in pairs]
    values = [value for _, value in pairs]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.8 * len(pairs)), 4.0))
    ax.bar(range(len(pairs)), values, color="#4878a8")
    ax.set_xticks(range(len(pairs)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel("score")
    ax.set_title("corpus metrics")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def loss_figure(points: list[tuple[int, float]], out_path) -> Path:
    out_path = Path(out_path)
    epochs = [e for e, _ in points]
    losses = [l for _, l in points]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(epochs, losses, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_figures(scores_path, out_dir, losses_path=None) -> list[Path]:
    """Render metric bars (and optionally a loss curve) as PNG files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [metrics_figure(load_scores(scores_path), out_dir / "metrics.png")]
    if losses_path is not None:
        written.append(loss_figure(load_losses(losses_path), out_dir / "loss_curve.png"))
    return written
