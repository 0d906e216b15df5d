"""Writers for CSV tables with ``#`` metadata headers and optional SVG plots."""
from __future__ import annotations

import csv
import os

from . import __version__


def header_lines(cfg_json: str, extra: dict | None = None) -> list[str]:
    """Metadata lines: tool version, resolved configuration and run-specific fields."""
    lines = [f"mfbike {__version__}", f"config {cfg_json}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k} {v}")
    return lines


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(float(v))  # plain repr, also for numpy scalars
    if v is None:
        return ""
    return str(v)


def write_csv(path, columns: list[str], rows, headers=()) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in headers:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    """Columns and body rows, skipping ``#`` lines."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def line_plot(path, series: dict, xlabel: str, ylabel: str, title: str = "") -> None:
    """One SVG with a line per entry of ``series`` (label -> (x, y))."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mfbike"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (x, y) in series.items():
        ax.plot(x, y, marker="o", ms=3, label=str(label))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
