"""Figure rendering for run and sweep artifacts.

The bench writers emit delimited files (tokens.csv, sweep_*.csv) plus
JSON reports; this module turns those into PNG figures saved alongside
them. Rendering is read-only over the artifacts, so it can be rerun at
any time, and everything goes through the Agg backend so it works
headless.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

SOURCE_COLORS = {
    "local": "#7f7f7f",
    "cloud-accepted": "#1f77b4",
    "cloud-corrected": "#d62728",
    "pi-adopted": "#2ca02c",
}


def render_run_figures(run_dir: Union[str, Path], out_dir: Optional[Union[str, Path]] = None) -> list[Path]:
    """Render the per-token timeline and source mix for one run."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = _read_tokens(run_dir / "tokens.csv")
    written = []

    fig, ax = plt.subplots(figsize=(8, 4.5))
    by_session = defaultdict(list)
    for row in rows:
        by_session[row["session"]].append(row)
    for session, items in sorted(by_session.items()):
        for src in SOURCE_COLORS:
            xs = [r["timestamp"] for r in items if r["source"] == src]
            ys = [r["position"] for r in items if r["source"] == src]
            if xs:
                ax.scatter(xs, ys, s=8, color=SOURCE_COLORS[src], label=src)
    handles, labels = ax.get_legend_handles_labels()
    seen = dict(zip(labels, handles))
    ax.legend(seen.values(), seen.keys(), fontsize=8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("sequence position")
    ax.set_title("token timeline")
    path = out_dir / "timeline.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    counts = Counter(r["source"] for r in rows)
    names = [s for s in SOURCE_COLORS if counts.get(s)]
    ax.bar(names, [counts[s] for s in names], color=[SOURCE_COLORS[s] for s in names])
    ax.set_ylabel("tokens")
    ax.set_title("token sources")
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    path = out_dir / "sources.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    report_path = run_dir / "report.json"
    if report_path.exists():
        written.append(_render_report_card(json.loads(report_path.read_text()), out_dir))
    return written


def _render_report_card(report: dict, out_dir: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    keys = ["offload_fraction", "acceptance_rate", "prediction_hit_rate"]
    ax.bar(keys, [report.get(k, 0.0) for k in keys], color="#1f77b4")
    ax.set_ylim(0, 1)
    ax.set_title("run rates")
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    path = out_dir / "rates.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def render_sweep_figures(sweep_csv: Union[str, Path], out_dir: Optional[Union[str, Path]] = None) -> list[Path]:
    """Line plots of every numeric column against the swept knob."""
    sweep_csv = Path(sweep_csv)
    out_dir = Path(out_dir) if out_dir is not None else sweep_csv.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(sweep_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[_maybe_float(x) for x in row] for row in reader]
    knob = header[0]
    xs = [r[0] for r in rows]
    written = []
    for col in range(1, len(header)):
        ys = [r[col] for r in rows]
        if not all(isinstance(y, float) for y in ys):
            continue
        if header[col] == knob or ys == xs or len(set(ys)) == 1:
            continue  # the knob itself, or a constant: nothing to see
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel(knob)
        ax.set_ylabel(header[col])
        ax.set_title(f"{header[col]} vs {knob}")
        ax.grid(True, alpha=0.3)
        path = out_dir / f"sweep_{knob}_{header[col]}.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def _maybe_float(text: str):
    try:
        return float(text)
    except ValueError:
        return text


def _read_tokens(path: Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            rows.append(
                {
                    "session": int(raw["session"]),
                    "position": int(raw["position"]),
                    "timestamp": float(raw["timestamp"]),
                    "source": raw["source"],
                    "token": int(raw["token"]),
                }
            )
    return rows
