# app/report.py
# Metrics CSV, per-method comparison table and return-vs-target-parameter plots.

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ConfigurationError, ToolkitError  # noqa: E402
from .harness import METHODS, TransferMetrics, write_metrics_csv  # noqa: E402

logger = logging.getLogger(__name__)

TABLE_COLUMNS = [
    "method", "runs", "mean_return", "return_std", "unsafe_trials", "normalized_length",
    "unsafe_episode_rate", "transfer_ratio",
]


@dataclass
class ReportFiles:
    metrics: Path
    table_csv: Path
    table_md: Path
    plots: List[Path] = field(default_factory=list)
    # method -> [(target value, mean return over seeds)]
    series: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)


def _method_order(method: str) -> Tuple[int, str]:
    return (METHODS.index(method) if method in METHODS else len(METHODS), method)


def _sorted(rows: Sequence[TransferMetrics]) -> List[TransferMetrics]:
    return sorted(rows, key=lambda r: (_method_order(r.method), r.seed, r.target_value if r.target_value is not None else -np.inf))


def comparison_table(rows: Sequence[TransferMetrics]) -> List[Dict[str, float]]:
    by_method: Dict[str, List[TransferMetrics]] = defaultdict(list)
    for r in rows:
        by_method[r.method].append(r)
    table = []
    for method in sorted(by_method, key=_method_order):
        rs = by_method[method]
        returns = np.array([r.mean_return for r in rs])
        ratios = [r.transfer_ratio for r in rs if r.ratio_defined and r.transfer_ratio is not None]
        table.append({
            "method": method,
            "runs": len(rs),
            "mean_return": float(returns.mean()),
            "return_std": float(returns.std()),
            "unsafe_trials": float(np.mean([r.unsafe_trials for r in rs])),
            "normalized_length": float(np.mean([r.normalized_length for r in rs])),
            "unsafe_episode_rate": float(np.mean([r.unsafe_episode_rate for r in rs])),
            "transfer_ratio": float(np.mean(ratios)) if ratios else float("nan"),
        })
    return table


def _write_table(table: List[Dict[str, float]], csv_path: Path, md_path: Path) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for row in table:
            w.writerow([row[c] if isinstance(row[c], (str, int)) else repr(row[c]) for c in TABLE_COLUMNS])
    lines = [
        "| method | runs | return | unsafe trials | norm. length | unsafe episodes | transfer ratio |",
        "|---|---|---|---|---|---|---|",
    ]
    for row in table:
        lines.append(
            f"| {row['method']} | {row['runs']} | {row['mean_return']:.1f} ± {row['return_std']:.1f} "
            f"| {row['unsafe_trials']:.1f} | {row['normalized_length']:.2f} | {row['unsafe_episode_rate']:.2f} "
            f"| {row['transfer_ratio']:.2f} |"
        )
    md_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def sweep_series(rows: Sequence[TransferMetrics]) -> Dict[str, List[Tuple[float, float]]]:
    grouped: Dict[str, Dict[float, List[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r.target_value is not None:
            grouped[r.method][r.target_value].append(r.mean_return)
    return {
        m: [(x, float(np.mean(ys))) for x, ys in sorted(points.items())]
        for m, points in sorted(grouped.items(), key=lambda kv: _method_order(kv[0]))
    }


def _plot(series: Dict[str, List[Tuple[float, float]]], xlabel: str, ylabel: str, path: Path) -> Path:
    plt.rcParams["svg.hashsalt"] = "report"
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, points in series.items():
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", frameon=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_report(rows: Sequence[TransferMetrics], out_dir: Union[str, Path]) -> ReportFiles:
    if not rows:
        raise ConfigurationError("emit_report needs metrics for at least one method")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows = _sorted(rows)
        files = ReportFiles(
            metrics=write_metrics_csv(rows, out / "metrics.csv"),
            table_csv=out / "comparison.csv",
            table_md=out / "comparison.md",
        )
        _write_table(comparison_table(rows), files.table_csv, files.table_md)

        files.series = sweep_series(rows)
        if files.series:
            xlabel = next((r.target_field for r in rows if r.target_field), "target parameter")
            files.plots.append(_plot(files.series, xlabel, "mean target return", out / f"return_vs_{xlabel}.svg"))
            lengths = sweep_series([r.model_copy(update={"mean_return": r.normalized_length}) for r in rows])
            files.plots.append(_plot(lengths, xlabel, "normalized rollout length", out / f"length_vs_{xlabel}.svg"))
    except OSError as e:
        raise ToolkitError(f"failed writing report under {out}: {e}") from e
    logger.info("report written to %s (%d rows, %d plots)", out, len(rows), len(files.plots))
    return files
