"""Writing an ExperimentReport to CSV, a JSON manifest and SVG figures."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import RECORD_COLUMNS, mean_ignoring_nan, triangle_means
from .runner import RECORD_INTERVENTIONS, ExperimentReport, completed_cells, layer_of

MANIFEST_SCHEMA = "manifest.schema.json"


def manifest_schema() -> dict:
    return json.loads(resources.files("layerlab").joinpath(MANIFEST_SCHEMA).read_text(encoding="utf-8"))


def ensure_writable(out_dir: str | Path) -> Path:
    """Create ``out_dir`` if needed and prove it accepts files; raises OSError otherwise."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not out.is_dir():
        raise NotADirectoryError(f"output path {out} is not a directory")
    fd, probe = tempfile.mkstemp(prefix=".layerlab-", dir=out)
    os.close(fd)
    os.unlink(probe)
    return out


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _matrix_csv(path: Path, matrix: np.ndarray, row_name: str, col_prefix: str) -> Path:
    n_cols = matrix.shape[1]
    header = [row_name] + [f"{col_prefix}{j}" for j in range(n_cols)]
    return _write_csv(path, header, ([i, *matrix[i]] for i in range(matrix.shape[0])))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def build_manifest(report: ExperimentReport, subcommand: str, files: list[str]) -> dict:
    aggregates = {"mean_baseline_auc": report.mean_baseline_auc, "interventions": {}}
    for name in report.interventions:
        if name not in RECORD_INTERVENTIONS:
            continue
        recs = report.records_for(name)
        aggregates["interventions"][name] = {
            "completed": len(recs),
            "mean_auc": mean_ignoring_nan([r.auc for r in recs]),
            "mean_delta": mean_ignoring_nan([r.delta for r in recs]),
            "mean_abs_delta": mean_ignoring_nan([abs(r.delta) for r in recs]),
            "per_layer_mean_auc": None if name == "swap" else report.per_layer_mean(name),
        }
    transfer = {}
    for kind, m in report.transfer.items():
        upper, lower = triangle_means(m) if np.isfinite(m).any() else (math.nan, math.nan)
        transfer[kind] = {
            "completed": report.probe_completed[kind],
            "diagonal": np.diag(m),
            "upper_mean": upper,
            "lower_mean": lower,
        }
    losses = report.training.losses
    manifest = {
        "tool": "layerlab",
        "version": __version__,
        "subcommand": subcommand,
        "config": report.config,
        "seeds": report.seeds,
        "timing": report.timing,
        "training": {
            "source": report.training.source,
            "steps": int(len(losses)),
            "seconds": report.training.seconds,
            "first_loss": float(losses[0]) if len(losses) else None,
            "final_loss": float(losses[-1]) if len(losses) else None,
            "checkpoint": report.training.checkpoint,
        },
        "n_layers": report.n_layers,
        "interventions": report.interventions,
        "datasets": [{"name": n, "baseline_auc": report.baselines[n]} for n in report.datasets],
        "counts": {
            "expected_cells": report.expected_cells,
            "completed_cells": completed_cells(report),
            "failures": len(report.failures),
        },
        "aggregates": aggregates,
        "wtl": {
            name: {"wins": s.wins, "ties": s.ties, "losses": s.losses, "total": s.total, "tie_threshold": s.tie_threshold}
            for name, s in report.wtl.items()
        },
        "transfer": transfer,
        "cosine": None
        if report.cosine is None
        else {"method": "per-row mean", "completed": report.cosine_count},
        "failures": report.failures,
        "files": sorted(files),
    }
    return _json_safe(manifest)


def emit_report(
    report: ExperimentReport,
    out_dir: str | Path,
    formats=("csv", "json", "svg"),
    subcommand: str = "report",
) -> list[Path]:
    """Write every requested artifact into ``out_dir``; returns the paths written."""
    out = ensure_writable(out_dir)
    formats = set(formats)
    written: list[Path] = []
    L = report.n_layers

    if "csv" in formats:
        written.append(_write_csv(out / "records.csv", RECORD_COLUMNS, (r.row() for r in report.records)))
        if report.wtl:
            written.append(_write_csv(
                out / "wtl.csv",
                ("intervention", "wins", "ties", "losses", "total", "tie_threshold"),
                ([n, s.wins, s.ties, s.losses, s.total, s.tie_threshold] for n, s in report.wtl.items()),
            ))
        curves = [i for i in ("skip", "repeat", "early-exit") if i in report.interventions]
        if curves:
            rows = []
            for name in curves:
                means = report.per_layer_mean(name)
                for i in range(L):
                    n = sum(1 for r in report.records_for(name) if layer_of(r.plan) == i)
                    rows.append([name, i, means[i], n])
            written.append(_write_csv(out / "curves.csv", ("intervention", "layer", "mean_auc", "completed"), rows))
        if "swap" in report.interventions:
            written.append(_matrix_csv(out / "swap.csv", report.swap_matrix(), "layer", "layer_"))
        for kind, m in report.transfer.items():
            written.append(_matrix_csv(out / f"transfer_{kind}.csv", m, "train_layer", "eval_layer_"))
        if report.cosine is not None:
            written.append(_matrix_csv(out / "cosine.csv", report.cosine, "layer", "layer_"))
        if len(report.training.losses):
            written.append(_write_csv(
                out / "training_curve.csv", ("step", "loss"), enumerate(report.training.losses.tolist())
            ))

    if "svg" in formats:
        written.extend(_figures(report, out))

    if "json" in formats:
        path = out / "manifest.json"
        names = [p.name for p in written] + [path.name]
        manifest = build_manifest(report, subcommand, names)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
        written.append(path)
    return written


def _figures(report: ExperimentReport, out: Path) -> list[Path]:
    from . import plotting

    L = report.n_layers
    base = report.mean_baseline_auc
    layers = list(range(L))
    paths = []
    if "swap" in report.interventions:
        paths.append(plotting.heatmap(report.swap_matrix(), out / "fig_swap.svg", "AUC after swapping layers i and j",
                                      "layer j", "layer i"))
    for name, title in (("skip", "AUC after skipping one layer"), ("repeat", "AUC after repeating one layer")):
        if name in report.interventions:
            label = name if name == "skip" else f"repeat x{report.config['grid']['repeat_k']}"
            paths.append(plotting.line_chart(layers, {label: report.per_layer_mean(name)}, out / f"fig_{name}.svg",
                                             title, "layer", "mean AUC", reference=base))
    if "early-exit" in report.interventions:
        paths.append(plotting.line_chart(layers, {"early exit": report.per_layer_mean("early-exit")},
                                         out / "fig_early_exit.svg", "AUC when decoding after layer k",
                                         "exit after layer k", "mean AUC", reference=base))
    for kind, m in report.transfer.items():
        paths.append(plotting.heatmap(m, out / f"fig_transfer_{kind}.svg", f"{kind} probe transfer (AUC)",
                                      "evaluated on layer", "trained on layer"))
    if report.cosine is not None:
        paths.append(plotting.heatmap(report.cosine, out / "fig_cosine.svg", "cosine similarity (per-row mean)",
                                      "layer", "layer", vmin=-1.0, vmax=1.0, cmap="RdBu_r"))
    if report.wtl:
        paths.append(plotting.wtl_bars({n: (s.wins, s.ties, s.losses) for n, s in report.wtl.items()},
                                       out / "fig_wtl.svg", "win / tie / loss against the unmodified model"))
    if len(report.training.losses):
        paths.append(plotting.training_curve(report.training.losses, out / "fig_training.svg"))
    return paths
