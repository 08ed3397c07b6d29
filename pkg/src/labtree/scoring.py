"""Metric-derived scoring shared by selection, evaluation, and stages.

The primary validation metric of a node is the accuracy-like validation
series when one exists, else the validation loss (negated so that higher
is always better), else the first recorded series.
"""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

MISSING_SCORE = float("-inf")


def primary_metric_name(metrics: Mapping[str, Sequence[float]]) -> Optional[str]:
    names = sorted(metrics)
    val_like = [n for n in names if "val" in n and "loss" not in n]
    if val_like:
        return val_like[0]
    loss_like = [n for n in names if "val" in n]
    if loss_like:
        return loss_like[0]
    return names[0] if names else None


def primary_metric_score(metrics: Mapping[str, Sequence[float]]) -> float:
    """Scalar score of a node's evidence; higher is better."""
    name = primary_metric_name(metrics)
    if name is None:
        return MISSING_SCORE
    series = metrics[name]
    if not len(series):
        return MISSING_SCORE
    last = float(series[-1])
    return -last if "loss" in name else last


def has_converged(series: Sequence[float], window: int = 3, tolerance: float = 0.05) -> bool:
    """Training-curve convergence: the spread of the trailing window is
    below `tolerance` relative to the window mean."""
    if len(series) < window:
        return False
    tail = [float(x) for x in series[-window:]]
    center = sum(tail) / len(tail)
    denom = max(abs(center), 1e-12)
    return (max(tail) - min(tail)) / denom < tolerance


def dataset_of(metric_name: str) -> Optional[str]:
    """Dataset prefix of a per-dataset metric name (<dataset>__<metric>)."""
    if "__" in metric_name:
        prefix = metric_name.split("__", 1)[0]
        return prefix or None
    return None


def summarize_metrics(metrics: Mapping[str, Sequence[float]]) -> str:
    if not metrics:
        return "(no metrics recorded)"
    lines = []
    for name in sorted(metrics):
        series = [float(x) for x in metrics[name]]
        if series:
            lines.append(f"{name}: last={series[-1]:.6f} over {len(series)} points")
        else:
            lines.append(f"{name}: empty series")
    return "\n".join(lines)
