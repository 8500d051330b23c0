"""Static figures for run records and sweeps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    # fixed metadata keeps PNG output stable across reruns
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def method_comparison(pivot: dict, metric: str, path, title: str | None = None) -> Path:
    """Grouped bars: one group per victim, one bar per method.

    ``pivot`` is ``{victim: {method: {metric: value}}}``.
    """
    victims = list(pivot)
    methods: list[str] = []
    for v in victims:
        methods.extend(m for m in pivot[v] if m not in methods)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(victims) * max(1, len(methods)) / 3, 3.0))
        width = 0.8 / max(1, len(methods))
        x = np.arange(len(victims))
        for i, m in enumerate(methods):
            vals = [pivot[v].get(m, {}).get(metric, np.nan) for v in victims]
            ax.bar(x + (i - (len(methods) - 1) / 2) * width, vals, width, label=m)
        ax.set_xticks(x, victims)
        ax.set_ylabel(metric)
        ax.set_title(title or f"{metric} by method")
        ax.legend(fontsize=7, ncol=min(3, len(methods)))
        fig.tight_layout()
        return _save(fig, path)


def sweep_lines(rows: list[dict], parameter: str, metric: str, path) -> Path:
    """One line per (victim, method) across the swept values.

    ``rows`` carry ``value``, ``victim``, ``method``, ``metric`` and ``mean``.
    """
    series: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for r in rows:
        if r["metric"] == metric:
            series.setdefault((r["victim"], r["method"]), []).append((float(r["value"]), float(r["mean"])))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for (victim, method), pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=f"{victim} / {method}")
        ax.set_xlabel(parameter)
        ax.set_ylabel(metric)
        ax.legend(fontsize=6)
        fig.tight_layout()
        return _save(fig, path)
