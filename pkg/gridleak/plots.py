"""Figures written next to the sweep CSV and the leakage report."""

from pathlib import Path
from typing import Sequence

import matplotlib


matplotlib.use("Agg")

from matplotlib import pyplot  # noqa: E402
import numpy as np  # noqa: E402

from gridleak.dataio import PROPERTY_NAMES  # noqa: E402
from gridleak.forecaster import SweepRow  # noqa: E402
from gridleak.metrics import (  # noqa: E402
    AVERAGE,
    SOURCE_NAMES,
    SOURCES,
    LeakageReport,
)


def plot_sweep(rows: Sequence[SweepRow], path: Path) -> None:
    """Model size in bytes and test MAE per architecture."""
    labels = [row.size_label for row in rows]
    positions = np.arange(len(rows))

    figure, size_axis = pyplot.subplots(figsize=(7, 4))
    size_axis.bar(
        positions,
        [row.param_bytes for row in rows],
        color="tab:blue",
        label="model size",
    )
    if rows:
        size_axis.axhline(
            rows[0].data_bytes,
            color="tab:gray",
            linestyle="--",
            label="data size",
        )
    size_axis.set_yscale("log")
    size_axis.set_ylabel("bytes")
    size_axis.set_xticks(positions)
    size_axis.set_xticklabels(labels, rotation=30, ha="right")

    mae_axis = size_axis.twinx()
    mae_axis.plot(
        positions,
        [row.test_mae for row in rows],
        color="tab:red",
        marker="o",
        label="MAE",
    )
    mae_axis.set_ylabel("test MAE (kWh)")

    handles = [
        *size_axis.get_legend_handles_labels()[0],
        *mae_axis.get_legend_handles_labels()[0],
    ]
    size_axis.legend(handles=handles, loc="upper left")
    figure.tight_layout()

    path.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(path)
    pyplot.close(figure)


def plot_report(report: LeakageReport, metric: str, path: Path) -> None:
    """Grouped bars of ``metric`` (``auc`` or ``f1``) per property."""
    properties = []
    for row in report.rows:
        if row.property != AVERAGE and row.property not in properties:
            properties.append(row.property)
    properties.append(AVERAGE)

    positions = np.arange(len(properties))
    width = 0.8 / len(SOURCES)

    figure, axis = pyplot.subplots(figsize=(9, 4))
    for index, source in enumerate(SOURCES):
        values = []
        for prop in properties:
            value = getattr(report.row(prop, source), metric)
            values.append(np.nan if value is None else value)
        axis.bar(
            positions + (index - 1) * width,
            values,
            width,
            label=SOURCE_NAMES[source],
        )

    axis.set_xticks(positions)
    axis.set_xticklabels(
        [
            "Average" if prop == AVERAGE else PROPERTY_NAMES.get(prop, prop)
            for prop in properties
        ],
        rotation=30,
        ha="right",
        fontsize=8,
    )
    axis.set_ylim(0, 100)
    axis.set_ylabel(metric.upper())
    axis.legend()
    figure.tight_layout()

    path.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(path)
    pyplot.close(figure)
