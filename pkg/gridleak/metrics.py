"""Leakage metrics and the Baseline / Random / Adversary report."""

from pathlib import Path
from typing import (
    Dict,
    Iterable,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd

from gridleak.dataio import PROPERTY_NAMES, PropertyVector
from gridleak.errors import ContractError, ShapeError
from gridleak.log import log


BASELINE = "baseline"
RANDOM = "random"
ADVERSARY = "adversary"
SOURCES = (BASELINE, RANDOM, ADVERSARY)
SOURCE_NAMES = {
    BASELINE: "Baseline",
    RANDOM: "Random",
    ADVERSARY: "Adversary",
}

AVERAGE = "average"
REPORT_COLUMNS = ["property", "source", "auc", "f1", "precision", "recall"]

# AUC of guessing; the report prints it next to the Monte-Carlo reference
ANALYTIC_RANDOM_AUC = 50.0

REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"


def _binary(
    scores: ArrayLike, labels: ArrayLike
) -> Tuple[NDArray[np.float64], NDArray[np.int64]]:
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    truth = np.asarray(labels).reshape(-1)
    if values.size == 0:
        raise ContractError("Cannot evaluate empty scores")
    if values.size != truth.size:
        raise ShapeError(f"{values.size} scores but {truth.size} labels")
    if not np.isin(truth, (0, 1)).all():
        raise ContractError("Labels must be 0 or 1")
    if not np.all(np.isfinite(values)):
        raise ContractError("Scores must be finite")
    truth = truth.astype(np.int64)
    if truth.min() == truth.max():
        raise ContractError(
            "Both classes must be present to evaluate, "
            f"got only label {int(truth[0])}"
        )
    return values, truth


def roc_auc(scores: ArrayLike, labels: ArrayLike) -> float:
    """
    Area under the ROC curve by the trapezoidal rule.

    Tied scores form one threshold, which makes the area equal to the
    pairwise statistic with ties counted as one half.
    """
    values, truth = _binary(scores, labels)

    order = np.argsort(-values, kind="mergesort")
    ranked, hits = values[order], truth[order]
    # last index of every group of equal scores
    cuts = np.r_[np.flatnonzero(np.diff(ranked)), ranked.size - 1]
    tps = np.cumsum(hits)[cuts].astype(np.float64)
    fps = cuts + 1 - tps

    tpr = np.r_[0.0, tps / tps[-1]]
    fpr = np.r_[0.0, fps / fps[-1]]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def pairwise_auc(scores: ArrayLike, labels: ArrayLike) -> float:
    """Share of positive/negative pairs ranked correctly, ties count 1/2."""
    values, truth = _binary(scores, labels)
    positive = values[truth == 1][:, None]
    negative = values[truth == 0][None, :]
    wins = (positive > negative) + 0.5 * (positive == negative)
    return float(wins.mean())


def macro_prf1(
    scores: ArrayLike, labels: ArrayLike, threshold: float = 0.5
) -> Tuple[float, float, float]:
    """
    Macro precision, recall and F1 of ``scores >= threshold``.

    Each class is treated as the positive one in turn; F1 is the mean of the
    per-class F1 values. Terms with a zero denominator count as 0.
    """
    values, truth = _binary(scores, labels)
    predicted = (values >= threshold).astype(np.int64)

    precisions, recalls, f1s = [], [], []
    for cls in (0, 1):
        tp = float(np.sum((predicted == cls) & (truth == cls)))
        fp = float(np.sum((predicted == cls) & (truth != cls)))
        fn = float(np.sum((predicted != cls) & (truth == cls)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (
            2.0 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)

    return (
        float(np.mean(precisions)),
        float(np.mean(recalls)),
        float(np.mean(f1s)),
    )


class MetricRow(NamedTuple):
    """Scores of one source on one property, in percent."""

    property: str
    source: str
    auc: Optional[float]
    f1: Optional[float]
    precision: Optional[float]
    recall: Optional[float]

    @property
    def is_blank(self) -> bool:
        """True when the source produced no scores for the property."""
        return self.auc is None


def metric_row(
    prop: str,
    source: str,
    scores: ArrayLike,
    labels: ArrayLike,
    threshold: float = 0.5,
) -> MetricRow:
    """All four metrics of one score vector, in percent."""
    precision, recall, f1 = macro_prf1(scores, labels, threshold)
    return MetricRow(
        prop,
        source,
        100.0 * roc_auc(scores, labels),
        100.0 * f1,
        100.0 * precision,
        100.0 * recall,
    )


def random_reference(
    labels: ArrayLike, seed: int, trials: int = 200, prop: str = ""
) -> MetricRow:
    """Mean metrics of ``trials`` uniform-random score vectors."""
    truth = np.asarray(labels).reshape(-1)
    if trials < 1:
        raise ContractError("random_reference needs at least one trial")
    rng = np.random.default_rng(seed)

    rows = [
        metric_row(prop, RANDOM, rng.random(truth.size), truth)
        for _ in range(trials)
    ]
    return MetricRow(
        prop,
        RANDOM,
        float(np.mean([row.auc for row in rows])),
        float(np.mean([row.f1 for row in rows])),
        float(np.mean([row.precision for row in rows])),
        float(np.mean([row.recall for row in rows])),
    )


def evaluate(
    scores: pd.DataFrame,
    labels: Mapping[int, PropertyVector],
    source: str,
    threshold: float = 0.5,
) -> List[MetricRow]:
    """
    Metrics of a (meters x properties) probability frame.

    Properties whose labels hold a single class among the scored meters
    cannot be evaluated and are skipped with a warning.
    """
    missing = [meter for meter in scores.index if meter not in labels]
    if missing:
        raise ContractError(f"No labels for meters {missing}")

    rows = []
    for prop in scores.columns:
        column = scores[prop].dropna()
        if column.empty:
            log.warning("No %s scores for %s", source, prop)
            continue
        if ((column < 0) | (column > 1)).any():
            raise ContractError(f"{source} scores for {prop} leave [0, 1]")
        truth = np.array([labels[meter][prop] for meter in column.index])
        if truth.min() == truth.max():
            log.warning(
                "Skipping %s for %s: honest labels hold a single class",
                source,
                prop,
            )
            continue
        rows.append(
            metric_row(prop, source, column.to_numpy(), truth, threshold)
        )
    return rows


def random_rows(
    labels: Mapping[int, PropertyVector],
    meters: Sequence[int],
    properties: Iterable[str],
    seed: int,
    trials: int = 200,
) -> List[MetricRow]:
    """Random reference rows for each property over ``meters``."""
    rows = []
    for index, prop in enumerate(properties):
        truth = np.array([labels[meter][prop] for meter in meters])
        if truth.size == 0 or truth.min() == truth.max():
            log.warning("Skipping random reference for %s", prop)
            continue
        rows.append(random_reference(truth, seed + index, trials, prop))
    return rows


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    present = [value for value in values if value is not None]
    return float(np.mean(present)) if present else None


class LeakageReport:
    """Per-property rows for every source plus the Average block."""

    def __init__(
        self, rows: List[MetricRow], queries: Optional[int] = None
    ) -> None:
        self.rows = rows
        self.queries = queries

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, prop: str, source: str) -> MetricRow:
        """Look up one row."""
        for row in self.rows:
            if row.property == prop and row.source == source:
                return row
        raise KeyError((prop, source))

    def average(self, source: str) -> MetricRow:
        """The Average row of ``source``."""
        return self.row(AVERAGE, source)

    def frame(self) -> pd.DataFrame:
        """Rows as a DataFrame with the report columns."""
        frame = pd.DataFrame(
            [row._asdict() for row in self.rows], columns=REPORT_COLUMNS
        )
        return frame.astype({name: float for name in REPORT_COLUMNS[2:]})

    def csv(self) -> str:
        """``property,source,auc,f1,precision,recall`` with 2 decimals."""
        return str(
            self.frame().to_csv(
                index=False, float_format="%.2f", lineterminator="\n"
            )
        )

    def render(self) -> str:
        """Text table in the layout of the published results."""
        display = self.frame()
        display["property"] = [
            "Average"
            if prop == AVERAGE
            else PROPERTY_NAMES.get(prop, prop)
            for prop in display["property"]
        ]
        display["source"] = display["source"].map(SOURCE_NAMES)
        # print the property once per block
        display.loc[display["property"].duplicated(), "property"] = ""
        display.columns = [
            "Significant Property",
            "Model",
            "AUC",
            "F1",
            "Precision",
            "Recall",
        ]
        table = display.to_string(
            index=False, na_rep="", float_format=lambda v: f"{v:.2f}"
        )
        footer = [
            "",
            f"Random AUC (analytic): {ANALYTIC_RANDOM_AUC:.2f}",
        ]
        if self.queries is not None:
            footer.append(f"Honest-oracle queries: {self.queries}")
        return table + "\n" + "\n".join(footer) + "\n"

    def write(self, directory: Path) -> Tuple[Path, Path]:
        """Write ``report.csv`` and ``report.txt`` into ``directory``."""
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / REPORT_CSV
        txt_path = directory / REPORT_TXT
        csv_path.write_text(self.csv(), encoding="utf-8")
        txt_path.write_text(self.render(), encoding="utf-8")
        return csv_path, txt_path


def _property_order(prop: str) -> str:
    return PROPERTY_NAMES.get(prop, prop)


def build_report(
    rows: Iterable[MetricRow], queries: Optional[int] = None
) -> LeakageReport:
    """
    Assemble the report from per-property rows.

    Properties are ordered alphabetically by display name, sources as
    Baseline, Random, Adversary. A missing source yields a blank row. The
    Average block holds, per source, the unweighted mean over properties.
    """
    indexed: Dict[Tuple[str, str], MetricRow] = {}
    for row in rows:
        if row.source not in SOURCES:
            raise ContractError(f"Unknown source {row.source!r}")
        indexed[(row.property, row.source)] = row
    if not indexed:
        raise ContractError("Cannot build a report without rows")

    properties = sorted({prop for prop, _ in indexed}, key=_property_order)

    ordered: List[MetricRow] = []
    for prop in properties:
        for source in SOURCES:
            row = indexed.get((prop, source))
            if row is None:
                log.warning("No %s row for %s", source, prop)
                row = MetricRow(prop, source, None, None, None, None)
            ordered.append(row)

    for source in SOURCES:
        block = [row for row in ordered if row.source == source]
        ordered.append(
            MetricRow(
                AVERAGE,
                source,
                _mean(row.auc for row in block),
                _mean(row.f1 for row in block),
                _mean(row.precision for row in block),
                _mean(row.recall for row in block),
            )
        )

    return LeakageReport(ordered, queries)


def read_report(path: Path) -> LeakageReport:
    """Load the rows of a ``report.csv``."""
    frame = pd.read_csv(path, keep_default_na=False, na_values=[""])
    rows = [
        MetricRow(
            str(record["property"]),
            str(record["source"]),
            *(
                None if pd.isna(record[column]) else float(record[column])
                for column in REPORT_COLUMNS[2:]
            ),
        )
        for record in frame.to_dict("records")
    ]
    return LeakageReport(rows)
