"""
Raw-data comparator: the same classifier trained on consumption itself.

Every household becomes a (days x 48) matrix of its most recent full days,
min-max scaled per household. The classifier family and training protocol
are the meta-classifier's, so the two differ only in their input.
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

from joblib import Parallel, delayed
import numpy as np
import pandas as pd

from gridleak.classifier import (
    ClassifierSettings,
    TrainedClassifier,
    fit_classifier,
)
from gridleak.dataio import PROPERTIES, STEPS_PER_DAY, Dataset, HouseholdRecord
from gridleak.errors import ContractError, ShapeError
from gridleak.log import log
from gridleak.numerics import MIN_MAX, Tensor, child_seed, fit_scaler


MIN_DAYS = 14
DEFAULT_MAX_DAYS = 60


@dataclass(frozen=True)
class RawFeatureMatrix:
    """Day-per-row half-hourly consumption of one household."""

    meter_id: int
    values: Tensor

    @property
    def days(self) -> int:
        """Number of rows."""
        return int(self.values.shape[0])

    def last(self, days: int) -> Tensor:
        """The most recent ``days`` rows."""
        if days > self.days:
            raise ShapeError(
                f"Meter {self.meter_id} has {self.days} days, need {days}"
            )
        return self.values[self.days - days :]


def featurize_raw(
    record: HouseholdRecord, max_days: int = DEFAULT_MAX_DAYS
) -> RawFeatureMatrix:
    """
    Arrange the most recent full days of a record one per row.

    Readings before the first midnight and after the last complete day are
    dropped. The matrix is min-max scaled over all its entries.
    """
    if max_days < MIN_DAYS:
        raise ContractError(f"max_days must be >= {MIN_DAYS}")

    start = pd.Timestamp(record.start)
    slot = start.hour * 2 + start.minute // 30
    offset = (STEPS_PER_DAY - slot) % STEPS_PER_DAY
    full_days = (len(record) - offset) // STEPS_PER_DAY
    if full_days < MIN_DAYS:
        raise ContractError(
            f"Meter {record.meter_id} has {max(full_days, 0)} full days, "
            f"need at least {MIN_DAYS}"
        )

    days = min(full_days, max_days)
    end = offset + full_days * STEPS_PER_DAY
    matrix = record.readings[end - days * STEPS_PER_DAY : end].reshape(
        days, STEPS_PER_DAY
    )
    scaler = fit_scaler(MIN_MAX, matrix.reshape(-1))
    return RawFeatureMatrix(record.meter_id, scaler.apply(matrix))


def featurize_dataset(
    dataset: Dataset, max_days: int = DEFAULT_MAX_DAYS
) -> Dict[int, RawFeatureMatrix]:
    """Raw matrices of every household long enough to featurize."""
    features = {}
    for household in dataset:
        try:
            matrix = featurize_raw(household.record, max_days)
        except ContractError as e:
            log.warning("Skipping meter in baseline: %s", e)
            continue
        features[household.record.meter_id] = matrix
    return features


def _stack(
    features: Mapping[int, RawFeatureMatrix], meters: Sequence[int]
) -> Tuple[Tensor, int]:
    days = min(features[meter].days for meter in meters)
    return np.stack([features[meter].last(days) for meter in meters]), days


def train_baseline(
    aux: Dataset,
    prop: str,
    seed: int,
    max_days: int = DEFAULT_MAX_DAYS,
    settings: Optional[ClassifierSettings] = None,
    features: Optional[Mapping[int, RawFeatureMatrix]] = None,
) -> TrainedClassifier:
    """
    Train the raw-data classifier for one property.

    All households are cut to the shortest common number of days.
    """
    if features is None:
        features = featurize_dataset(aux, max_days)
    labels = aux.labels()
    meters = sorted(meter for meter in features if meter in labels)
    if not meters:
        raise ContractError(f"No usable households to train {prop} on")

    inputs, days = _stack(features, meters)
    targets = np.array([labels[m][prop] for m in meters], dtype=np.int64)
    classifier = fit_classifier(
        inputs, targets, settings or ClassifierSettings(), seed, prop
    )
    classifier.metadata["days"] = days
    return classifier


def _train_or_skip(
    aux: Dataset,
    prop: str,
    seed: int,
    max_days: int,
    settings: Optional[ClassifierSettings],
    features: Mapping[int, RawFeatureMatrix],
) -> Tuple[str, Optional[TrainedClassifier], str]:
    try:
        classifier = train_baseline(
            aux, prop, seed, max_days, settings, features
        )
    except ContractError as e:
        return prop, None, str(e)
    return prop, classifier, ""


def train_baselines(
    aux: Dataset,
    seed: int,
    properties: Sequence[str] = PROPERTIES,
    max_days: int = DEFAULT_MAX_DAYS,
    settings: Optional[ClassifierSettings] = None,
    workers: int = 1,
) -> Dict[str, TrainedClassifier]:
    """One raw-data classifier per property, trained in parallel."""
    features = featurize_dataset(aux, max_days)
    results = Parallel(n_jobs=workers)(
        delayed(_train_or_skip)(
            aux,
            prop,
            child_seed(seed, PROPERTIES.index(prop)),
            max_days,
            settings,
            features,
        )
        for prop in properties
    )
    classifiers = {}
    for prop, classifier, error in results:
        if classifier is None:
            log.warning("No baseline for %s: %s", prop, error)
            continue
        classifiers[prop] = classifier
    return classifiers


def predict_baseline(
    classifier: TrainedClassifier, matrix: RawFeatureMatrix
) -> float:
    """Probability of the property from a household's raw matrix."""
    days = int(classifier.metadata["days"])
    return float(classifier.predict_proba(matrix.last(days)[None])[0])


def run_baseline(
    honest: Dataset,
    classifiers: Mapping[str, TrainedClassifier],
    max_days: int = DEFAULT_MAX_DAYS,
    properties: Sequence[str] = PROPERTIES,
) -> pd.DataFrame:
    """(meters x properties) probabilities, like the attack produces."""
    available = [prop for prop in properties if prop in classifiers]
    for prop in properties:
        if prop not in classifiers:
            log.warning("No baseline classifier for %s, skipping", prop)

    features = featurize_dataset(honest, max_days)
    meters = sorted(honest.meter_ids)
    frame = pd.DataFrame(
        np.nan,
        index=pd.Index(meters, name="meter_id"),
        columns=available,
        dtype=np.float64,
    )
    for meter in meters:
        if meter not in features:
            continue
        for prop in available:
            try:
                frame.loc[meter, prop] = predict_baseline(
                    classifiers[prop], features[meter]
                )
            except ShapeError as e:
                log.warning("No baseline score for meter %s: %s", meter, e)
    return frame
