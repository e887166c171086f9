from datetime import datetime, timedelta
from typing import Dict, List, Tuple

import numpy as np
from pytest import fixture

from gridleak.blackbox import ForecastQuery, ForecastResponse
from gridleak.classifier import ClassifierSettings
from gridleak.dataio import (
    Dataset,
    SynthConfig,
    generate_dataset,
)
from gridleak.forecaster import ForecastHyperparams, ForecastModel, build_model
from gridleak.numerics import fit_scaler


class ConstantOracle:
    """Answers every query with the same prediction."""

    def __init__(self, value: float, window: int) -> None:
        self.value = value
        self.window = window
        self.queries: List[ForecastQuery] = []

    def handshake(self) -> Dict[str, int]:
        return {"w": self.window, "interval_minutes": 30}

    def query(self, query: ForecastQuery) -> ForecastResponse:
        self.queries.append(query)
        return ForecastResponse(query.id, self.value)


class LastValueOracle(ConstantOracle):
    """Echoes the last reading of the window."""

    def __init__(self, window: int) -> None:
        super().__init__(0.0, window)

    def query(self, query: ForecastQuery) -> ForecastResponse:
        self.queries.append(query)
        return ForecastResponse(query.id, query.window[-1])


class AffineOracle(ConstantOracle):
    """Predicts a fixed affine map of the window mean."""

    def __init__(self, scale: float, shift: float, window: int) -> None:
        super().__init__(0.0, window)
        self.scale = scale
        self.shift = shift

    def query(self, query: ForecastQuery) -> ForecastResponse:
        self.queries.append(query)
        mean = float(np.mean(query.window))
        return ForecastResponse(query.id, self.scale * mean + self.shift)


@fixture
def tiny_hp() -> ForecastHyperparams:
    return ForecastHyperparams(
        lstm_nodes=4,
        fc_nodes=8,
        window=8,
        epochs=2,
        batch_size=64,
    )


@fixture
def tiny_settings() -> ClassifierSettings:
    return ClassifierSettings(
        channels=(4,),
        max_epochs=4,
        batch_size=8,
        folds=2,
        patience=2,
    )


@fixture
def synth_config() -> SynthConfig:
    return SynthConfig(households=12, days=16, seed=3)


@fixture
def dataset(synth_config: SynthConfig) -> Dataset:
    return generate_dataset(synth_config)


@fixture
def tiny_model(tiny_hp: ForecastHyperparams) -> ForecastModel:
    model = build_model(tiny_hp, seed=11, meter_id=1000)
    model.scaler = fit_scaler("minmax", [0.0, 2.5])
    return model


@fixture
def window_and_times() -> Tuple[List[float], List[datetime]]:
    rng = np.random.default_rng(5)
    start = datetime(2009, 7, 14, 6, 30)
    times = [start + timedelta(minutes=30 * i) for i in range(9)]
    return list(rng.random(8)), times
