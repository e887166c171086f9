from datetime import datetime
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pandas as pd
from pytest import approx, mark, raises
from pytest_mock import MockerFixture

from gridleak import forecaster
from gridleak.dataio import HouseholdRecord, SynthConfig, generate_dataset
from gridleak.errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    ShapeError,
)
from gridleak.forecaster import (
    SWEEP_COLUMNS,
    ForecastHyperparams,
    ForecastModel,
    build_model,
    doubling_sizes,
    encode_times,
    load_models,
    parameter_count,
    random_search,
    sample_candidates,
    size_label,
    size_sweep,
    train_forecaster,
    train_forecasters,
    write_sweep_csv,
)
from gridleak.numerics import as_node


def _record(meter_id: int, values: np.ndarray) -> HouseholdRecord:
    return HouseholdRecord(meter_id, values, datetime(2009, 7, 14))


def _daily_series(days: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    hours = np.arange(days * 48) / 2.0
    shape = 0.5 + 0.4 * np.sin(2 * np.pi * hours / 24.0)
    return shape + 0.05 * rng.random(hours.size)


@mark.parametrize(
    "lstm_nodes,fc_nodes,expected",
    [(8, 16, 441), (16, 32, 1393), (1, 1, 21)],
)
def test_parameter_count(
    lstm_nodes: int, fc_nodes: int, expected: int
) -> None:
    hp = ForecastHyperparams(lstm_nodes=lstm_nodes, fc_nodes=fc_nodes)

    assert parameter_count(lstm_nodes, fc_nodes) == expected
    assert build_model(hp, seed=0).parameter_count == expected
    assert build_model(hp, seed=0).parameter_bytes == expected * 8


def test_size_labels() -> None:
    assert size_label(8, 16) == "LSTM_8"
    assert size_label(110, 174) == "LSTM_base"
    assert size_label(8, 20) == "LSTM_8_20"
    assert doubling_sizes([8, 16]) == [(8, 16), (16, 32)]


def test_hyperparams_from_dict() -> None:
    hp = ForecastHyperparams.from_dict({"lstm_nodes": 8, "window": 24})

    assert hp.lstm_nodes == 8
    assert hp.window == 24
    assert ForecastHyperparams.from_dict(hp.as_dict()) == hp
    with raises(ConfigError, match="Unknown hyperparameters"):
        ForecastHyperparams.from_dict({"dropout": 0.1})
    with raises(ConfigError):
        ForecastHyperparams.from_dict({"scaler": "robust"})
    with raises(ConfigError):
        ForecastHyperparams.from_dict({"window": 1})


def test_encode_times() -> None:
    saturday_noon = datetime(2009, 7, 18, 12, 0)
    monday_midnight = datetime(2009, 7, 20, 0, 0)

    features = encode_times([saturday_noon, monday_midnight])

    assert features.shape == (2, 5)
    assert features[0, 0] == approx(0.0, abs=1e-12)
    assert features[0, 1] == approx(-1.0)
    assert features[0, 4] == 1.0
    assert features[1, :4] == approx([0.0, 1.0, 0.0, 1.0], abs=1e-12)
    assert features[1, 4] == 0.0


def test_initialization_is_seeded(tiny_hp: ForecastHyperparams) -> None:
    first = build_model(tiny_hp, seed=4).parameters()
    second = build_model(tiny_hp, seed=4).parameters()
    other = build_model(tiny_hp, seed=5).parameters()

    for name, node in first.items():
        assert np.array_equal(node.value, second[name].value)
    assert any(
        not np.array_equal(node.value, other[name].value)
        for name, node in first.items()
    )


def test_predict_is_pure(
    tiny_model: ForecastModel,
    window_and_times: Tuple[List[float], List[datetime]],
) -> None:
    window, times = window_and_times

    first = tiny_model.predict(window, times)

    assert np.isfinite(first)
    assert tiny_model.predict(window, times) == first
    assert tiny_model.predict(np.array(window), times) == first


def test_predict_matches_batch(
    tiny_model: ForecastModel,
    window_and_times: Tuple[List[float], List[datetime]],
) -> None:
    window, times = window_and_times
    features = encode_times(times)[-1:]

    batch = tiny_model.predict_batch(
        np.array([window, window]), features[[0, 0]]
    )

    assert batch[0] == approx(tiny_model.predict(window, times))
    assert batch[0] == batch[1]


def test_predict_rejects_bad_shapes(
    tiny_model: ForecastModel,
    window_and_times: Tuple[List[float], List[datetime]],
) -> None:
    window, times = window_and_times

    with raises(ShapeError):
        tiny_model.predict(window[:-1], times)
    with raises(ShapeError):
        tiny_model.predict(window, times[:-1])
    with raises(ShapeError):
        tiny_model.predict_batch(np.zeros((2, 7)), np.zeros((2, 5)))
    with raises(ShapeError):
        tiny_model.predict_batch(np.zeros((2, 8)), np.zeros((3, 5)))


def test_save_and_load(
    tmp_path: Path,
    tiny_model: ForecastModel,
    window_and_times: Tuple[List[float], List[datetime]],
) -> None:
    window, times = window_and_times
    tiny_model.test_mae = 0.25
    path = tmp_path / "1000.sglk"

    tiny_model.save(path)
    loaded = ForecastModel.load(path)

    assert (tmp_path / "1000.sglk.json").exists()
    assert loaded.hp == tiny_model.hp
    assert loaded.meter_id == 1000
    assert loaded.test_mae == 0.25
    assert loaded.predict(window, times) == tiny_model.predict(window, times)
    assert load_models(tmp_path).keys() == {1000}


def test_train_on_constant_series(tiny_hp: ForecastHyperparams) -> None:
    record = _record(7, np.full(96, 0.8))

    model, mae = train_forecaster(record, tiny_hp, seed=1)

    assert model.meter_id == 7
    assert model.test_mae == mae
    assert np.isfinite(mae)
    assert mae >= 0
    assert len(model.history["epoch_loss"]) == tiny_hp.epochs


def test_training_is_deterministic(tiny_hp: ForecastHyperparams) -> None:
    record = _record(7, _daily_series(3))

    _, first = train_forecaster(record, tiny_hp, seed=2)
    _, second = train_forecaster(record, tiny_hp, seed=2)

    assert first == second


def test_training_reduces_loss() -> None:
    hp = ForecastHyperparams(
        lstm_nodes=4, fc_nodes=8, window=8, epochs=10, batch_size=32
    )
    record = _record(7, _daily_series(6))

    model, _ = train_forecaster(record, hp, seed=3)

    assert model.history["final_mse"] < model.history["initial_mse"]


def test_train_refuses_short_series(tiny_hp: ForecastHyperparams) -> None:
    with raises(ContractError):
        train_forecaster(_record(7, np.ones(17)), tiny_hp, seed=1)


def test_train_days_keeps_the_tail(tiny_hp: ForecastHyperparams) -> None:
    values = np.concatenate([np.full(96, 100.0), np.full(96, 0.5)])
    hp = ForecastHyperparams(**{**tiny_hp.as_dict(), "train_days": 2})

    model, _ = train_forecaster(_record(7, values), hp, seed=1)

    assert model.scaler.divisor.max() < 10.0


def test_sample_candidates_keeps_base_fields(
    tiny_hp: ForecastHyperparams,
) -> None:
    rng = np.random.default_rng(0)
    space = {"learning_rate": (1e-4, 1e-2), "lstm_nodes": [2, 3]}

    candidates = sample_candidates(rng, 5, tiny_hp, space)

    assert len(candidates) == 5
    for hp in candidates:
        assert 1e-4 <= hp.learning_rate <= 1e-2
        assert hp.lstm_nodes in (2, 3)
        assert hp.window == tiny_hp.window
        assert hp.epochs == tiny_hp.epochs


def test_random_search_budget_one_returns_base(
    tiny_hp: ForecastHyperparams,
) -> None:
    records = [_record(7, _daily_series(2))]

    assert random_search(records, 1, seed=0, base=tiny_hp) == tiny_hp
    with raises(ContractError):
        random_search(records, 0, seed=0, base=tiny_hp)
    with raises(ContractError):
        random_search([], 1, seed=0, base=tiny_hp)


def test_size_sweep(tmp_path: Path, tiny_hp: ForecastHyperparams) -> None:
    record = _record(7, _daily_series(2))

    rows = size_sweep(record, [(4, 8), (2, 4)], seed=0, hp=tiny_hp)
    write_sweep_csv(rows, tmp_path / "sweep.csv")

    assert [row.size_label for row in rows] == ["LSTM_2", "LSTM_4"]
    assert rows[0].param_bytes < rows[1].param_bytes
    assert all(row.data_bytes == record.data_bytes for row in rows)
    frame = pd.read_csv(tmp_path / "sweep.csv")
    assert list(frame.columns) == SWEEP_COLUMNS
    assert len(frame) == 2


def test_train_forecasters_skips_short_meters(
    tmp_path: Path, tiny_hp: ForecastHyperparams
) -> None:
    records = [_record(7, _daily_series(2)), _record(8, np.ones(12))]

    models = train_forecasters(records, tiny_hp, seed=0, store_dir=tmp_path)

    assert list(models) == [7]
    assert (tmp_path / "7.sglk").exists()
    assert not (tmp_path / "8.sglk").exists()


def test_train_forecasters_seeds_per_meter(
    tiny_hp: ForecastHyperparams,
) -> None:
    series = _daily_series(2)
    start = datetime(2009, 7, 14)
    records = [
        HouseholdRecord(7, series, start),
        HouseholdRecord(8, series, start),
    ]

    models = train_forecasters(records, tiny_hp, seed=0)

    assert models[7].seed != models[8].seed


def test_random_search_scores_every_candidate(
    mocker: MockerFixture, tiny_hp: ForecastHyperparams
) -> None:
    score = mocker.patch.object(
        forecaster,
        "_validation_mae",
        side_effect=lambda records, hp, seed: abs(hp.learning_rate - 1e-3),
    )
    records = [_record(7, _daily_series(2))]

    best = random_search(records, 6, seed=4, base=tiny_hp)

    assert score.call_count == 6
    tried = [call.args[1] for call in score.call_args_list]
    assert tried[0] == tiny_hp
    assert best == min(tried, key=lambda hp: abs(hp.learning_rate - 1e-3))
    assert random_search(records, 6, seed=4, base=tiny_hp) == best


def test_random_search_is_reproducible(tiny_hp: ForecastHyperparams) -> None:
    records = [_record(7, _daily_series(3)), _record(8, _daily_series(3, 1))]
    space = {"learning_rate": (1e-3, 1e-2), "lstm_nodes": [2, 4]}

    first = random_search(records, 3, seed=5, base=tiny_hp, space=space)
    second = random_search(records, 3, seed=5, base=tiny_hp, space=space)

    assert first == second


def test_non_finite_loss_raises(
    mocker: MockerFixture, tiny_hp: ForecastHyperparams
) -> None:
    mocker.patch.object(
        forecaster, "mse", return_value=as_node(np.array(np.nan))
    )

    with raises(DivergenceError, match="meter 7"):
        train_forecaster(_record(7, _daily_series(2)), tiny_hp, seed=1)


@mark.slow
def test_learns_a_sinusoid() -> None:
    hours = np.arange(12 * 48) / 2.0
    amplitude = 0.4
    values = 0.5 + amplitude * np.sin(2 * np.pi * hours / 24.0)
    hp = ForecastHyperparams(
        lstm_nodes=8,
        fc_nodes=16,
        window=48,
        epochs=40,
        batch_size=32,
        learning_rate=1e-2,
    )

    _, mae = train_forecaster(_record(7, values), hp, seed=6)

    assert mae < 0.2 * amplitude


@mark.slow
def test_iid_series_stays_near_the_median() -> None:
    rng = np.random.default_rng(9)
    values = rng.permutation(rng.uniform(0.2, 1.0, 20 * 48))
    hp = ForecastHyperparams(
        lstm_nodes=4, fc_nodes=8, window=24, epochs=20, batch_size=32
    )
    n_train = int(0.8 * len(values))
    deviation = np.mean(
        np.abs(values[n_train:] - np.median(values[:n_train]))
    )

    _, mae = train_forecaster(_record(7, values), hp, seed=2)

    assert mae == approx(deviation, rel=0.15)


@mark.slow
def test_size_sweep_larger_model_is_not_worse() -> None:
    dataset = generate_dataset(SynthConfig(households=2, days=120, seed=3))
    record = dataset.households[0].record
    hp = ForecastHyperparams(window=48, epochs=8)

    rows = size_sweep(record, [(32, 64), (8, 16)], seed=0, hp=hp, repeats=2)

    small, large = rows
    assert (small.size_label, large.size_label) == ("LSTM_8", "LSTM_32")
    assert small.param_bytes < large.param_bytes < record.data_bytes
    assert record.data_bytes == 120 * 48 * 8
    assert large.test_mae <= small.test_mae + 0.02
