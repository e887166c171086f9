from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pytest import approx, fixture, mark, raises
from pytest_mock import MockerFixture

from gridleak import forecaster
from gridleak.attack import (
    MAX_GAP_SHARE,
    MetaClassifier,
    QuerySpace,
    SignatureSet,
    SignatureSpec,
    build_spec,
    gen_signature,
    gen_signature_set,
    infer_property,
    initial_window,
    iterate_signature,
    query_times,
    read_signature_store,
    run_attack,
    sample_dates,
    shadow_signature_sets,
    train_meta,
    train_metas,
    train_shadow_farm,
    write_signature_store,
)
from gridleak.blackbox import (
    ForecastQuery,
    ForecastResponse,
    LocalOracle,
    WireOracle,
    serve,
)
from gridleak.classifier import ClassifierSettings
from gridleak.dataio import PROPERTIES, Dataset, PropertyVector
from gridleak.errors import (
    AttackError,
    ContractError,
    DivergenceError,
    OracleError,
    ShapeError,
)
from gridleak.forecaster import (
    ForecastHyperparams,
    ForecastModel,
    build_model,
)
from gridleak.metrics import roc_auc
from gridleak.numerics import fit_scaler
from tests.conftest import AffineOracle, ConstantOracle, LastValueOracle


def _spec(
    w: int = 8, tau: int = 8, k: int = 4, seed: int = 0
) -> SignatureSpec:
    dates = tuple(datetime(2009, 7, 14 + i, 6, 30) for i in range(k))
    return SignatureSpec(w, tau, k, dates, seed)


class _FailingOracle(LastValueOracle):
    """Refuses every query whose seed date is listed."""

    def __init__(self, window: int, failing: List[datetime]) -> None:
        super().__init__(window)
        self.failing = {date.isoformat() for date in failing}

    def query(self, query: ForecastQuery) -> ForecastResponse:
        if str(query.id).split("/")[0] in self.failing:
            raise OracleError("connection reset")
        return super().query(query)


class _SequentialOracle:
    """A model oracle that is not a LocalOracle, queried one by one."""

    def __init__(self, model: ForecastModel) -> None:
        self.local = LocalOracle(model)

    def handshake(self) -> Dict[str, int]:
        return self.local.handshake()

    def query(self, query: ForecastQuery) -> ForecastResponse:
        return self.local.query(query)


def _random_sets(
    count: int, shape: Tuple[int, int], seed: int = 0
) -> Dict[int, SignatureSet]:
    rng = np.random.default_rng(seed)
    dates = _spec(k=shape[0]).dates
    return {
        meter: SignatureSet(str(meter), dates, rng.random(shape))
        for meter in range(1, count + 1)
    }


def _labels(count: int) -> Dict[int, PropertyVector]:
    return {
        meter: PropertyVector(*([meter % 2] * len(PROPERTIES)))
        for meter in range(1, count + 1)
    }


@fixture(scope="module")
def meta() -> MetaClassifier:
    settings = ClassifierSettings(
        channels=(4,), max_epochs=3, batch_size=8, folds=2, patience=2
    )
    return train_meta(
        _random_sets(12, (4, 8)), _labels(12), "retired", 1, settings
    )


def test_query_space() -> None:
    space = QuerySpace()

    assert space.scale(0.25) == 0.25
    assert space.scale(4.0) == 1.0
    assert space.scale(2.0) == 0.5
    assert space.scale(-4.0) == 0.0
    assert space.scale(0.0) == 0.5


def test_query_times() -> None:
    date = datetime(2009, 7, 14, 6, 30)

    times = query_times(date, 3, 4)

    assert len(times) == 5
    assert times[0] == date + timedelta(hours=1)
    assert times[-1] == date + timedelta(hours=3)


def test_initial_window_is_seeded() -> None:
    spec = _spec()
    date = spec.dates[0]

    window = initial_window(spec, date)

    assert window.shape == (8,)
    assert np.all((window >= 0) & (window < 1))
    assert np.array_equal(window, initial_window(spec, date))
    assert not np.array_equal(window, initial_window(spec, spec.dates[1]))
    assert not np.array_equal(
        window, initial_window(_spec(seed=1), date)
    )


def test_constant_oracle_signature() -> None:
    spec = _spec()

    high = gen_signature(ConstantOracle(2.5, 8), spec, spec.dates[0])
    assert np.all(high.values == 1.0)
    low = gen_signature(ConstantOracle(0.4, 8), spec, spec.dates[0])
    assert low.values == approx(np.full(8, 0.4))


def test_last_value_oracle_signature() -> None:
    spec = _spec(tau=12)
    date = spec.dates[2]

    signature = gen_signature(LastValueOracle(8), spec, date)

    assert signature.date == date
    assert signature.values == approx(
        np.full(8, initial_window(spec, date)[-1])
    )


def test_signature_prefix_property() -> None:
    short = _spec(tau=5)
    long = _spec(tau=11)
    date = short.dates[1]

    first = list(iterate_signature(AffineOracle(0.9, 0.2, 8), short, date))
    second = list(iterate_signature(AffineOracle(0.9, 0.2, 8), long, date))

    assert len(first) == 5
    assert len(second) == 11
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_query_ids_and_timestamps() -> None:
    spec = _spec(tau=3, k=1)
    oracle = ConstantOracle(0.5, 8)

    gen_signature(oracle, spec, spec.dates[0])

    stamp = spec.dates[0].isoformat()
    assert [q.id for q in oracle.queries] == [
        f"{stamp}/1",
        f"{stamp}/2",
        f"{stamp}/3",
    ]
    assert oracle.queries[1].timestamps == query_times(spec.dates[0], 2, 8)
    assert oracle.queries[1].window[-1] == 0.5


def test_signature_set_query_count() -> None:
    spec = _spec(tau=6, k=5)
    oracle = ConstantOracle(0.7, 8)

    sigs = gen_signature_set(oracle, spec)

    assert sigs.matrix.shape == (5, 8)
    assert sigs.dates == spec.dates
    assert sigs.queries == spec.queries_per_oracle == 30
    assert len(oracle.queries) == 30
    assert sigs.gaps == ()


def test_signature_set_single_date() -> None:
    spec = _spec(k=1)

    sigs = gen_signature_set(ConstantOracle(3.0, 8), spec)

    assert sigs.k == 1
    assert sigs.w == 8


def test_local_oracle_lockstep_matches_sequential(
    tiny_model: ForecastModel,
) -> None:
    spec = _spec(tau=10, k=3)
    oracle = LocalOracle(tiny_model)

    batched = gen_signature_set(oracle, spec)
    sequential = gen_signature_set(_SequentialOracle(tiny_model), spec)
    again = gen_signature_set(LocalOracle(tiny_model), spec)

    assert batched.queries == sequential.queries == 30
    assert oracle.stats.total == 30
    assert np.array_equal(batched.matrix, again.matrix)
    assert np.allclose(batched.matrix, sequential.matrix, atol=1e-9)


@mark.slow
def test_wire_signatures_match_local() -> None:
    hp = ForecastHyperparams(lstm_nodes=4, fc_nodes=8, window=48)
    model = build_model(hp, seed=3, meter_id=1001)
    model.scaler = fit_scaler("minmax", [0.0, 2.5])
    start = datetime(2009, 7, 14, 6, 30)
    dates = tuple(
        start + timedelta(days=i, minutes=30 * (i % 48)) for i in range(100)
    )
    spec = SignatureSpec(48, 48, 100, dates, 7)

    local = gen_signature_set(LocalOracle(model), spec)
    with serve(model) as handle, WireOracle(*handle.address) as oracle:
        wire = gen_signature_set(oracle, spec)
        served = handle.stats.total

    assert wire.queries == local.queries == 48 * 100
    assert served == 48 * 100
    assert wire.gaps == ()
    assert wire.matrix.shape == (100, 48)
    assert np.allclose(wire.matrix, local.matrix, atol=1e-9)


def test_window_mismatch_aborts() -> None:
    with raises(AttackError, match="w=8"):
        gen_signature_set(ConstantOracle(1.0, 6), _spec())


def test_failed_dates_are_imputed() -> None:
    spec = _spec(k=10)
    oracle = _FailingOracle(8, [spec.dates[3]])

    sigs = gen_signature_set(oracle, spec)

    assert sigs.gaps == (spec.dates[3],)
    others = np.delete(sigs.matrix, 3, axis=0)
    assert sigs.matrix[3] == approx(others.mean(axis=0))
    assert sigs.queries == 9 * spec.tau + 1


def test_too_many_failed_dates_abort() -> None:
    spec = _spec(k=10)
    assert 2 > MAX_GAP_SHARE * spec.k
    oracle = _FailingOracle(8, [spec.dates[0], spec.dates[7]])

    with raises(AttackError, match="2 of 10"):
        gen_signature_set(oracle, spec)


def test_unreachable_oracle_aborts() -> None:
    class Unreachable(ConstantOracle):
        def handshake(self) -> Dict[str, int]:
            raise OracleError("refused")

    with raises(AttackError, match="unreachable"):
        gen_signature_set(Unreachable(0.0, 8), _spec())


def test_signature_spec_validation() -> None:
    dates = _spec().dates

    with raises(ContractError):
        SignatureSpec(8, 8, 3, dates, 0)
    with raises(ContractError):
        SignatureSpec(8, 8, 4, dates[::-1], 0)
    with raises(ContractError):
        SignatureSpec(8, 0, 4, dates, 0)

    spec = _spec()
    assert SignatureSpec.from_dict(spec.as_dict()) == spec
    tampered = {**spec.as_dict(), "dates_hash": "0" * 64}
    with raises(ContractError):
        SignatureSpec.from_dict(tampered)


def test_sample_dates(dataset: Dataset) -> None:
    dates = sample_dates(dataset, 6, seed=2, horizon=16)
    first = dataset.households[0].record

    assert len(dates) == 6
    assert list(dates) == sorted(dates)
    assert dates == sample_dates(dataset, 6, seed=2, horizon=16)
    assert all(first.start <= date for date in dates)
    assert all(
        date + timedelta(minutes=30 * 16) <= first.end for date in dates
    )
    with raises(ContractError):
        sample_dates(dataset, 0, seed=2)


def test_build_spec(dataset: Dataset) -> None:
    spec = build_spec(dataset, w=8, tau=4, k=5, seed=7)

    assert (spec.w, spec.tau, spec.k, spec.seed) == (8, 4, 5, 7)
    assert spec.dates == build_spec(dataset, 8, 4, 5, 7).dates


def test_signature_store_round_trip(tmp_path: Path) -> None:
    spec = _spec(k=10)
    sets = {
        "1000": gen_signature_set(AffineOracle(1.2, 0.1, 8), spec, "1000"),
        "honest": gen_signature_set(
            _FailingOracle(8, [spec.dates[4]]), spec
        ),
    }

    write_signature_store(tmp_path, spec, sets)
    loaded_spec, loaded = read_signature_store(tmp_path)

    assert loaded_spec == spec
    assert sorted(loaded) == ["1000", "honest"]
    for key, sigs in sets.items():
        assert np.array_equal(loaded[key].matrix, sigs.matrix)
        assert loaded[key].gaps == sigs.gaps


def test_signature_store_rejects_other_dates(tmp_path: Path) -> None:
    spec = _spec()
    other = _spec(k=5)
    write_signature_store(tmp_path, spec, {})
    gen_signature_set(ConstantOracle(0.5, 8), other, "stray").save(
        tmp_path / "signatures" / "stray.csv"
    )

    with raises(ContractError):
        read_signature_store(tmp_path)


def test_signature_set_rejects_bad_matrices() -> None:
    dates = _spec().dates

    with raises(ShapeError):
        SignatureSet("x", dates, np.zeros((3, 8)))
    with raises(ContractError):
        SignatureSet("x", dates, np.full((4, 8), np.nan))


def test_shadow_farm_drops_diverging_meters(
    mocker: MockerFixture,
    dataset: Dataset,
    tiny_hp: ForecastHyperparams,
) -> None:
    aux = dataset.subset(dataset.meter_ids[:3])
    bad = aux.meter_ids[1]
    train = forecaster.train_forecaster

    def flaky(record, hp, seed):  # type: ignore[no-untyped-def]
        if record.meter_id == bad:
            raise DivergenceError("loss is nan")
        return train(record, hp, seed)

    mocker.patch.object(forecaster, "train_forecaster", side_effect=flaky)

    models = train_shadow_farm(aux, tiny_hp, seed=0)

    assert sorted(models) == [aux.meter_ids[0], aux.meter_ids[2]]
    sets = shadow_signature_sets(models, _spec(tau=2, k=2))
    assert sorted(sets) == sorted(models)


def test_shadow_farm_fails_without_models(
    mocker: MockerFixture,
    dataset: Dataset,
    tiny_hp: ForecastHyperparams,
) -> None:
    mocker.patch.object(
        forecaster,
        "train_forecaster",
        side_effect=DivergenceError("loss is nan"),
    )

    with raises(AttackError):
        train_shadow_farm(dataset.subset(dataset.meter_ids[:2]), tiny_hp, 0)


def test_meta_refuses_single_class(tiny_settings: ClassifierSettings) -> None:
    labels = {meter: PropertyVector(*([0] * 8)) for meter in range(1, 7)}

    with raises(ContractError, match="single class"):
        train_meta(
            _random_sets(6, (4, 8)), labels, "children", 0, tiny_settings
        )


def test_train_metas_skips_untrainable_properties(
    tiny_settings: ClassifierSettings,
) -> None:
    labels = {
        meter: PropertyVector(meter % 2, *([0] * 7)) for meter in range(1, 9)
    }

    metas = train_metas(
        _random_sets(8, (4, 8)),
        labels,
        seed=0,
        properties=["retired", "alone"],
        settings=tiny_settings,
    )

    assert list(metas) == ["retired"]
    assert metas["retired"].target == "retired"
    assert metas["retired"].signature_shape == (4, 8)


def _planted(
    count: int, shift: float, seed: int
) -> Tuple[Dict[int, SignatureSet], Dict[int, PropertyVector]]:
    """Signature sets whose level is raised by ``shift`` for retirees."""
    rng = np.random.default_rng(seed)
    dates = _spec(k=6).dates
    sets, labels = {}, {}
    for meter in range(1, count + 1):
        label = int(rng.integers(2))
        matrix = rng.normal(0.5, 0.1, (6, 8)) + shift * label
        sets[meter] = SignatureSet(str(meter), dates, matrix)
        labels[meter] = PropertyVector(label, *([0] * 7))
    return sets, labels


def _held_out_auc(
    meta: MetaClassifier,
    sets: Dict[int, SignatureSet],
    labels: Dict[int, PropertyVector],
) -> float:
    meters = sorted(sets)
    stack = np.stack([sets[m].matrix for m in meters])
    truth = [labels[m]["retired"] for m in meters]
    return roc_auc(meta.predict_proba(stack), truth)


@fixture(scope="module")
def quality_settings() -> ClassifierSettings:
    return ClassifierSettings(
        channels=(4,),
        max_epochs=30,
        batch_size=16,
        learning_rate=1e-2,
        folds=3,
        patience=5,
    )


def test_meta_learns_planted_signal(
    quality_settings: ClassifierSettings,
) -> None:
    train_sets, train_labels = _planted(80, 0.1, seed=4)
    test_sets, test_labels = _planted(200, 0.1, seed=5)

    meta = train_meta(
        train_sets, train_labels, "retired", 2, quality_settings
    )

    assert _held_out_auc(meta, test_sets, test_labels) >= 0.65


def test_meta_without_signal_is_chance(
    quality_settings: ClassifierSettings,
) -> None:
    train_sets, train_labels = _planted(80, 0.0, seed=6)
    test_sets, test_labels = _planted(600, 0.0, seed=7)

    meta = train_meta(
        train_sets, train_labels, "retired", 2, quality_settings
    )

    assert 0.40 <= _held_out_auc(meta, test_sets, test_labels) <= 0.60


def test_infer_property(meta: MetaClassifier) -> None:
    sigs = gen_signature_set(ConstantOracle(0.3, 8), _spec())

    probability = infer_property(meta, sigs)

    assert 0.0 <= probability <= 1.0
    with raises(ShapeError, match=r"\(K, w\)"):
        infer_property(
            meta, gen_signature_set(ConstantOracle(0.3, 8), _spec(k=3))
        )


def test_run_attack(meta: MetaClassifier) -> None:
    spec = _spec()
    oracles = {
        7: ConstantOracle(0.3, 8),
        3: AffineOracle(1.1, 0.0, 8),
        5: ConstantOracle(0.3, 6),
    }

    result = run_attack(oracles, {"retired": meta}, spec)

    assert list(result.probabilities.columns) == ["retired"]
    assert list(result.probabilities.index) == [3, 5, 7]
    assert sorted(result.signatures) == [3, 7]
    assert result.queries == 2 * spec.queries_per_oracle
    assert np.isnan(result.probabilities.loc[5, "retired"])
    assert result.probabilities.loc[7, "retired"] == approx(
        infer_property(meta, result.signatures[7])
    )
