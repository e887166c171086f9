"""Two-branch LSTM load forecaster: training, tuning and the size sweep."""

from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime
import json
from math import log10
from pathlib import Path
from typing import (
    Any,
    Dict,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from joblib import Parallel, delayed
import numpy as np
import pandas as pd
from tqdm import tqdm

from gridleak.dataio import HouseholdRecord
from gridleak.errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    ShapeError,
)
from gridleak.log import log
from gridleak.numerics import (
    MIN_MAX,
    SCALER_KINDS,
    STANDARD,
    ComputeNode,
    Dense,
    LSTM,
    OptimizerState,
    Scaler,
    Tensor,
    adam_step,
    backward,
    child_seed,
    concat,
    fit_scaler,
    load_container,
    mse,
    named_parameters,
    relu,
    reshape,
    save_container,
    scaler_from_tensors,
    scaler_tensors,
)


TIME_FEATURES = 5

MODEL_SUFFIX = ".sglk"

# Named architectures; LSTM_base is a large tuned size kept for comparison
PRESETS: Dict[str, Tuple[int, int]] = {"LSTM_base": (110, 174)}

DEFAULT_SIZES: List[Tuple[int, int]] = [
    (8, 16),
    (16, 32),
    (32, 64),
    (64, 128),
    PRESETS["LSTM_base"],
]

SWEEP_COLUMNS = [
    "size_label",
    "params",
    "param_bytes",
    "test_mae",
    "data_bytes",
]

Times = Union[Sequence[datetime], pd.DatetimeIndex]


@dataclass(frozen=True)
class ForecastHyperparams:
    """Training and architecture settings of a forecaster."""

    learning_rate: float = 3e-3
    l2: float = 1e-5
    lstm_nodes: int = 32
    fc_nodes: int = 64
    scaler: str = MIN_MAX
    window: int = 48
    epochs: int = 30
    batch_size: int = 64
    train_days: Optional[int] = None

    def validate(self) -> None:
        """Raise ConfigError on values the model cannot be built with."""
        if self.lstm_nodes < 1 or self.fc_nodes < 1:
            raise ConfigError("lstm_nodes and fc_nodes must be >= 1")
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.scaler not in SCALER_KINDS:
            raise ConfigError(f"Unknown scaler: {self.scaler}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.train_days is not None and self.train_days < 1:
            raise ConfigError("train_days must be >= 1")

    def as_dict(self) -> Dict[str, Any]:
        """Plain mapping, suitable for JSON."""
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ForecastHyperparams":
        """Build from a mapping, rejecting unknown keys."""
        known = {item.name for item in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown hyperparameters: {sorted(unknown)}")
        hp = cls(**values)
        hp.validate()
        return hp


def size_label(lstm_nodes: int, fc_nodes: int) -> str:
    """``LSTM_<n>`` when the dense layer is twice the LSTM, else explicit."""
    for name, size in PRESETS.items():
        if size == (lstm_nodes, fc_nodes):
            return name
    if fc_nodes == 2 * lstm_nodes:
        return f"LSTM_{lstm_nodes}"
    return f"LSTM_{lstm_nodes}_{fc_nodes}"


def doubling_sizes(lstm_nodes: Sequence[int]) -> List[Tuple[int, int]]:
    """Sizes whose dense layer is always double the LSTM layer."""
    return [(nodes, 2 * nodes) for nodes in lstm_nodes]


def parameter_count(lstm_nodes: int, fc_nodes: int) -> int:
    """Closed-form number of weights of the two-branch architecture."""
    lstm = 4 * (lstm_nodes * (1 + lstm_nodes) + lstm_nodes)
    time_branch = TIME_FEATURES * fc_nodes + fc_nodes
    head = lstm_nodes + fc_nodes + 1
    return lstm + time_branch + head


def encode_times(times: Times) -> Tensor:
    """
    Cyclic time encoding, one row per timestamp.

    Columns are sin/cos of the half-hour of day, sin/cos of the day of week
    and a weekend flag.
    """
    index = pd.DatetimeIndex(times)
    slot = (index.hour * 2 + index.minute // 30).to_numpy(dtype=np.float64)
    day = index.dayofweek.to_numpy(dtype=np.float64)
    slot_angle = 2.0 * np.pi * slot / 48.0
    day_angle = 2.0 * np.pi * day / 7.0
    return np.stack(
        [
            np.sin(slot_angle),
            np.cos(slot_angle),
            np.sin(day_angle),
            np.cos(day_angle),
            (day >= 5).astype(np.float64),
        ],
        axis=1,
    )


class ForecastModel:
    """
    Next-step forecaster with a consumption branch and a time branch.

    The consumption branch runs an LSTM over the scaled window, the time
    branch a ReLU dense layer over the encoding of the predicted step; both
    outputs are concatenated and fed to a single linear output unit.
    """

    def __init__(
        self,
        hp: ForecastHyperparams,
        seed: int,
        meter_id: Optional[int] = None,
    ) -> None:
        hp.validate()
        rng = np.random.default_rng(seed)
        self.hp = hp
        self.seed = seed
        self.meter_id = meter_id
        self.test_mae: Optional[float] = None
        self.history: Dict[str, Any] = {}
        self.lstm = LSTM(1, hp.lstm_nodes, rng, "consumption")
        self.time_dense = Dense(TIME_FEATURES, hp.fc_nodes, rng, "time")
        self.head = Dense(hp.lstm_nodes + hp.fc_nodes, 1, rng, "head")
        self.scaler = Scaler(hp.scaler, np.zeros(1), np.ones(1))

    @property
    def window(self) -> int:
        """Number of past readings the model consumes."""
        return self.hp.window

    def parameters(self) -> Dict[str, ComputeNode]:
        """Trainable nodes by name."""
        return named_parameters([self.lstm, self.time_dense, self.head])

    @property
    def parameter_count(self) -> int:
        """Number of scalar weights."""
        return sum(node.value.size for node in self.parameters().values())

    @property
    def parameter_bytes(self) -> int:
        """Size of the weights as float64."""
        return self.parameter_count * 8

    def forward(self, windows: Tensor, features: Tensor) -> ComputeNode:
        """Scaled (batch, w) windows and (batch, 5) target-step encodings."""
        batch = windows.shape[0]
        sequence = reshape(windows, (batch, self.window, 1))
        hidden = self.lstm(sequence)
        time_out = relu(self.time_dense(features))
        return self.head(concat([hidden, time_out], axis=1))

    def predict_batch(self, windows: Tensor, features: Tensor) -> Tensor:
        """Predictions in kWh for raw (batch, w) windows."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 2 or windows.shape[1] != self.window:
            raise ShapeError(
                f"Expected windows of length {self.window}, "
                f"got shape {windows.shape}"
            )
        if features.shape != (windows.shape[0], TIME_FEATURES):
            raise ShapeError(
                f"Expected ({windows.shape[0]}, {TIME_FEATURES}) time "
                f"features, got {features.shape}"
            )
        scaled = self.scaler.apply(windows)
        out = self.forward(scaled, features).value[:, 0]
        return self.scaler.invert(out)

    def predict(self, window: Sequence[float], times: Times) -> float:
        """
        Forecast the reading that follows ``window``.

        ``times`` holds the w window timestamps followed by the timestamp of
        the predicted step.
        """
        values = np.asarray(window, dtype=np.float64).reshape(-1)
        if values.size != self.window:
            raise ShapeError(
                f"Expected a window of {self.window} readings, "
                f"got {values.size}"
            )
        if len(times) != self.window + 1:
            raise ShapeError(
                f"Expected {self.window + 1} timestamps, got {len(times)}"
            )
        features = encode_times(times)[-1:]
        return float(self.predict_batch(values[None, :], features)[0])

    def sidecar(self) -> Dict[str, Any]:
        """JSON-serializable description stored next to the weights."""
        return {
            "hyperparams": self.hp.as_dict(),
            "meter_id": self.meter_id,
            "seed": self.seed,
            "test_mae": self.test_mae,
        }

    def save(self, path: Path) -> None:
        """Write ``<path>`` (weights) and ``<path>.json`` (sidecar)."""
        tensors = {
            name: node.value for name, node in self.parameters().items()
        }
        tensors.update(scaler_tensors(self.scaler))
        save_container(
            path,
            tensors,
            {"scaler": self.scaler.kind, "kind": "forecaster"},
        )
        with open(_sidecar_path(path), "w", encoding="utf-8") as f:
            json.dump(self.sidecar(), f, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path: Path) -> "ForecastModel":
        """Read a model written by :meth:`save`."""
        with open(_sidecar_path(path), "r", encoding="utf-8") as f:
            sidecar = json.load(f)
        tensors, metadata = load_container(path)

        hp = ForecastHyperparams.from_dict(sidecar["hyperparams"])
        model = cls(hp, sidecar["seed"], sidecar["meter_id"])
        for name, node in model.parameters().items():
            if tensors[name].shape != node.shape:
                raise ShapeError(f"{path}: tensor {name} has wrong shape")
            node.value = tensors[name]
        model.scaler = scaler_from_tensors(metadata["scaler"], tensors)
        model.test_mae = sidecar["test_mae"]
        return model


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def build_model(
    hp: ForecastHyperparams, seed: int, meter_id: Optional[int] = None
) -> ForecastModel:
    """Freshly initialized forecaster."""
    return ForecastModel(hp, seed, meter_id)


def _windows(
    scaled: Tensor, features: Tensor, window: int, start: int, end: int
) -> Tuple[Tensor, Tensor, Tensor]:
    """Inputs, target encodings and targets for targets in [start, end)."""
    first = max(start, window)
    views = np.lib.stride_tricks.sliding_window_view(scaled, window)
    inputs = views[first - window : end - window]
    return inputs, features[first:end], scaled[first:end]


def _batched_mse(
    model: ForecastModel, inputs: Tensor, features: Tensor, targets: Tensor
) -> float:
    total = 0.0
    for begin in range(0, len(targets), 1024):
        stop = begin + 1024
        out = model.forward(inputs[begin:stop], features[begin:stop])
        total += float(np.sum((out.value[:, 0] - targets[begin:stop]) ** 2))
    return total / len(targets)


def train_forecaster(
    record: HouseholdRecord, hp: ForecastHyperparams, seed: int
) -> Tuple[ForecastModel, float]:
    """
    Fit a forecaster to one meter and report its held-out MAE in kWh.

    The series is split chronologically 80/20; windows are scaled with a
    scaler fitted on the training part only and the model minimizes squared
    next-step error with Adam.
    """
    hp.validate()
    record = record.tail(hp.train_days)
    readings = record.readings
    n = len(readings)
    window = hp.window

    if n < window + 10:
        raise ContractError(
            f"Meter {record.meter_id} has {n} readings, "
            f"need at least {window + 10}"
        )

    n_train = min(max(int(0.8 * n), window + 1), n - 1)
    model = build_model(hp, child_seed(seed, 0), record.meter_id)
    model.seed = seed
    model.scaler = fit_scaler(hp.scaler, readings[:n_train])

    scaled = model.scaler.apply(readings)
    features = encode_times(record.timestamps)
    inputs, feats, targets = _windows(scaled, features, window, 0, n_train)

    rng = np.random.default_rng(child_seed(seed, 1))
    state = OptimizerState(hp.learning_rate, hp.l2)
    params = model.parameters()

    initial = _batched_mse(model, inputs, feats, targets)
    epoch_losses: List[float] = []

    for epoch in range(hp.epochs):
        order = rng.permutation(len(targets))
        losses = []
        for begin in range(0, len(order), hp.batch_size):
            batch = order[begin : begin + hp.batch_size]
            loss = mse(
                model.forward(inputs[batch], feats[batch]),
                targets[batch][:, None],
            )
            value = float(loss.value)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"Training diverged for meter {record.meter_id} at "
                    f"epoch {epoch + 1} with hyperparameters {hp}"
                )
            try:
                adam_step(state, params, backward(loss))
            except DivergenceError as e:
                raise DivergenceError(
                    f"{e} (meter {record.meter_id}, hyperparameters {hp})"
                ) from e
            losses.append(value)

        epoch_losses.append(float(np.mean(losses)))
        log.debug(
            "Meter %s epoch %d/%d loss %.6f",
            record.meter_id,
            epoch + 1,
            hp.epochs,
            epoch_losses[-1],
        )

    final = _batched_mse(model, inputs, feats, targets)
    if not np.isfinite(final):
        raise DivergenceError(
            f"Training diverged for meter {record.meter_id} "
            f"with hyperparameters {hp}"
        )

    test_inputs, test_feats, _ = _windows(scaled, features, window, n_train, n)
    predictions = np.concatenate(
        [
            model.scaler.invert(
                model.forward(
                    test_inputs[begin : begin + 1024],
                    test_feats[begin : begin + 1024],
                ).value[:, 0]
            )
            for begin in range(0, len(test_inputs), 1024)
        ]
    )
    mae = float(np.mean(np.abs(predictions - readings[n_train:])))

    model.test_mae = mae
    model.history = {
        "initial_mse": initial,
        "epoch_loss": epoch_losses,
        "final_mse": final,
    }
    log.info(
        "Trained forecaster for meter %s: test MAE %.4f kWh",
        record.meter_id,
        mae,
    )
    return model, mae


SEARCH_SPACE: Dict[str, Any] = {
    "learning_rate": (1e-4, 1e-2),
    "l2": (1e-7, 1e-3),
    "lstm_nodes": [8, 16, 32, 64],
    "fc_nodes": [16, 32, 64, 128],
    "scaler": [MIN_MAX, STANDARD],
    "window": [24, 48, 96],
}


def _log_uniform(rng: np.random.Generator, low: float, high: float) -> float:
    return float(10 ** rng.uniform(log10(low), log10(high)))


def sample_candidates(
    rng: np.random.Generator,
    count: int,
    base: ForecastHyperparams,
    space: Mapping[str, Any] = SEARCH_SPACE,
) -> List[ForecastHyperparams]:
    """
    Draw hyperparameter sets from the search space.

    Continuous ranges are sampled log-uniformly, lists uniformly; fields
    outside the space keep the values of ``base``.
    """
    candidates = []
    for _ in range(count):
        values: Dict[str, Any] = {}
        for name in sorted(space):
            choice = space[name]
            if isinstance(choice, tuple):
                values[name] = _log_uniform(rng, *choice)
            else:
                values[name] = choice[int(rng.integers(len(choice)))]
        candidates.append(replace(base, **values))
    return candidates


def _validation_mae(
    records: Sequence[HouseholdRecord],
    hp: ForecastHyperparams,
    seed: int,
) -> float:
    maes = []
    for record in records:
        try:
            _, mae = train_forecaster(
                record, hp, child_seed(seed, record.meter_id)
            )
        except (DivergenceError, ContractError) as e:
            log.warning("Candidate %s failed: %s", hp, e)
            return float("inf")
        maes.append(mae)
    return float(np.mean(maes))


def random_search(
    records: Sequence[HouseholdRecord],
    budget: int,
    seed: int,
    base: Optional[ForecastHyperparams] = None,
    space: Mapping[str, Any] = SEARCH_SPACE,
    include_default: bool = True,
    workers: int = 1,
) -> ForecastHyperparams:
    """
    Pick the candidate with the lowest mean test MAE on validation meters.

    With ``include_default`` the base hyperparameters are the first of the
    ``budget`` candidates.
    """
    if not records:
        raise ContractError("random_search needs at least one meter")
    if budget < 1:
        raise ContractError("random_search needs a budget >= 1")

    base = base or ForecastHyperparams()
    rng = np.random.default_rng(seed)
    if include_default:
        candidates = [base] + sample_candidates(rng, budget - 1, base, space)
    else:
        candidates = sample_candidates(rng, budget, base, space)

    scores = Parallel(n_jobs=workers)(
        delayed(_validation_mae)(records, hp, child_seed(seed, index))
        for index, hp in enumerate(candidates)
    )

    best = int(np.argmin(scores))
    if not np.isfinite(scores[best]):
        raise DivergenceError("Every hyperparameter candidate failed")
    log.info(
        "Random search picked candidate %d/%d with MAE %.4f: %s",
        best + 1,
        len(candidates),
        scores[best],
        candidates[best],
    )
    return candidates[best]


class SweepRow(NamedTuple):
    """One model size of the size / error comparison."""

    size_label: str
    params: int
    param_bytes: int
    test_mae: float
    data_bytes: int


def size_sweep(
    record: HouseholdRecord,
    sizes: Sequence[Tuple[int, int]],
    seed: int,
    hp: Optional[ForecastHyperparams] = None,
    repeats: int = 1,
    workers: int = 1,
) -> List[SweepRow]:
    """
    Train one forecaster per (lstm_nodes, fc_nodes) size on a meter.

    MAE is averaged over ``repeats`` seeds. Rows come back sorted by
    parameter count.
    """
    if not sizes:
        raise ContractError("size_sweep needs at least one size")

    base = hp or ForecastHyperparams()
    jobs = [
        (lstm, fc, repeat)
        for lstm, fc in sizes
        for repeat in range(repeats)
    ]
    maes = Parallel(n_jobs=workers)(
        delayed(train_forecaster)(
            record,
            replace(base, lstm_nodes=lstm, fc_nodes=fc),
            child_seed(seed, repeat),
        )
        for lstm, fc, repeat in jobs
    )

    rows = []
    for index, (lstm, fc) in enumerate(sizes):
        runs = maes[index * repeats : (index + 1) * repeats]
        count = parameter_count(lstm, fc)
        rows.append(
            SweepRow(
                size_label(lstm, fc),
                count,
                count * 8,
                float(np.mean([mae for _, mae in runs])),
                record.data_bytes,
            )
        )
    return sorted(rows, key=lambda row: row.params)


def write_sweep_csv(rows: Sequence[SweepRow], path: Path) -> None:
    """Write sweep rows with the ``size_label,...,data_bytes`` header."""
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [row._asdict() for row in rows], columns=SWEEP_COLUMNS
    )
    frame.to_csv(path, index=False)


def _train_or_skip(
    record: HouseholdRecord, hp: ForecastHyperparams, seed: int
) -> Tuple[int, Optional[ForecastModel], str]:
    try:
        model, _ = train_forecaster(record, hp, seed)
    except (DivergenceError, ContractError) as e:
        return record.meter_id, None, str(e)
    return record.meter_id, model, ""


def train_forecasters(
    records: Sequence[HouseholdRecord],
    hp: ForecastHyperparams,
    seed: int,
    store_dir: Optional[Path] = None,
    workers: int = 1,
    desc: str = "forecasters",
) -> Dict[int, ForecastModel]:
    """
    Train one forecaster per record, seeded by ``(seed, meter_id)``.

    Meters whose training diverges or whose series is too short are left
    out with a warning. With ``store_dir`` every model is saved as
    ``<meter_id>.sglk`` plus its JSON sidecar.
    """
    results = Parallel(n_jobs=workers)(
        delayed(_train_or_skip)(
            record, hp, child_seed(seed, record.meter_id)
        )
        for record in tqdm(records, desc=desc, disable=None)
    )

    models: Dict[int, ForecastModel] = {}
    for meter_id, model, error in results:
        if model is None:
            log.warning("Dropping meter %s: %s", meter_id, error)
            continue
        models[meter_id] = model
        if store_dir is not None:
            model.save(store_dir / f"{meter_id}{MODEL_SUFFIX}")

    log.info("Trained %d of %d forecasters", len(models), len(records))
    return models


def load_models(directory: Path) -> Dict[int, ForecastModel]:
    """Read every ``<meter_id>.sglk`` model of a store directory."""
    return {
        int(path.stem): ForecastModel.load(path)
        for path in sorted(directory.glob(f"*{MODEL_SUFFIX}"))
    }
