"""
Property inference from black-box forecasters.

Offline the adversary trains one shadow forecaster per auxiliary household,
queries each shadow recursively to obtain model signatures and trains one
meta-classifier per property on them. In the active stage the honest
forecaster is queried with the same seed dates and the meta-classifiers
turn its signatures into property probabilities.

A signature starts from a random window in [0, 1]. Each step sends the
window and its timestamps to the oracle, drops the oldest value and appends
the prediction, rescaled into [0, 1] by the running range of everything
seen so far. After tau steps the window is the signature.
"""

from dataclasses import dataclass
from datetime import datetime
from hashlib import sha256
import json
from pathlib import Path
from typing import (
    Any,
    Dict,
    Iterator,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

from joblib import Parallel, delayed
import numpy as np
import pandas as pd
from tqdm import tqdm

from gridleak.blackbox import (
    ForecastQuery,
    ForecastResponse,
    LocalOracle,
    Oracle,
)
from gridleak.classifier import (
    ClassifierSettings,
    TrainedClassifier,
    fit_classifier,
)
from gridleak.dataio import (
    INTERVAL,
    PROPERTIES,
    Dataset,
    PropertyVector,
)
from gridleak.errors import (
    AttackError,
    ContractError,
    OracleError,
    ProtocolError,
    ShapeError,
)
from gridleak.forecaster import (
    ForecastHyperparams,
    ForecastModel,
    train_forecasters,
)
from gridleak.log import log
from gridleak.numerics import Tensor, child_seed


HONEST = "honest"

SIGNATURES_DIR = "signatures"
SIGNATURE_MANIFEST = "manifest.json"

# Share of seed dates that may fail before an oracle is given up on
MAX_GAP_SHARE = 0.1


def _as_datetime(value: Any) -> datetime:
    return pd.Timestamp(value).to_pydatetime()


@dataclass(frozen=True)
class SignatureSpec:
    """How signatures are generated: w, tau, the K seed dates and a seed."""

    w: int
    tau: int
    k: int
    dates: Tuple[datetime, ...]
    seed: int

    def __post_init__(self) -> None:
        if self.w < 1 or self.tau < 1 or self.k < 1:
            raise ContractError(
                f"Signature spec needs w, tau and K >= 1, got "
                f"w={self.w}, tau={self.tau}, K={self.k}"
            )
        dates = tuple(_as_datetime(date) for date in self.dates)
        if len(dates) != self.k:
            raise ContractError(
                f"Signature spec lists {len(dates)} dates for K={self.k}"
            )
        if list(dates) != sorted(dates):
            raise ContractError("Signature seed dates must be sorted")
        object.__setattr__(self, "dates", dates)

    @property
    def dates_hash(self) -> str:
        """SHA-256 of the seed dates, shared by offline and active stage."""
        text = "\n".join(date.isoformat() for date in self.dates)
        return sha256(text.encode("utf-8")).hexdigest()

    @property
    def queries_per_oracle(self) -> int:
        """Oracle queries needed for one signature set."""
        return self.tau * self.k

    def as_dict(self) -> Dict[str, Any]:
        """JSON-serializable description."""
        return {
            "w": self.w,
            "tau": self.tau,
            "k": self.k,
            "seed": self.seed,
            "dates": [date.isoformat() for date in self.dates],
            "dates_hash": self.dates_hash,
        }

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "SignatureSpec":
        """Rebuild from :meth:`as_dict`, checking the dates hash."""
        spec = cls(
            int(values["w"]),
            int(values["tau"]),
            int(values["k"]),
            tuple(datetime.fromisoformat(d) for d in values["dates"]),
            int(values["seed"]),
        )
        expected = values.get("dates_hash")
        if expected is not None and expected != spec.dates_hash:
            raise ContractError("Signature dates do not match their hash")
        return spec


def sample_dates(
    dataset: Dataset, k: int, seed: int, horizon: int = 0
) -> Tuple[datetime, ...]:
    """
    Draw ``k`` sorted half-hour instants from the dataset's date range.

    ``horizon`` intervals are kept free at the end so the queried timestamps
    stay within the range. Dates are drawn without replacement unless the
    range holds fewer than ``k`` slots.
    """
    if len(dataset) == 0:
        raise ContractError("Cannot sample dates from an empty dataset")
    if k < 1:
        raise ContractError("Need at least one seed date")

    records = [household.record for household in dataset]
    start = min(_as_datetime(record.start) for record in records)
    end = max(_as_datetime(record.end) for record in records)
    slots = int((end - start) / INTERVAL) - horizon + 1
    if slots < 1:
        raise ContractError(
            f"Date range {start} to {end} is too short for a horizon of "
            f"{horizon} intervals"
        )

    rng = np.random.default_rng(seed)
    picks = rng.choice(slots, size=k, replace=slots < k)
    return tuple(sorted(start + int(pick) * INTERVAL for pick in picks))


def build_spec(
    aux: Dataset, w: int, tau: int, k: int, seed: int
) -> SignatureSpec:
    """Spec with K dates sampled from the auxiliary data."""
    dates = sample_dates(aux, k, child_seed(seed, 0), w + tau)
    return SignatureSpec(w, tau, k, dates, seed)


class ModelSignature(NamedTuple):
    """The final window of one recursion and its seed date."""

    date: datetime
    values: Tensor


def initial_window(spec: SignatureSpec, date: datetime) -> Tensor:
    """x0, uniform in [0, 1), fixed by the spec seed and the date."""
    date = _as_datetime(date)
    seconds = date.hour * 3600 + date.minute * 60 + date.second
    rng = np.random.default_rng(
        child_seed(spec.seed, date.toordinal(), seconds)
    )
    return rng.random(spec.w)


class QuerySpace:
    """Running min-max map of predictions into the [0, 1] query space."""

    def __init__(self) -> None:
        self.low = 0.0
        self.high = 1.0

    def scale(self, value: float) -> float:
        """Widen the range by ``value`` and map it into [0, 1]."""
        self.low = min(self.low, value)
        self.high = max(self.high, value)
        return (value - self.low) / (self.high - self.low)


def query_times(
    date: datetime, step: int, w: int
) -> Tuple[datetime, ...]:
    """The w+1 timestamps of recursion step ``step`` (1-based)."""
    first = _as_datetime(date) + (step - 1) * INTERVAL
    return tuple(first + offset * INTERVAL for offset in range(w + 1))


def _query(
    date: datetime, step: int, window: Tensor
) -> ForecastQuery:
    return ForecastQuery(
        f"{date.isoformat()}/{step}",
        tuple(float(value) for value in window),
        query_times(date, step, window.size),
    )


def iterate_signature(
    oracle: Oracle, spec: SignatureSpec, date: datetime
) -> Iterator[Tensor]:
    """Yield the window after each of the ``tau`` recursion steps."""
    window = initial_window(spec, date)
    space = QuerySpace()
    for step in range(1, spec.tau + 1):
        response = oracle.query(_query(date, step, window))
        window = np.append(window[1:], space.scale(response.prediction))
        yield window.copy()


def gen_signature(
    oracle: Oracle, spec: SignatureSpec, date: datetime
) -> ModelSignature:
    """Run the recursion for one seed date."""
    window = initial_window(spec, date)
    for window in iterate_signature(oracle, spec, date):  # noqa: B007
        pass
    return ModelSignature(_as_datetime(date), window)


def _lockstep(oracle: LocalOracle, spec: SignatureSpec) -> Tensor:
    """All K recursions at once, one batched query per step."""
    windows = np.stack([initial_window(spec, d) for d in spec.dates])
    spaces = [QuerySpace() for _ in spec.dates]
    for step in range(1, spec.tau + 1):
        responses = oracle.query_batch(
            [
                _query(date, step, window)
                for date, window in zip(spec.dates, windows)
            ]
        )
        appended = [
            space.scale(response.prediction)
            for space, response in zip(spaces, responses)
        ]
        windows = np.concatenate(
            [windows[:, 1:], np.asarray(appended)[:, None]], axis=1
        )
    return windows


class _CountingOracle:
    """Pass-through oracle that counts the queries it forwards."""

    def __init__(self, oracle: Oracle) -> None:
        self.oracle = oracle
        self.count = 0

    def handshake(self) -> Dict[str, int]:
        return self.oracle.handshake()

    def query(self, query: ForecastQuery) -> ForecastResponse:
        self.count += 1
        return self.oracle.query(query)


@dataclass(eq=False)
class SignatureSet:
    """K signatures of one model, rows ordered by seed date."""

    source: str
    dates: Tuple[datetime, ...]
    matrix: Tensor
    gaps: Tuple[datetime, ...] = ()
    queries: int = 0

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.dates):
            raise ShapeError(
                f"Signature set {self.source}: {len(self.dates)} dates "
                f"but matrix of shape {self.matrix.shape}"
            )
        if not np.all(np.isfinite(self.matrix)):
            raise ContractError(
                f"Signature set {self.source} holds non-finite values"
            )

    @property
    def k(self) -> int:
        """Number of signatures."""
        return int(self.matrix.shape[0])

    @property
    def w(self) -> int:
        """Length of every signature."""
        return int(self.matrix.shape[1])

    def signatures(self) -> List[ModelSignature]:
        """Rows as :class:`ModelSignature` objects."""
        return [
            ModelSignature(date, row.copy())
            for date, row in zip(self.dates, self.matrix)
        ]

    def save(self, path: Path) -> None:
        """CSV with a ``date`` and an ``imputed`` column, then w values."""
        gaps = set(self.gaps)
        frame = pd.DataFrame(
            self.matrix, columns=[f"x{i}" for i in range(self.w)]
        )
        frame.insert(0, "imputed", [int(d in gaps) for d in self.dates])
        frame.insert(0, "date", [d.isoformat() for d in self.dates])
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def load(cls, path: Path, source: str) -> "SignatureSet":
        """Read a CSV written by :meth:`save`."""
        frame = pd.read_csv(path, float_precision="round_trip")
        dates = tuple(datetime.fromisoformat(d) for d in frame["date"])
        gaps = tuple(
            date
            for date, imputed in zip(dates, frame["imputed"])
            if imputed
        )
        matrix = frame.drop(columns=["date", "imputed"]).to_numpy(
            dtype=np.float64
        )
        return cls(source, dates, matrix, gaps)


def gen_signature_set(
    oracle: Oracle, spec: SignatureSpec, source: str = HONEST
) -> SignatureSet:
    """
    Generate the K signatures of one oracle.

    Dates whose recursion fails are imputed with the column mean of the
    others and listed in ``gaps``; more than 10% failed dates abort the
    oracle with :class:`AttackError`.
    """
    try:
        hello = oracle.handshake()
    except OracleError as e:
        raise AttackError(f"Oracle {source} unreachable: {e}") from e
    if hello["w"] != spec.w:
        raise AttackError(
            f"Oracle {source} expects windows of {hello['w']} readings, "
            f"signatures use w={spec.w}"
        )

    if isinstance(oracle, LocalOracle):
        before = oracle.stats.total
        matrix = _lockstep(oracle, spec)
        return SignatureSet(
            source,
            spec.dates,
            matrix,
            queries=oracle.stats.total - before,
        )

    counted = _CountingOracle(oracle)
    rows: List[Optional[Tensor]] = []
    for date in spec.dates:
        try:
            rows.append(gen_signature(counted, spec, date).values)
        except (OracleError, ProtocolError) as e:
            log.warning("Signature of %s at %s failed: %s", source, date, e)
            rows.append(None)

    failed = [i for i, row in enumerate(rows) if row is None]
    if len(failed) > MAX_GAP_SHARE * spec.k:
        raise AttackError(
            f"{len(failed)} of {spec.k} signature dates failed for {source}"
        )

    matrix = np.zeros((spec.k, spec.w))
    present = [i for i in range(spec.k) if rows[i] is not None]
    for i in present:
        matrix[i] = rows[i]
    if failed:
        matrix[failed] = matrix[present].mean(axis=0)

    return SignatureSet(
        source,
        spec.dates,
        matrix,
        tuple(spec.dates[i] for i in failed),
        counted.count,
    )


def _shadow_signatures(
    model: ForecastModel, spec: SignatureSpec
) -> SignatureSet:
    return gen_signature_set(LocalOracle(model), spec, str(model.meter_id))


def shadow_signature_sets(
    models: Mapping[int, ForecastModel],
    spec: SignatureSpec,
    workers: int = 1,
) -> Dict[int, SignatureSet]:
    """Signature set of every shadow model."""
    meters = sorted(models)
    sets = Parallel(n_jobs=workers)(
        delayed(_shadow_signatures)(models[meter], spec)
        for meter in tqdm(meters, desc="signatures", disable=None)
    )
    return dict(zip(meters, sets))


def write_signature_store(
    directory: Path,
    spec: SignatureSpec,
    sets: Mapping[Any, SignatureSet],
) -> None:
    """Write ``signatures/<source>.csv`` files and the spec manifest."""
    store = directory / SIGNATURES_DIR
    store.mkdir(parents=True, exist_ok=True)
    for key in sorted(sets, key=str):
        sets[key].save(store / f"{key}.csv")
    with open(store / SIGNATURE_MANIFEST, "w", encoding="utf-8") as f:
        json.dump(spec.as_dict(), f, sort_keys=True, indent=2)


def read_signature_store(
    directory: Path,
) -> Tuple[SignatureSpec, Dict[str, SignatureSet]]:
    """Read what :func:`write_signature_store` wrote."""
    store = directory / SIGNATURES_DIR
    with open(store / SIGNATURE_MANIFEST, "r", encoding="utf-8") as f:
        spec = SignatureSpec.from_dict(json.load(f))
    sets = {
        path.stem: SignatureSet.load(path, path.stem)
        for path in sorted(store.glob("*.csv"))
    }
    for source, sigs in sets.items():
        if sigs.dates != spec.dates:
            raise ContractError(
                f"Signatures of {source} were generated on other dates"
            )
    return spec, sets


def train_shadow_farm(
    aux: Dataset,
    hp: ForecastHyperparams,
    seed: int,
    store_dir: Optional[Path] = None,
    workers: int = 1,
) -> Dict[int, ForecastModel]:
    """
    Train one shadow forecaster per auxiliary household.

    Meters whose training diverges are dropped with a warning; the farm
    fails only when no shadow model is left.
    """
    if len(aux) == 0:
        raise ContractError("The auxiliary dataset is empty")

    models = train_forecasters(
        [household.record for household in aux],
        hp,
        seed,
        store_dir,
        workers,
        desc="shadow models",
    )
    if not models:
        raise AttackError("Every shadow model failed to train")
    return models


class MetaClassifier(TrainedClassifier):
    """Classifier from a K x w signature matrix to one property."""

    @property
    def signature_shape(self) -> Tuple[int, int]:
        """The (K, w) the classifier was trained on."""
        return self.input_shape


def train_meta(
    signature_sets: Mapping[int, SignatureSet],
    labels: Mapping[int, PropertyVector],
    prop: str,
    seed: int,
    settings: Optional[ClassifierSettings] = None,
) -> MetaClassifier:
    """Fit a meta-classifier on the shadow signatures of labelled meters."""
    meters = sorted(set(signature_sets) & set(labels))
    if not meters:
        raise ContractError(f"No labelled signature sets for {prop}")

    shapes = {signature_sets[m].matrix.shape for m in meters}
    if len(shapes) != 1:
        raise ShapeError(f"Signature sets differ in shape: {sorted(shapes)}")

    inputs = np.stack([signature_sets[m].matrix for m in meters])
    targets = np.array([labels[m][prop] for m in meters], dtype=np.int64)
    fitted = fit_classifier(
        inputs, targets, settings or ClassifierSettings(), seed, prop
    )
    return MetaClassifier(
        fitted.net, fitted.settings, fitted.input_shape, fitted.metadata
    )


def _train_meta_or_skip(
    signature_sets: Mapping[int, SignatureSet],
    labels: Mapping[int, PropertyVector],
    prop: str,
    seed: int,
    settings: Optional[ClassifierSettings],
) -> Tuple[str, Optional[MetaClassifier], str]:
    try:
        meta = train_meta(signature_sets, labels, prop, seed, settings)
    except ContractError as e:
        return prop, None, str(e)
    return prop, meta, ""


def train_metas(
    signature_sets: Mapping[int, SignatureSet],
    labels: Mapping[int, PropertyVector],
    seed: int,
    properties: Sequence[str] = PROPERTIES,
    settings: Optional[ClassifierSettings] = None,
    workers: int = 1,
) -> Dict[str, MetaClassifier]:
    """One meta-classifier per property, trained in parallel."""
    results = Parallel(n_jobs=workers)(
        delayed(_train_meta_or_skip)(
            signature_sets,
            labels,
            prop,
            child_seed(seed, PROPERTIES.index(prop)),
            settings,
        )
        for prop in properties
    )
    metas: Dict[str, MetaClassifier] = {}
    for prop, meta, error in results:
        if meta is None:
            log.warning("No meta-classifier for %s: %s", prop, error)
            continue
        metas[prop] = meta
    return metas


def infer_property(cm: MetaClassifier, sigs: SignatureSet) -> float:
    """Probability that the model behind ``sigs`` has the property."""
    if sigs.matrix.shape != cm.signature_shape:
        raise ShapeError(
            f"Meta-classifier for {cm.target} expects (K, w) = "
            f"{cm.signature_shape}, got {sigs.matrix.shape}"
        )
    return float(cm.predict_proba(sigs.matrix[None, :, :])[0])


class AttackResult(NamedTuple):
    """Outcome of the active stage."""

    probabilities: pd.DataFrame
    signatures: Dict[int, SignatureSet]
    queries: int


def run_attack(
    oracles: Mapping[int, Oracle],
    metas: Mapping[str, MetaClassifier],
    spec: SignatureSpec,
    properties: Sequence[str] = PROPERTIES,
) -> AttackResult:
    """
    Attack honest oracles with the offline stage's spec and classifiers.

    Signatures are generated once per oracle and shared by every property.
    Returns a (meters x properties) probability frame; properties without a
    meta-classifier are left out with a warning, meters whose signatures
    could not be generated get empty rows.
    """
    available = []
    for prop in properties:
        if prop in metas:
            available.append(prop)
        else:
            log.warning("No meta-classifier for %s, skipping", prop)

    meters = sorted(oracles)
    frame = pd.DataFrame(
        np.nan,
        index=pd.Index(meters, name="meter_id"),
        columns=available,
        dtype=np.float64,
    )
    signatures: Dict[int, SignatureSet] = {}
    queries = 0

    for meter in tqdm(meters, desc="attack", disable=None):
        try:
            sigs = gen_signature_set(oracles[meter], spec, str(meter))
        except AttackError as e:
            log.warning("Attack on meter %s aborted: %s", meter, e)
            continue
        signatures[meter] = sigs
        queries += sigs.queries
        for prop in available:
            frame.loc[meter, prop] = infer_property(metas[prop], sigs)

    log.info(
        "Attacked %d honest oracles with %d queries", len(signatures), queries
    )
    return AttackResult(frame, signatures, queries)
