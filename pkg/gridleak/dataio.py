"""Household load data: synthetic generation, CSV ingestion and splitting."""

from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timedelta
from fractions import Fraction
import json
from math import ceil
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
from numpy.typing import NDArray
import pandas as pd

from gridleak.errors import ConfigError, ContractError, DatasetError
from gridleak.log import log
from gridleak.numerics import Tensor, child_seed


INTERVAL = timedelta(minutes=30)
INTERVAL_MINUTES = 30
STEPS_PER_DAY = 48

SYNTHETIC = "synthetic"
INGESTED = "ingested"

METERS_FILE = "meters.csv"
LABELS_FILE = "labels.csv"
MANIFEST_FILE = "manifest.json"

METER_COLUMNS = ["meter_id", "timestamp", "kwh"]

# The significant properties, in labels-file column order
PROPERTIES = (
    "retired",
    "electric_cooking",
    "children",
    "alone",
    "house_old",
    "detached",
    "console",
    "desktop",
)
LABEL_COLUMNS = ["meter_id", *PROPERTIES]

PROPERTY_NAMES = {
    "retired": "Chief income earner retired or not",
    "electric_cooking": "Cooking facility type",
    "children": "Having children",
    "alone": "Living alone",
    "house_old": "House age",
    "detached": "House type",
    "console": "Number of gaming consoles",
    "desktop": "Number of desktop computers",
}

# Share of label-1 households in real survey answers
LABEL_MARGINALS = {
    "retired": 1285 / 4232,
    "electric_cooking": 1272 / 4232,
    "children": 1229 / 4232,
    "alone": 808 / 4232,
    "house_old": 2152 / 4229,
    "detached": 2189 / 4153,
    "console": 1438 / 4232,
    "desktop": 2001 / 4232,
}

# Gaps up to this many missing intervals are forward-filled
MAX_FILL = 2

_MISSING = {"", "na", "nan", "null", "none"}


@dataclass(frozen=True)
class HouseholdRecord:
    """Half-hourly consumption of one meter."""

    meter_id: int
    readings: Tensor
    start: datetime

    def __post_init__(self) -> None:
        if self.meter_id <= 0:
            raise DatasetError(f"Invalid meter id: {self.meter_id}")
        readings = np.asarray(self.readings, dtype=np.float64)
        if readings.ndim != 1:
            raise DatasetError(f"Meter {self.meter_id}: readings not 1D")
        if not np.all(np.isfinite(readings)) or np.any(readings < 0.0):
            raise DatasetError(
                f"Meter {self.meter_id}: readings must be finite and >= 0"
            )
        object.__setattr__(self, "readings", readings)

    def __len__(self) -> int:
        return int(self.readings.size)

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        """Timestamp of every reading."""
        return pd.date_range(
            self.start, periods=len(self), freq=f"{INTERVAL_MINUTES}min"
        )

    @property
    def end(self) -> datetime:
        """Timestamp of the last reading."""
        return self.start + (len(self) - 1) * INTERVAL

    @property
    def data_bytes(self) -> int:
        """Size of the readings stored as float64."""
        return len(self) * 8

    def tail(self, days: Optional[int]) -> "HouseholdRecord":
        """Keep only the most recent ``days`` days."""
        if days is None or days * STEPS_PER_DAY >= len(self):
            return self
        keep = days * STEPS_PER_DAY
        skipped = len(self) - keep
        return HouseholdRecord(
            self.meter_id,
            self.readings[skipped:],
            self.start + skipped * INTERVAL,
        )


@dataclass(frozen=True)
class PropertyVector:
    """The eight binary significant properties of a household."""

    retired: int
    electric_cooking: int
    children: int
    alone: int
    house_old: int
    detached: int
    console: int
    desktop: int

    def __post_init__(self) -> None:
        for item in fields(self):
            if getattr(self, item.name) not in (0, 1):
                raise DatasetError(
                    f"Label {item.name} must be 0 or 1, "
                    f"got {getattr(self, item.name)!r}"
                )

    def __getitem__(self, name: str) -> int:
        if name not in PROPERTIES:
            raise KeyError(name)
        return int(getattr(self, name))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "PropertyVector":
        """Build from a name to label mapping."""
        return cls(**{name: int(values[name]) for name in PROPERTIES})

    def as_dict(self) -> Dict[str, int]:
        """Name to label mapping."""
        return {name: self[name] for name in PROPERTIES}


class Household(NamedTuple):
    """A meter's record and its labels."""

    record: HouseholdRecord
    properties: PropertyVector


@dataclass
class Dataset:
    """Labelled households from one source."""

    households: List[Household]
    provenance: str

    def __post_init__(self) -> None:
        ids = [household.record.meter_id for household in self.households]
        if len(set(ids)) != len(ids):
            raise DatasetError("Duplicate meter ids in dataset")

    def __len__(self) -> int:
        return len(self.households)

    def __iter__(self) -> Iterator[Household]:
        return iter(self.households)

    @property
    def meter_ids(self) -> List[int]:
        """Meter ids in dataset order."""
        return [household.record.meter_id for household in self.households]

    def record(self, meter_id: int) -> HouseholdRecord:
        """Look up one meter's record."""
        for household in self.households:
            if household.record.meter_id == meter_id:
                return household.record
        raise KeyError(meter_id)

    def labels(self) -> Dict[int, PropertyVector]:
        """Property vectors keyed by meter id."""
        return {
            household.record.meter_id: household.properties
            for household in self.households
        }

    def label_array(self, prop: str) -> NDArray[np.int64]:
        """One property's labels in dataset order."""
        return np.array(
            [household.properties[prop] for household in self.households],
            dtype=np.int64,
        )

    def subset(self, meter_ids: Sequence[int]) -> "Dataset":
        """Households with the given ids, in the given order."""
        by_id = {h.record.meter_id: h for h in self.households}
        return Dataset([by_id[i] for i in meter_ids], self.provenance)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the planted-signal household generator."""

    households: int = 200
    days: int = 120
    strengths: Dict[str, float] = field(
        default_factory=lambda: {name: 1.0 for name in PROPERTIES}
    )
    seed: int = 0
    start: str = "2009-07-14T00:00:00"
    marginals: Dict[str, float] = field(
        default_factory=lambda: dict(LABEL_MARGINALS)
    )
    noise: float = 0.3

    def validate(self) -> None:
        """Raise ConfigError when the configuration cannot be generated."""
        if self.households < 2:
            raise ConfigError("Synthetic data needs at least 2 households")
        if self.days < 14:
            raise ConfigError("Synthetic data needs at least 14 days")
        unknown = set(self.strengths) - set(PROPERTIES)
        if unknown:
            raise ConfigError(f"Unknown properties: {sorted(unknown)}")
        for name, strength in self.strengths.items():
            if strength < 0:
                raise ConfigError(f"Negative signal strength for {name}")
        for name in PROPERTIES:
            if not 0.0 < self.marginals.get(name, 0.5) < 1.0:
                raise ConfigError(f"Label share for {name} outside (0, 1)")
        if self.noise < 0:
            raise ConfigError("Noise level must be >= 0")
        try:
            datetime.fromisoformat(self.start)
        except ValueError as e:
            raise ConfigError(f"Invalid start timestamp: {e}") from e

    def strength(self, name: str) -> float:
        """Effect size of one property (0 when not configured)."""
        return float(self.strengths.get(name, 0.0))


def _bump(hours: Tensor, center: float, width: float) -> Tensor:
    return np.exp(-0.5 * ((hours - center) / width) ** 2)


def _plateau(hours: Tensor, start: float, end: float) -> Tensor:
    return ((hours >= start) & (hours < end)).astype(np.float64)


def _load_profile(
    cfg: SynthConfig,
    labels: PropertyVector,
    rng: np.random.Generator,
    start: datetime,
) -> Tensor:
    steps = cfg.days * STEPS_PER_DAY
    index = np.arange(steps)
    hours = (index % STEPS_PER_DAY) / 2.0
    weekday = (start.weekday() + index // STEPS_PER_DAY) % 7
    weekend = (weekday >= 5).astype(np.float64)
    workday = 1.0 - weekend

    morning = workday * _bump(hours, 7.5, 1.0) + weekend * _bump(
        hours, 9.5, 1.5
    )
    load = (
        0.18
        + 0.35 * morning
        + 0.15 * _bump(hours, 13.0, 2.0)
        + 0.55 * _bump(hours, 19.0, 2.0)
    )

    heating = 0.12 * (1.0 + 0.5 * cfg.strength("house_old") * labels.house_old)
    heating *= 1.0 + 0.5 * cfg.strength("detached") * labels.detached
    load = load + heating

    if labels.retired:
        load = load + cfg.strength("retired") * 0.3 * workday * _bump(
            hours, 12.5, 2.5
        )
    if labels.electric_cooking:
        meals = (
            0.4 * _bump(hours, 8.0, 0.5)
            + 0.6 * _bump(hours, 13.0, 0.5)
            + _bump(hours, 18.5, 0.6)
        )
        load = load + cfg.strength("electric_cooking") * 0.5 * meals
    if labels.children:
        load = load + cfg.strength("children") * (
            0.35 * _bump(hours, 18.5, 1.5)
            + 0.25 * weekend * _bump(hours, 13.0, 2.5)
        )
    if labels.console:
        load = load + cfg.strength("console") * 0.15 * _plateau(hours, 19, 23)
    if labels.desktop:
        load = load + cfg.strength("desktop") * 0.12 * _plateau(hours, 17, 22)
    if labels.alone:
        # Flatter evening as well as lower overall, so scaling keeps it
        alone = min(cfg.strength("alone"), 2.0)
        load = load - 0.25 * alone * _bump(hours, 19.0, 2.0)
        load = load * (1.0 - 0.35 * alone)

    scale = np.exp(rng.normal(0.0, 0.05))
    # Mean-one lognormal factor per interval
    sigma = cfg.noise
    noise = np.exp(rng.normal(-0.5 * sigma * sigma, sigma, size=steps))
    return np.maximum(load, 0.0) * scale * noise


def _synthesize(cfg: SynthConfig, meter_id: int) -> Household:
    rng = np.random.default_rng(child_seed(cfg.seed, meter_id))
    labels = PropertyVector.from_mapping(
        {
            name: int(rng.random() < cfg.marginals.get(name, 0.5))
            for name in PROPERTIES
        }
    )
    start = datetime.fromisoformat(cfg.start)
    readings = _load_profile(cfg, labels, rng, start)
    return Household(HouseholdRecord(meter_id, readings, start), labels)


def generate_dataset(cfg: SynthConfig, workers: int = 1) -> Dataset:
    """
    Generate households whose load shape depends on their properties.

    Each household gets its own child seed derived from the master seed and
    its meter id, so the result does not depend on ``workers``.
    """
    cfg.validate()
    meter_ids = [1000 + i for i in range(cfg.households)]

    log.info(
        "Generating %d synthetic households over %d days",
        cfg.households,
        cfg.days,
    )
    households = Parallel(n_jobs=workers)(
        delayed(_synthesize)(cfg, meter_id) for meter_id in meter_ids
    )
    return Dataset(list(households), SYNTHETIC)


def _fill_gaps(values: Tensor) -> Tuple[int, Tensor]:
    """Forward-fill short gaps, split on long ones, keep the longest part."""
    filled = values.copy()
    missing = np.isnan(filled).astype(np.int8)
    edges = np.flatnonzero(np.diff(np.concatenate(([0], missing, [0]))))
    cuts: List[Tuple[int, int]] = []

    for start, end in zip(edges[::2], edges[1::2]):
        if end - start <= MAX_FILL:
            filled[start:end] = filled[start - 1]
        else:
            cuts.append((start, end))

    segments: List[Tuple[int, int]] = []
    position = 0
    for start, end in cuts:
        segments.append((position, start))
        position = end
    segments.append((position, filled.size))

    begin, finish = max(segments, key=lambda seg: seg[1] - seg[0])
    return begin, filled[begin:finish]


def _parse_int(cell: str) -> float:
    try:
        return float(int(cell.strip()))
    except ValueError:
        return float("nan")


def _parse_float(cell: str) -> float:
    # float() keeps written values bit-exact; inf is as bad as garbage
    try:
        value = float(cell)
    except ValueError:
        return float("nan")
    return value if np.isfinite(value) else float("nan")


def _bad_row(path: Path, mask: "pd.Series[bool]") -> None:
    if mask.any():
        row = int(np.flatnonzero(mask.to_numpy())[0])
        # Header is line 1
        raise DatasetError(f"{path}: malformed row at line {row + 2}")


def _read_meters(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as e:
        raise DatasetError(f"Cannot read {path}: {e}") from e

    if list(frame.columns) != METER_COLUMNS:
        raise DatasetError(
            f"{path}: expected header {','.join(METER_COLUMNS)}"
        )

    meter_ids = frame["meter_id"].map(_parse_int)
    kwh = frame["kwh"].map(_parse_float)
    timestamps = pd.to_datetime(frame["timestamp"], errors="coerce")

    _bad_row(
        path,
        meter_ids.isna()
        | (meter_ids.fillna(1) <= 0)
        | kwh.isna()
        | (kwh.fillna(0.0) < 0)
        | timestamps.isna(),
    )

    return pd.DataFrame(
        {
            "meter_id": meter_ids.astype(np.int64),
            "timestamp": timestamps,
            "kwh": kwh.astype(np.float64),
        }
    )


def _read_labels(path: Path) -> Dict[int, PropertyVector]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as e:
        raise DatasetError(f"Cannot read {path}: {e}") from e

    if list(frame.columns) != LABEL_COLUMNS:
        raise DatasetError(
            f"{path}: expected header {','.join(LABEL_COLUMNS)}"
        )

    labels: Dict[int, PropertyVector] = {}
    for row, values in enumerate(frame.itertuples(index=False), start=2):
        cells = [str(cell).strip() for cell in values]
        try:
            meter_id = int(cells[0])
        except ValueError as e:
            raise DatasetError(f"{path}: malformed row at line {row}") from e

        if any(cell.lower() in _MISSING for cell in cells[1:]):
            log.warning("Meter %d has missing labels, excluded", meter_id)
            continue
        if any(cell not in ("0", "1") for cell in cells[1:]):
            raise DatasetError(f"{path}: malformed row at line {row}")

        labels[meter_id] = PropertyVector(*(int(c) for c in cells[1:]))

    return labels


def load_csv(
    path: Path,
    labels_path: Optional[Path] = None,
    window: int = 48,
) -> Dataset:
    """
    Load meters in the ``meter_id,timestamp,kwh`` layout with their labels.

    The labels default to ``labels.csv`` next to the meters file. Gaps of up
    to two intervals are forward-filled; a longer gap splits the series and
    only its longest stretch is kept. Meters shorter than ``window + 1``
    readings, and meters with missing labels, are dropped with a warning.
    """
    path = Path(path)
    labels_path = (
        Path(labels_path) if labels_path else path.parent / LABELS_FILE
    )

    frame = _read_meters(path)
    labels = _read_labels(labels_path)

    households: List[Household] = []
    for meter_id, group in frame.groupby("meter_id", sort=True):
        meter_id = int(meter_id)
        if meter_id not in labels:
            log.warning("Meter %d has no labels, excluded", meter_id)
            continue

        series = (
            group.drop_duplicates("timestamp", keep="first")
            .set_index("timestamp")["kwh"]
            .sort_index()
        )
        grid = pd.date_range(
            series.index[0],
            series.index[-1],
            freq=f"{INTERVAL_MINUTES}min",
        )
        off_grid = len(series.index.difference(grid))
        if off_grid:
            log.warning(
                "Meter %d: %d readings off the half-hour grid ignored",
                meter_id,
                off_grid,
            )
        values = series.reindex(grid).to_numpy(dtype=np.float64)
        begin, readings = _fill_gaps(values)

        if readings.size < window + 1:
            log.warning(
                "Meter %d has %d readings, fewer than %d, excluded",
                meter_id,
                readings.size,
                window + 1,
            )
            continue

        start = grid[begin].to_pydatetime()
        households.append(
            Household(
                HouseholdRecord(meter_id, readings, start), labels[meter_id]
            )
        )

    if not households:
        raise DatasetError(f"{path}: no usable meters")

    log.info("Ingested %d meters from %s", len(households), path)
    return Dataset(households, INGESTED)


def save_dataset(
    dataset: Dataset,
    directory: Path,
    manifest: Optional[Mapping[str, Any]] = None,
) -> None:
    """Write ``meters.csv``, ``labels.csv`` and ``manifest.json``."""
    directory.mkdir(parents=True, exist_ok=True)

    meters = pd.concat(
        [
            pd.DataFrame(
                {
                    "meter_id": household.record.meter_id,
                    "timestamp": household.record.timestamps.strftime(
                        "%Y-%m-%dT%H:%M:%S"
                    ),
                    "kwh": household.record.readings,
                }
            )
            for household in dataset
        ],
        ignore_index=True,
    )
    meters.to_csv(directory / METERS_FILE, index=False)

    labels = pd.DataFrame(
        [
            {
                "meter_id": household.record.meter_id,
                **household.properties.as_dict(),
            }
            for household in dataset
        ],
        columns=LABEL_COLUMNS,
    )
    labels.to_csv(directory / LABELS_FILE, index=False)

    document = {"provenance": dataset.provenance, "households": len(dataset)}
    document.update(manifest or {})
    with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as f:
        json.dump(document, f, sort_keys=True, indent=2)


def load_dataset(directory: Path, window: int = 48) -> Dataset:
    """Read a directory written by :func:`save_dataset`."""
    with open(directory / MANIFEST_FILE, "r", encoding="utf-8") as f:
        manifest = json.load(f)

    dataset = load_csv(
        directory / METERS_FILE, directory / LABELS_FILE, window=window
    )
    dataset.provenance = manifest.get("provenance", INGESTED)
    return dataset


def synth_manifest(cfg: SynthConfig) -> Dict[str, Any]:
    """Manifest entries describing a generated dataset."""
    return {"seed": cfg.seed, "config": asdict(cfg)}


def split_aux_honest(
    dataset: Dataset, aux_share: float = 0.8
) -> Tuple[Dataset, Dataset]:
    """
    Sort meters by id; the first 80% (rounded up) go to the adversary.

    The rest are the honest users.
    """
    if len(dataset) < 5:
        raise ContractError(
            f"Need at least 5 households to split, got {len(dataset)}"
        )

    ids = sorted(dataset.meter_ids)
    n_aux = ceil(Fraction(str(aux_share)) * len(ids))
    return dataset.subset(ids[:n_aux]), dataset.subset(ids[n_aux:])


def pick_meters(dataset: Dataset, count: int, seed: int) -> List[int]:
    """Choose up to ``count`` meter ids at random, reproducibly."""
    ids = sorted(dataset.meter_ids)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ids), size=min(count, len(ids)), replace=False)
    return [ids[i] for i in sorted(chosen)]
