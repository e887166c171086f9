"""
Experiment configuration.

A YAML file with the sections ``data``, ``split``, ``forecaster``,
``signatures``, ``classifier``, ``baseline``, ``attack`` and ``sweep`` plus
the scalars ``seed``, ``out`` and ``workers``. Every section is optional and
falls back to its defaults; unknown keys are rejected.
"""

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import (
    Any,
    Dict,
    List,
    Mapping,
    Optional,
    Tuple,
    Type,
    TypeVar,
)

import yaml

from gridleak.classifier import ClassifierSettings
from gridleak.dataio import PROPERTIES, SynthConfig
from gridleak.errors import ConfigError
from gridleak.forecaster import (
    PRESETS,
    ForecastHyperparams,
    doubling_sizes,
)


SYNTHETIC = "synthetic"
CSV = "csv"
DATA_SOURCES = (SYNTHETIC, CSV)

LOCAL = "local"
WIRE = "wire"
TRANSPORTS = (LOCAL, WIRE)

T = TypeVar("T")


@dataclass(frozen=True)
class DataConfig:
    """Where the households come from."""

    source: str = SYNTHETIC
    synthetic: SynthConfig = field(default_factory=SynthConfig)
    meters: Optional[str] = None
    labels: Optional[str] = None

    def validate(self) -> None:
        """Raise ConfigError on an unusable data section."""
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"Unknown data source: {self.source}")
        if self.source == CSV and not self.meters:
            raise ConfigError("data.meters is required for CSV data")
        self.synthetic.validate()


@dataclass(frozen=True)
class SplitConfig:
    """Share of the meters, by ascending id, given to the adversary."""

    aux_share: float = 0.8

    def validate(self) -> None:
        """Raise ConfigError on a share outside (0, 1)."""
        if not 0.0 < self.aux_share < 1.0:
            raise ConfigError("split.aux_share must be in (0, 1)")


@dataclass(frozen=True)
class ForecasterConfig:
    """Hyperparameters of both parties and their tuning budget."""

    honest: ForecastHyperparams = field(default_factory=ForecastHyperparams)
    adversary: ForecastHyperparams = field(
        default_factory=ForecastHyperparams
    )
    search_budget: int = 0
    validation_meters: int = 10

    def validate(self) -> None:
        """Raise ConfigError on invalid settings."""
        self.honest.validate()
        self.adversary.validate()
        if self.search_budget < 0:
            raise ConfigError("forecaster.search_budget must be >= 0")
        if self.validation_meters < 1:
            raise ConfigError("forecaster.validation_meters must be >= 1")


@dataclass(frozen=True)
class SignatureConfig:
    """K seed dates and recursion depth; tau defaults to the window size."""

    k: int = 100
    tau: Optional[int] = None

    def validate(self) -> None:
        """Raise ConfigError on K or tau below 1."""
        if self.k < 1:
            raise ConfigError("signatures.k must be >= 1")
        if self.tau is not None and self.tau < 1:
            raise ConfigError("signatures.tau must be >= 1")

    def depth(self, window: int) -> int:
        """Recursion depth for oracles with the given window size."""
        return window if self.tau is None else self.tau


@dataclass(frozen=True)
class BaselineConfig:
    """Raw-data comparator settings."""

    max_days: int = 60

    def validate(self) -> None:
        """Raise ConfigError when fewer than 14 days would be used."""
        if self.max_days < 14:
            raise ConfigError("baseline.max_days must be >= 14")


@dataclass(frozen=True)
class AttackConfig:
    """Which properties to attack and how the honest models are reached."""

    properties: Tuple[str, ...] = PROPERTIES
    transport: str = LOCAL
    random_trials: int = 200
    threshold: float = 0.5

    def validate(self) -> None:
        """Raise ConfigError on unknown properties or transports."""
        unknown = set(self.properties) - set(PROPERTIES)
        if unknown or not self.properties:
            raise ConfigError(
                f"attack.properties must be a non-empty subset of "
                f"{list(PROPERTIES)}"
            )
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"Unknown transport: {self.transport}")
        if self.random_trials < 1:
            raise ConfigError("attack.random_trials must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("attack.threshold must be in (0, 1)")


@dataclass(frozen=True)
class SweepConfig:
    """Architectures compared in the model-size sweep."""

    lstm_nodes: Tuple[int, ...] = (8, 16, 32, 64)
    include_base: bool = True
    repeats: int = 1
    meter: Optional[int] = None

    def validate(self) -> None:
        """Raise ConfigError on an empty sweep."""
        if not self.lstm_nodes and not self.include_base:
            raise ConfigError("sweep has no sizes")
        if any(nodes < 1 for nodes in self.lstm_nodes):
            raise ConfigError("sweep.lstm_nodes must be >= 1")
        if self.repeats < 1:
            raise ConfigError("sweep.repeats must be >= 1")

    def sizes(self) -> List[Tuple[int, int]]:
        """(lstm_nodes, fc_nodes) pairs to train."""
        sizes = doubling_sizes(self.lstm_nodes)
        if self.include_base:
            sizes.append(PRESETS["LSTM_base"])
        return sizes


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run depends on."""

    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    forecaster: ForecasterConfig = field(default_factory=ForecasterConfig)
    signatures: SignatureConfig = field(default_factory=SignatureConfig)
    classifier: ClassifierSettings = field(
        default_factory=ClassifierSettings
    )
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0
    out: str = "out"
    workers: int = -1

    def validate(self) -> None:
        """Validate every section."""
        try:
            for item in fields(self):
                value = getattr(self, item.name)
                if hasattr(value, "validate"):
                    value.validate()
        except TypeError as e:
            raise ConfigError(f"Invalid value type: {e}") from e
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.workers == 0:
            raise ConfigError("workers must be non-zero")

    def as_dict(self) -> Dict[str, Any]:
        """Plain, JSON-serializable mapping."""
        return asdict(self)

    def section(self, name: str) -> Dict[str, Any]:
        """One section as a mapping."""
        return dict(self.as_dict()[name])


def _build(cls: Type[T], values: Any, where: str) -> T:
    if values is None:
        return cls()
    if not isinstance(values, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    known = {item.name for item in fields(cls)}  # type: ignore[arg-type]
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid {where}: {e}") from e


def _hyperparams(values: Any, where: str) -> ForecastHyperparams:
    if values is None:
        return ForecastHyperparams()
    if not isinstance(values, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    try:
        return ForecastHyperparams.from_dict(values)
    except TypeError as e:
        raise ConfigError(f"Invalid {where}: {e}") from e


def config_from_dict(values: Optional[Mapping[str, Any]]) -> ExperimentConfig:
    """Build and validate a configuration from parsed YAML."""
    values = dict(values or {})
    known = {item.name for item in fields(ExperimentConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")

    data = dict(values.get("data") or {})
    synthetic = _build(SynthConfig, data.pop("synthetic", None), "synthetic")
    forecaster = dict(values.get("forecaster") or {})
    honest = _hyperparams(forecaster.pop("honest", None), "forecaster.honest")
    adversary = _hyperparams(
        forecaster.pop("adversary", None), "forecaster.adversary"
    )
    attack = dict(values.get("attack") or {})
    if "properties" in attack:
        attack["properties"] = tuple(attack["properties"])
    sweep = dict(values.get("sweep") or {})
    if "lstm_nodes" in sweep:
        sweep["lstm_nodes"] = tuple(sweep["lstm_nodes"])

    classifier = values.get("classifier") or {}
    if not isinstance(classifier, Mapping):
        raise ConfigError("classifier must be a mapping")
    try:
        classifier_settings = ClassifierSettings.from_dict(classifier)
    except TypeError as e:
        raise ConfigError(f"Invalid classifier: {e}") from e

    scalars = {
        name: values[name]
        for name in ("seed", "out", "workers")
        if name in values
    }
    config = ExperimentConfig(
        data=replace(_build(DataConfig, data, "data"), synthetic=synthetic),
        split=_build(SplitConfig, values.get("split"), "split"),
        forecaster=replace(
            _build(ForecasterConfig, forecaster, "forecaster"),
            honest=honest,
            adversary=adversary,
        ),
        signatures=_build(
            SignatureConfig, values.get("signatures"), "signatures"
        ),
        classifier=classifier_settings,
        baseline=_build(BaselineConfig, values.get("baseline"), "baseline"),
        attack=_build(AttackConfig, attack, "attack"),
        sweep=_build(SweepConfig, sweep, "sweep"),
        **scalars,
    )
    config.validate()
    return config


def load_config(path: Optional[Path]) -> ExperimentConfig:
    """Read a YAML configuration file; no path means all defaults."""
    if path is None:
        return config_from_dict({})
    try:
        with open(path, "r", encoding="utf-8") as f:
            values = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read configuration {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}") from e
    if values is not None and not isinstance(values, Mapping):
        raise ConfigError(f"{path} must hold a mapping")
    return config_from_dict(values)


def with_overrides(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    workers: Optional[int] = None,
) -> ExperimentConfig:
    """Apply command-line overrides and re-validate."""
    changes: Dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["out"] = out
    if workers is not None:
        changes["workers"] = workers
    updated = replace(config, **changes)
    updated.validate()
    return updated
