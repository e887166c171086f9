"""
Stage orchestration of a full experiment.

Stages run in dependency order and persist their artifacts under
``<out>/<stage hash>/<stage>/``. A stage hash covers the configuration the
stage reads plus the hashes of the stages it depends on, so a stage whose
inputs did not change is skipped on the next run and an edit only re-runs
what depends on it.
"""

from contextlib import ExitStack
from dataclasses import asdict, dataclass, field, replace
from hashlib import sha256
import json
from pathlib import Path
from time import perf_counter
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import pandas as pd

from gridleak.attack import (
    MetaClassifier,
    build_spec,
    read_signature_store,
    run_attack,
    shadow_signature_sets,
    train_metas,
    train_shadow_farm,
    write_signature_store,
)
from gridleak.baseline import run_baseline, train_baselines
from gridleak.blackbox import LocalOracle, Oracle, WireOracle, serve
from gridleak.classifier import TrainedClassifier
from gridleak.config import CSV, WIRE, ExperimentConfig
from gridleak.dataio import (
    Dataset,
    generate_dataset,
    load_csv,
    load_dataset,
    pick_meters,
    save_dataset,
    split_aux_honest,
    synth_manifest,
)
from gridleak.errors import ConfigError, GridLeakError, StageError
from gridleak.forecaster import (
    SEARCH_SPACE,
    ForecastHyperparams,
    SweepRow,
    load_models,
    random_search,
    size_sweep,
    train_forecasters,
    write_sweep_csv,
)
from gridleak.log import log
from gridleak.metrics import (
    ADVERSARY,
    BASELINE,
    REPORT_CSV,
    LeakageReport,
    build_report,
    evaluate,
    random_rows,
    read_report,
)
from gridleak.numerics import child_seed
from gridleak.plots import plot_report, plot_sweep
from lib import config_hash, rm_path, stage_dir


DATA = "data"
TUNE = "tune"
FORECASTERS = "forecasters"
SIGNATURES = "signatures"
META = "meta"
BASELINE_STAGE = "baseline"
ATTACK = "attack"
REPORT = "report"
SWEEP = "sweep"

STAGES = (
    DATA,
    TUNE,
    FORECASTERS,
    SIGNATURES,
    META,
    BASELINE_STAGE,
    ATTACK,
    REPORT,
)

DEPENDENCIES: Dict[str, Tuple[str, ...]] = {
    DATA: (),
    TUNE: (DATA,),
    FORECASTERS: (TUNE,),
    SIGNATURES: (FORECASTERS,),
    META: (SIGNATURES,),
    BASELINE_STAGE: (DATA,),
    ATTACK: (META,),
    REPORT: (ATTACK, BASELINE_STAGE),
    SWEEP: (TUNE,),
}

DONE = "done"
FAILED = "failed"
SKIPPED = "skipped"

STAGE_FILE = "stage.json"
MANIFEST_FILE = "manifest.json"
DATASET_DIR = "dataset"
HYPERPARAMS_FILE = "hyperparams.json"
SCORES_FILE = "scores.csv"
QUERIES_FILE = "queries.json"
HONEST_DIR = "honest"
SHADOW_DIR = "shadow"
STATS_DIR = "oracle-stats"

# Child-seed keys of the stages, so no two stages share a random stream
_SEED_KEYS = {
    TUNE: 1,
    FORECASTERS: 2,
    SIGNATURES: 3,
    META: 4,
    BASELINE_STAGE: 5,
    REPORT: 6,
    SWEEP: 7,
}


@dataclass
class StageRecord:
    """Outcome of one stage in a run."""

    hash: str
    path: str
    status: str
    seconds: float = 0.0


@dataclass
class RunManifest:
    """What a run did: stage hashes, paths, status, timing and queries."""

    config_hash: str
    stages: Dict[str, StageRecord] = field(default_factory=dict)
    queries: Optional[int] = None

    def save(self, path: Path) -> None:
        """Write the manifest as JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        """Read a manifest written by :meth:`save`."""
        with open(path, "r", encoding="utf-8") as f:
            values = json.load(f)
        return cls(
            values["config_hash"],
            {
                name: StageRecord(**record)
                for name, record in values["stages"].items()
            },
            values.get("queries"),
        )


def _file_digest(path: Path) -> str:
    if not path.exists():
        raise ConfigError(f"Data file {path} does not exist")
    return sha256(path.read_bytes()).hexdigest()


def _scores_to_csv(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, lineterminator="\n")


def read_scores(path: Path) -> pd.DataFrame:
    """Probability frame written by the attack or baseline stage."""
    return pd.read_csv(
        path, index_col="meter_id", float_precision="round_trip"
    )


class Experiment:
    """One configuration and the artifacts it produces."""

    def __init__(self, config: ExperimentConfig) -> None:
        config.validate()
        self.config = config
        self.out = Path(config.out)
        self.seed = config.seed
        self.workers = config.workers
        self.manifest = RunManifest(config_hash(config.as_dict()))
        self._hashes: Dict[str, str] = {}
        self._dataset: Optional[Dataset] = None

    @property
    def manifest_path(self) -> Path:
        """Where the run manifest is written."""
        return self.out / self.manifest.config_hash / MANIFEST_FILE

    @property
    def window(self) -> int:
        """Longest window any configured forecaster needs."""
        forecaster = self.config.forecaster
        return max(forecaster.honest.window, forecaster.adversary.window)

    def _inputs(self, stage: str) -> Dict[str, Any]:
        cfg = self.config
        properties = list(cfg.attack.properties)
        if stage == DATA:
            inputs: Dict[str, Any] = {
                "data": asdict(cfg.data),
                "window": self.window,
            }
            if cfg.data.source == CSV:
                meters = Path(str(cfg.data.meters))
                labels = (
                    Path(cfg.data.labels)
                    if cfg.data.labels
                    else meters.parent / "labels.csv"
                )
                inputs["files"] = [
                    _file_digest(meters),
                    _file_digest(labels),
                ]
            return inputs
        if stage == TUNE:
            return {
                "split": asdict(cfg.split),
                "forecaster": asdict(cfg.forecaster),
                "seed": self.seed,
            }
        if stage == FORECASTERS:
            return {"seed": self.seed}
        if stage == SIGNATURES:
            return {
                "signatures": asdict(cfg.signatures),
                "seed": self.seed,
            }
        if stage == META:
            return {
                "classifier": asdict(cfg.classifier),
                "properties": properties,
                "seed": self.seed,
            }
        if stage == BASELINE_STAGE:
            return {
                "split": asdict(cfg.split),
                "classifier": asdict(cfg.classifier),
                "baseline": asdict(cfg.baseline),
                "properties": properties,
                "seed": self.seed,
            }
        if stage == ATTACK:
            return {"transport": cfg.attack.transport}
        if stage == REPORT:
            return {
                "random_trials": cfg.attack.random_trials,
                "threshold": cfg.attack.threshold,
                "properties": properties,
                "seed": self.seed,
            }
        if stage == SWEEP:
            return {"sweep": asdict(cfg.sweep), "seed": self.seed}
        raise StageError(f"Unknown stage {stage}")

    def stage_hash(self, stage: str) -> str:
        """Hash of a stage's configuration chained with its upstream."""
        if stage not in self._hashes:
            upstream = [self.stage_hash(dep) for dep in DEPENDENCIES[stage]]
            self._hashes[stage] = config_hash(self._inputs(stage), *upstream)
        return self._hashes[stage]

    def path(self, stage: str) -> Path:
        """Artifact directory of a stage."""
        return stage_dir(self.out, self.stage_hash(stage), stage)

    def is_done(self, stage: str) -> bool:
        """True when the stage completed with the current hash."""
        marker = self.path(stage) / STAGE_FILE
        if not marker.exists():
            return False
        with open(marker, "r", encoding="utf-8") as f:
            return json.load(f).get("hash") == self.stage_hash(stage)

    def ensure(self, stage: str) -> Path:
        """Run ``stage`` and everything it depends on, unless complete."""
        for dep in DEPENDENCIES[stage]:
            self.ensure(dep)
        if stage in self.manifest.stages and self.manifest.stages[
            stage
        ].status in (DONE, SKIPPED):
            return self.path(stage)

        directory = self.path(stage)
        if self.is_done(stage):
            log.info("Stage %s is up to date in %s", stage, directory)
            self._record(stage, SKIPPED, 0.0)
            return directory

        rm_path(directory)
        directory.mkdir(parents=True)
        log.info("Running stage %s into %s", stage, directory)
        started = perf_counter()
        runner: Callable[[Path], None] = getattr(self, f"_run_{stage}")
        try:
            runner(directory)
        except ConfigError:
            self._record(stage, FAILED, perf_counter() - started)
            raise
        except (GridLeakError, OSError, KeyError, ValueError) as e:
            self._record(stage, FAILED, perf_counter() - started)
            log.error("Stage %s failed: %s", stage, e)
            if isinstance(e, StageError):
                raise
            raise StageError(f"Stage {stage} failed: {e}") from e

        seconds = perf_counter() - started
        with open(directory / STAGE_FILE, "w", encoding="utf-8") as f:
            json.dump(
                {"stage": stage, "hash": self.stage_hash(stage)},
                f,
                sort_keys=True,
                indent=2,
            )
        self._record(stage, DONE, seconds)
        log.info("Stage %s finished in %.1f s", stage, seconds)
        return directory

    def _record(self, stage: str, status: str, seconds: float) -> None:
        self.manifest.stages[stage] = StageRecord(
            self.stage_hash(stage), str(self.path(stage)), status, seconds
        )
        self.manifest.save(self.manifest_path)

    def stage_seed(self, stage: str) -> int:
        """Seed of a stage's random stream."""
        return child_seed(self.seed, _SEED_KEYS[stage])

    def dataset(self) -> Dataset:
        """The households of the data stage."""
        if self._dataset is None:
            self.ensure(DATA)
            self._dataset = load_dataset(
                self.path(DATA) / DATASET_DIR, self.window
            )
        return self._dataset

    def split(self) -> Tuple[Dataset, Dataset]:
        """(auxiliary, honest) households."""
        return split_aux_honest(self.dataset(), self.config.split.aux_share)

    def hyperparams(self) -> Tuple[ForecastHyperparams, ForecastHyperparams]:
        """(honest, adversary) hyperparameters chosen by the tune stage."""
        path = self.ensure(TUNE) / HYPERPARAMS_FILE
        with open(path, "r", encoding="utf-8") as f:
            values = json.load(f)
        return (
            ForecastHyperparams.from_dict(values["honest"]),
            ForecastHyperparams.from_dict(values["adversary"]),
        )

    def _run_data(self, directory: Path) -> None:
        cfg = self.config.data
        if cfg.source == CSV:
            dataset = load_csv(
                Path(str(cfg.meters)),
                Path(cfg.labels) if cfg.labels else None,
                window=self.window,
            )
            manifest: Dict[str, Any] = {"source": str(cfg.meters)}
        else:
            dataset = generate_dataset(cfg.synthetic, self.workers)
            manifest = synth_manifest(cfg.synthetic)
        save_dataset(dataset, directory / DATASET_DIR, manifest)

    def _run_tune(self, directory: Path) -> None:
        cfg = self.config.forecaster
        aux, honest = self.split()
        seed = self.stage_seed(TUNE)
        honest_hp = cfg.honest
        adversary_hp = cfg.adversary

        if cfg.search_budget > 0:
            honest_meters = pick_meters(
                honest, cfg.validation_meters, child_seed(seed, 0)
            )
            honest_hp = random_search(
                [honest.record(meter) for meter in honest_meters],
                cfg.search_budget,
                child_seed(seed, 1),
                base=cfg.honest,
                workers=self.workers,
            )

        # the adversary learns the window size from the oracle handshake
        adversary_hp = replace(adversary_hp, window=honest_hp.window)
        if cfg.search_budget > 0:
            aux_meters = pick_meters(
                aux, cfg.validation_meters, child_seed(seed, 2)
            )
            space = {
                name: choice
                for name, choice in SEARCH_SPACE.items()
                if name != "window"
            }
            adversary_hp = random_search(
                [aux.record(meter) for meter in aux_meters],
                cfg.search_budget,
                child_seed(seed, 3),
                base=adversary_hp,
                space=space,
                workers=self.workers,
            )

        with open(directory / HYPERPARAMS_FILE, "w", encoding="utf-8") as f:
            json.dump(
                {
                    "honest": honest_hp.as_dict(),
                    "adversary": adversary_hp.as_dict(),
                },
                f,
                sort_keys=True,
                indent=2,
            )

    def _run_forecasters(self, directory: Path) -> None:
        aux, honest = self.split()
        honest_hp, adversary_hp = self.hyperparams()
        seed = self.stage_seed(FORECASTERS)
        train_forecasters(
            [household.record for household in honest],
            honest_hp,
            child_seed(seed, 0),
            directory / HONEST_DIR,
            self.workers,
            desc="honest models",
        )
        train_shadow_farm(
            aux,
            adversary_hp,
            child_seed(seed, 1),
            directory / SHADOW_DIR,
            self.workers,
        )

    def _run_signatures(self, directory: Path) -> None:
        aux, _ = self.split()
        models = load_models(self.path(FORECASTERS) / SHADOW_DIR)
        if not models:
            raise StageError("No shadow models to sign")
        window = next(iter(models.values())).window
        spec = build_spec(
            aux,
            window,
            self.config.signatures.depth(window),
            self.config.signatures.k,
            self.stage_seed(SIGNATURES),
        )
        sets = shadow_signature_sets(models, spec, self.workers)
        write_signature_store(directory, spec, sets)

    def _run_meta(self, directory: Path) -> None:
        aux, _ = self.split()
        spec, sets = read_signature_store(self.path(SIGNATURES))
        metas = train_metas(
            {int(source): sigs for source, sigs in sets.items()},
            aux.labels(),
            self.stage_seed(META),
            self.config.attack.properties,
            self.config.classifier,
            self.workers,
        )
        if not metas:
            raise StageError("No meta-classifier could be trained")
        for prop, meta in metas.items():
            meta.metadata["dates_hash"] = spec.dates_hash
            meta.save(directory / f"{prop}.sglk")

    def metas(self) -> Dict[str, MetaClassifier]:
        """Meta-classifiers of the meta stage."""
        directory = self.ensure(META)
        return {
            path.stem: MetaClassifier.load(path)
            for path in sorted(directory.glob("*.sglk"))
        }

    def _run_baseline(self, directory: Path) -> None:
        aux, honest = self.split()
        classifiers = train_baselines(
            aux,
            self.stage_seed(BASELINE_STAGE),
            self.config.attack.properties,
            self.config.baseline.max_days,
            self.config.classifier,
            self.workers,
        )
        for prop, classifier in classifiers.items():
            classifier.save(directory / f"{prop}.sglk")
        scores = run_baseline(
            honest,
            classifiers,
            self.config.baseline.max_days,
            self.config.attack.properties,
        )
        _scores_to_csv(scores, directory / SCORES_FILE)

    def baselines(self) -> Dict[str, TrainedClassifier]:
        """Raw-data classifiers of the baseline stage."""
        directory = self.ensure(BASELINE_STAGE)
        return {
            path.stem: TrainedClassifier.load(path)
            for path in sorted(directory.glob("*.sglk"))
        }

    def attack_oracles(
        self, directory: Path, oracles: Mapping[int, Oracle]
    ) -> int:
        """Run the active stage against ``oracles`` into ``directory``."""
        metas = self.metas()
        spec, _ = read_signature_store(self.path(SIGNATURES))
        for prop, meta in metas.items():
            if meta.metadata.get("dates_hash") != spec.dates_hash:
                raise StageError(
                    f"Meta-classifier for {prop} was trained on other dates"
                )

        result = run_attack(
            oracles, metas, spec, self.config.attack.properties
        )
        _scores_to_csv(result.probabilities, directory / SCORES_FILE)
        write_signature_store(directory, spec, result.signatures)
        with open(directory / QUERIES_FILE, "w", encoding="utf-8") as f:
            json.dump(
                {
                    "total": result.queries,
                    "per_oracle": spec.queries_per_oracle,
                    "oracles": len(result.signatures),
                },
                f,
                sort_keys=True,
                indent=2,
            )
        self.manifest.queries = result.queries
        return result.queries

    def _run_attack(self, directory: Path) -> None:
        models = load_models(self.ensure(FORECASTERS) / HONEST_DIR)
        if not models:
            raise StageError("No honest models to attack")

        if self.config.attack.transport != WIRE:
            oracles: Dict[int, Oracle] = {
                meter: LocalOracle(model) for meter, model in models.items()
            }
            self.attack_oracles(directory, oracles)
            return

        stats_dir = directory / STATS_DIR
        stats_dir.mkdir(parents=True, exist_ok=True)
        with ExitStack() as stack:
            wire: Dict[int, Oracle] = {}
            for meter, model in models.items():
                handle = serve(model)
                stack.callback(
                    handle.shutdown, stats_dir / f"{meter}.json"
                )
                client = WireOracle(*handle.address)
                stack.callback(client.close)
                wire[meter] = client
            self.attack_oracles(directory, wire)

    def write_report(self, directory: Path, attack_dir: Path) -> None:
        """Score the attack scores in ``attack_dir`` into ``directory``."""
        _, honest = self.split()
        labels = honest.labels()
        cfg = self.config.attack

        adversary = read_scores(attack_dir / SCORES_FILE)
        unlabelled = [m for m in adversary.index if int(m) not in labels]
        if unlabelled:
            log.warning("No labels for attacked meters %s", unlabelled)
            adversary = adversary.drop(index=unlabelled)
        if adversary.empty:
            raise StageError("No labelled meter was attacked")
        baseline = read_scores(self.ensure(BASELINE_STAGE) / SCORES_FILE)
        with open(attack_dir / QUERIES_FILE, "r", encoding="utf-8") as f:
            queries = int(json.load(f)["total"])

        attacked = [int(meter) for meter in adversary.dropna().index]
        rows = [
            *evaluate(baseline, labels, BASELINE, cfg.threshold),
            *random_rows(
                labels,
                attacked,
                cfg.properties,
                self.stage_seed(REPORT),
                cfg.random_trials,
            ),
            *evaluate(adversary, labels, ADVERSARY, cfg.threshold),
        ]
        report = build_report(rows, queries)
        report.write(directory)
        plot_report(report, "auc", directory / "auc.png")
        plot_report(report, "f1", directory / "f1.png")

    def _run_report(self, directory: Path) -> None:
        self.write_report(directory, self.path(ATTACK))

    def report(self) -> LeakageReport:
        """Run everything needed and return the leakage report."""
        directory = self.ensure(REPORT)
        report = read_report(directory / REPORT_CSV)
        with open(
            self.path(ATTACK) / QUERIES_FILE, "r", encoding="utf-8"
        ) as f:
            report.queries = int(json.load(f)["total"])
        return report

    def _run_sweep(self, directory: Path) -> None:
        _, honest = self.split()
        honest_hp, _ = self.hyperparams()
        cfg = self.config.sweep
        meter = cfg.meter if cfg.meter is not None else honest.meter_ids[0]
        try:
            record = self.dataset().record(meter)
        except KeyError as e:
            raise ConfigError(f"sweep.meter {meter} is not in the data") from e
        rows = size_sweep(
            record,
            cfg.sizes(),
            self.stage_seed(SWEEP),
            honest_hp,
            cfg.repeats,
            self.workers,
        )
        write_sweep_csv(rows, directory / "sweep.csv")
        plot_sweep(rows, directory / "sweep.png")

    def sweep(self) -> List[SweepRow]:
        """Run the model-size sweep and return its rows."""
        directory = self.ensure(SWEEP)
        frame = pd.read_csv(directory / "sweep.csv")
        return [
            SweepRow(
                str(row.size_label),
                int(row.params),
                int(row.param_bytes),
                float(row.test_mae),
                int(row.data_bytes),
            )
            for row in frame.itertuples(index=False)
        ]

    def run(self) -> LeakageReport:
        """Every stage of the attack, then the report."""
        for stage in STAGES:
            self.ensure(stage)
        return self.report()
