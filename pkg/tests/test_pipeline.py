from dataclasses import replace
from pathlib import Path
from typing import Any, Dict

import numpy as np
from pytest import TempPathFactory, fixture, mark, raises

from gridleak.config import WIRE, ExperimentConfig, config_from_dict
from gridleak.errors import ConfigError
from gridleak.metrics import (
    ADVERSARY,
    AVERAGE,
    BASELINE,
    RANDOM,
    REPORT_CSV,
)
from gridleak.pipeline import (
    ATTACK,
    BASELINE_STAGE,
    DATA,
    DONE,
    FORECASTERS,
    META,
    REPORT,
    SCORES_FILE,
    SIGNATURES,
    SKIPPED,
    STAGES,
    STATS_DIR,
    TUNE,
    Experiment,
    RunManifest,
    read_scores,
)


PROPERTIES = ["house_old", "detached", "desktop"]


def tiny_settings(out: Path) -> Dict[str, Any]:
    tiny_hp = {"lstm_nodes": 4, "fc_nodes": 8, "window": 8, "epochs": 1}
    return {
        "seed": 0,
        "workers": 1,
        "out": str(out),
        "data": {"synthetic": {"households": 20, "days": 16, "seed": 5}},
        "forecaster": {"honest": tiny_hp, "adversary": tiny_hp},
        "signatures": {"k": 4},
        "classifier": {
            "channels": [4],
            "max_epochs": 2,
            "batch_size": 8,
            "folds": 2,
            "patience": 1,
        },
        "baseline": {"max_days": 14},
        "attack": {"properties": PROPERTIES, "random_trials": 20},
        "sweep": {"lstm_nodes": [2], "include_base": False},
    }


@fixture(scope="module")
def tiny_config(tmp_path_factory: TempPathFactory) -> ExperimentConfig:
    out = tmp_path_factory.mktemp("runs")
    return config_from_dict(tiny_settings(out))


@fixture(scope="module")
def tiny_run(tiny_config: ExperimentConfig) -> Experiment:
    experiment = Experiment(tiny_config)
    experiment.run()
    return experiment


def test_run_produces_report(tiny_run: Experiment) -> None:
    report = tiny_run.report()

    assert len(report) % 3 == 0
    assert report.rows[-3].property == AVERAGE
    assert {row.property for row in report.rows} <= {*PROPERTIES, AVERAGE}
    # 4 honest meters, tau = w = 8, K = 4
    assert report.queries == 4 * 8 * 4
    assert not report.average(RANDOM).is_blank

    report_dir = tiny_run.path(REPORT)
    assert (report_dir / REPORT_CSV).exists()
    assert (report_dir / "auc.png").exists()
    assert (report_dir / "f1.png").exists()


def test_run_manifest(tiny_run: Experiment) -> None:
    manifest = RunManifest.load(tiny_run.manifest_path)

    assert set(STAGES) <= set(manifest.stages)
    assert all(manifest.stages[stage].status == DONE for stage in STAGES)
    assert manifest.queries == 128
    assert manifest.stages[ATTACK].hash == tiny_run.stage_hash(ATTACK)


def test_attack_scores(tiny_run: Experiment) -> None:
    scores = read_scores(tiny_run.path(ATTACK) / SCORES_FILE)
    _, honest = tiny_run.split()

    assert list(scores.index) == sorted(honest.meter_ids)
    assert set(scores.columns) <= set(PROPERTIES)
    values = scores.to_numpy()
    assert np.all((values >= 0) & (values <= 1))


def test_rerun_is_idempotent(
    tiny_run: Experiment, tiny_config: ExperimentConfig
) -> None:
    report_csv = tiny_run.path(REPORT) / REPORT_CSV
    before = report_csv.read_bytes()

    again = Experiment(tiny_config)
    rendered = again.run().render()

    assert report_csv.read_bytes() == before
    assert rendered == tiny_run.report().render()
    manifest = RunManifest.load(again.manifest_path)
    assert all(
        manifest.stages[stage].status == SKIPPED for stage in STAGES
    )


def test_hashes_chain_downstream(tiny_config: ExperimentConfig) -> None:
    base = Experiment(tiny_config)
    changed = Experiment(
        replace(
            tiny_config,
            signatures=replace(tiny_config.signatures, k=5),
        )
    )

    for stage in (DATA, TUNE, FORECASTERS, BASELINE_STAGE):
        assert changed.stage_hash(stage) == base.stage_hash(stage)
    for stage in (SIGNATURES, META, ATTACK, REPORT):
        assert changed.stage_hash(stage) != base.stage_hash(stage)


def test_wire_transport_matches_local(
    tiny_run: Experiment, tiny_config: ExperimentConfig
) -> None:
    wire = Experiment(
        replace(
            tiny_config,
            attack=replace(tiny_config.attack, transport=WIRE),
        )
    )

    directory = wire.ensure(ATTACK)

    assert wire.stage_hash(META) == tiny_run.stage_hash(META)
    assert directory != tiny_run.path(ATTACK)
    local_scores = read_scores(tiny_run.path(ATTACK) / SCORES_FILE)
    wire_scores = read_scores(directory / SCORES_FILE)
    assert np.allclose(
        wire_scores.to_numpy(), local_scores.to_numpy(), atol=1e-6
    )
    assert len(list((directory / STATS_DIR).glob("*.json"))) == 4


def test_metas_match_configured_properties(tiny_run: Experiment) -> None:
    metas = tiny_run.metas()

    assert set(metas) <= set(PROPERTIES)
    for meta in metas.values():
        assert meta.signature_shape == (4, 8)


def test_sweep(tiny_run: Experiment) -> None:
    rows = tiny_run.sweep()

    assert [row.size_label for row in rows] == ["LSTM_2"]
    assert rows[0].param_bytes == rows[0].params * 8
    assert rows[0].test_mae >= 0


def test_adversary_rows_present(tiny_run: Experiment) -> None:
    report = tiny_run.report()
    adversary = [
        row
        for row in report.rows
        if row.source == ADVERSARY and row.property != AVERAGE
    ]

    assert adversary
    assert all(
        0.0 <= row.auc <= 100.0 for row in adversary if not row.is_blank
    )


def test_csv_source_requires_files(tmp_path: Path) -> None:
    settings = tiny_settings(tmp_path)
    settings["data"] = {"source": "csv", "meters": str(tmp_path / "no.csv")}
    experiment = Experiment(config_from_dict(settings))

    with raises(ConfigError, match="does not exist"):
        experiment.ensure(DATA)


def test_csv_source(tmp_path: Path, tiny_run: Experiment) -> None:
    dataset_dir = tiny_run.path(DATA) / "dataset"
    settings = tiny_settings(tmp_path)
    settings["data"] = {
        "source": "csv",
        "meters": str(dataset_dir / "meters.csv"),
    }
    experiment = Experiment(config_from_dict(settings))

    dataset = experiment.dataset()

    assert dataset.meter_ids == tiny_run.dataset().meter_ids
    assert dataset.provenance == "ingested"
    assert dataset.labels() == tiny_run.dataset().labels()


STRONG = ["retired", "electric_cooking", "children", "alone"]
WEAK = ["house_old", "detached", "console", "desktop"]


@mark.slow
def test_leakage_follows_planted_signal(tmp_path: Path) -> None:
    hp = {"lstm_nodes": 8, "fc_nodes": 16, "window": 24, "epochs": 10}
    settings = {
        "seed": 0,
        "workers": -1,
        "out": str(tmp_path),
        "data": {
            "synthetic": {
                "households": 250,
                "days": 28,
                "seed": 11,
                "strengths": {prop: 1.0 for prop in STRONG},
            }
        },
        "split": {"aux_share": 0.6},
        "forecaster": {"honest": hp, "adversary": hp},
        "signatures": {"k": 30},
        "baseline": {"max_days": 14},
        "attack": {"random_trials": 200},
        "sweep": {"lstm_nodes": [2], "include_base": False},
    }

    report = Experiment(config_from_dict(settings)).run()

    adversary = {
        prop: report.row(prop, ADVERSARY).auc for prop in STRONG + WEAK
    }
    for prop in STRONG:
        assert adversary[prop] >= 65.0, prop
    assert 40.0 <= np.mean([adversary[prop] for prop in WEAK]) <= 60.0
    assert max(adversary[p] for p in WEAK) < min(
        adversary[p] for p in STRONG
    )
    baseline = [report.row(prop, BASELINE).auc for prop in STRONG]
    assert np.mean(baseline) >= 60.0
    assert 48.0 <= report.average(RANDOM).auc <= 52.0
