"""Run property-inference experiments against load forecasters."""

from argparse import (
    ArgumentDefaultsHelpFormatter,
    ArgumentParser,
    Namespace,
)
from dataclasses import replace
from pathlib import Path
from signal import SIGINT, SIGTERM, signal
from sys import exit, stderr
from threading import Event
from typing import Any, Callable, Dict, List, Optional, Sequence

from gridleak import __version__
from gridleak.blackbox import Oracle, WireOracle, parse_endpoint, serve
from gridleak.config import (
    CSV,
    SYNTHETIC,
    ExperimentConfig,
    load_config,
    with_overrides,
)
from gridleak.errors import ConfigError, GridLeakError, OracleError
from gridleak.forecaster import ForecastModel
from gridleak.log import log, setup
from gridleak.pipeline import (
    BASELINE_STAGE,
    DATA,
    FORECASTERS,
    META,
    REPORT,
    SIGNATURES,
    TUNE,
    Experiment,
)
from lib import config_hash, rm_path, stage_dir


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3

REMOTE_ATTACK = "attack-remote"

Command = Callable[[Namespace], None]


def _config(args: Namespace) -> ExperimentConfig:
    config = load_config(Path(args.config) if args.config else None)
    return with_overrides(config, args.seed, args.out, args.workers)


def _experiment(args: Namespace) -> Experiment:
    return Experiment(_config(args))


def _stage_command(stage: str) -> Command:
    def command(args: Namespace) -> None:
        directory = _experiment(args).ensure(stage)
        print(f"Stage {stage} complete in {directory}")

    return command


def cmd_gen_data(args: Namespace) -> None:
    """Generate the synthetic households."""
    config = _config(args)
    config = replace(config, data=replace(config.data, source=SYNTHETIC))
    directory = Experiment(config).ensure(DATA)
    print(f"Synthetic households written to {directory}")


def cmd_ingest(args: Namespace) -> None:
    """Ingest meters and labels from CSV files."""
    config = _config(args)
    data = replace(
        config.data,
        source=CSV,
        meters=args.meters,
        labels=args.labels or config.data.labels,
    )
    config = replace(config, data=data)
    config.validate()
    directory = Experiment(config).ensure(DATA)
    print(f"Ingested households written to {directory}")


def serve_until(
    model_path: Path,
    host: str,
    port: int,
    stop: Event,
    stats_path: Optional[Path] = None,
) -> None:
    """Serve a stored forecaster until ``stop`` is set."""
    model = ForecastModel.load(model_path)
    handle = serve(model, host, port)
    bound_host, bound_port = handle.address
    print(
        f"Serving {model_path} on {bound_host}:{bound_port}", flush=True
    )
    try:
        while not stop.wait(0.2):
            pass
    finally:
        handle.shutdown(stats_path)


def cmd_serve(args: Namespace) -> None:
    """Serve one forecaster over the wire protocol until terminated."""
    model_path = Path(args.model)
    stats_path = (
        Path(args.stats)
        if args.stats
        else model_path.with_name(model_path.name + ".stats.json")
    )
    stop = Event()

    def _stop(*_: Any) -> None:
        stop.set()

    previous = {sig: signal(sig, _stop) for sig in (SIGTERM, SIGINT)}
    try:
        serve_until(model_path, args.host, args.port, stop, stats_path)
    finally:
        for sig, handler in previous.items():
            signal(sig, handler)


def _endpoints(values: Sequence[str]) -> Dict[int, str]:
    endpoints = {}
    for value in values:
        meter, sep, endpoint = value.partition("=")
        if not sep or not meter.isdigit():
            raise ConfigError(
                f"Invalid endpoint {value!r}, use METER=HOST:PORT"
            )
        try:
            parse_endpoint(endpoint)
        except OracleError as e:
            raise ConfigError(str(e)) from e
        endpoints[int(meter)] = endpoint
    return endpoints


def cmd_attack(args: Namespace) -> None:
    """Run the active stage, locally or against served forecasters."""
    experiment = _experiment(args)
    if not args.endpoint:
        directory = experiment.ensure("attack")
        print(f"Attack scores written to {directory}")
        return

    endpoints = _endpoints(args.endpoint)
    directory = stage_dir(
        experiment.out,
        config_hash(
            {"endpoints": endpoints}, experiment.stage_hash(META)
        ),
        REMOTE_ATTACK,
    )
    rm_path(directory)
    directory.mkdir(parents=True)

    oracles: Dict[int, Oracle] = {}
    clients: List[WireOracle] = []
    for meter, endpoint in sorted(endpoints.items()):
        client = WireOracle(*parse_endpoint(endpoint))
        clients.append(client)
        oracles[meter] = client
    try:
        queries = experiment.attack_oracles(directory, oracles)
    finally:
        for client in clients:
            client.close()

    experiment.write_report(directory, directory)
    print(f"Attack on {len(oracles)} oracles used {queries} queries")
    print(f"Results written to {directory}")


def cmd_evaluate(args: Namespace) -> None:
    """Score the attack and the baseline against the honest labels."""
    directory = _experiment(args).ensure(REPORT)
    print(f"Metrics written to {directory}")


def cmd_report(args: Namespace) -> None:
    """Print the leakage report."""
    print(_experiment(args).report().render(), end="")


def cmd_sweep(args: Namespace) -> None:
    """Compare forecaster sizes by test error and weight size."""
    rows = _experiment(args).sweep()
    for row in rows:
        print(
            f"{row.size_label}: {row.params} params, "
            f"{row.param_bytes} bytes, MAE {row.test_mae:.4f} kWh "
            f"(data {row.data_bytes} bytes)"
        )


def cmd_run(args: Namespace) -> None:
    """Run every stage and print the report."""
    experiment = _experiment(args)
    report = experiment.run()
    print(report.render(), end="")
    print(f"Run manifest: {experiment.manifest_path}")


def _global_options() -> ArgumentParser:
    parser = ArgumentParser(add_help=False)
    parser.add_argument(
        "--config", help="YAML experiment configuration", default=None
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="override the master seed"
    )
    parser.add_argument(
        "--out", default=None, help="override the artifact directory"
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help="override the worker count (-1 uses every core)",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="log INFO with -v, DEBUG with -vv",
    )
    return parser


def build_parser() -> ArgumentParser:
    """The ``gridleak`` argument parser."""
    parser = ArgumentParser(
        prog="gridleak",
        description=__doc__.strip(),
        formatter_class=ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    common = _global_options()

    def add(name: str, func: Command, help_text: str) -> ArgumentParser:
        sub = commands.add_parser(
            name,
            parents=[common],
            help=help_text,
            description=help_text,
            formatter_class=ArgumentDefaultsHelpFormatter,
        )
        sub.set_defaults(func=func)
        return sub

    add("gen-data", cmd_gen_data, "generate synthetic households")
    ingest = add("ingest", cmd_ingest, "ingest meters and labels from CSV")
    ingest.add_argument(
        "--meters", required=True, help="meter_id,timestamp,kwh CSV file"
    )
    ingest.add_argument(
        "--labels", default=None, help="labels CSV (default: labels.csv)"
    )
    add("tune", _stage_command(TUNE), "tune forecaster hyperparameters")
    add(
        "train-shadows",
        _stage_command(FORECASTERS),
        "train the honest forecasters and the shadow farm",
    )
    add(
        "signatures",
        _stage_command(SIGNATURES),
        "generate the shadow model signatures",
    )
    add("train-meta", _stage_command(META), "train the meta-classifiers")
    add(
        "train-baseline",
        _stage_command(BASELINE_STAGE),
        "train the raw-data baseline",
    )
    serve_parser = add("serve", cmd_serve, "serve a stored forecaster")
    serve_parser.add_argument("model", help="path of a .sglk model")
    serve_parser.add_argument("--host", default="127.0.0.1")
    serve_parser.add_argument("--port", type=int, default=0)
    serve_parser.add_argument(
        "--stats", default=None, help="where to write query counts on exit"
    )
    attack = add("attack", cmd_attack, "run the active attack stage")
    attack.add_argument(
        "--endpoint",
        action="append",
        default=[],
        metavar="METER=HOST:PORT",
        help="attack a served forecaster instead of the local models",
    )
    add("evaluate", cmd_evaluate, "compute the leakage metrics")
    add("report", cmd_report, "print the leakage report")
    add("sweep", cmd_sweep, "model size versus forecasting error")
    add("run", cmd_run, "run the whole experiment")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Program entrypoint."""
    args = build_parser().parse_args(argv)
    setup(args.verbose)

    try:
        args.func(args)
    except ConfigError as e:
        log.error("Configuration error: %s", e)
        print(f"Configuration error: {e}", file=stderr)
        return EXIT_CONFIG
    except (GridLeakError, OSError) as e:
        log.error("%s failed: %s", args.command, e)
        print(f"Error: {e}", file=stderr)
        return EXIT_FAILURE

    return EXIT_OK


if __name__ == "__main__":
    exit(main())
