"""Command-line client for the experiment harness.

Thin by design: each subcommand assembles the same request model the HTTP
service accepts and either executes it in process or, with --server, posts it
to a running instance. Output is the CSV document; exit code 0 on success,
2 when verify-bounds or compare flags a violation, 1 on errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import urllib.error
import urllib.request
from pathlib import Path

from .chain import ChainError
from .conditioned import ConvergenceError
from .experiments import ConfigError, compare, run
from .service.schemas import (
    BuilderSpec,
    ChainDocument,
    CompareResponse,
    ExperimentConfig,
    RunResponse,
)

MODES = [
    "solve-qsd",
    "evolve",
    "simulate",
    "stationary",
    "perfect-sample",
    "verify-bounds",
    "sweep",
]


def _add_common(parser: argparse.ArgumentParser, mode: str):
    parser.add_argument("--chain", help="path to a chain spec JSON file")
    parser.add_argument(
        "--builder", choices=["two-state", "walk"], help="bundled chain builder"
    )
    parser.add_argument("--p", type=float, help="walk builder: up-step probability")
    parser.add_argument("--L", type=int, help="walk builder: truncation level")
    parser.add_argument(
        "--mu",
        default=None,
        help="initial distribution: 'uniform', 'point:<label>', or a JSON dict",
    )
    if mode == "sweep":
        parser.add_argument(
            "--N", help="comma-separated particle counts, e.g. 10,100,1000"
        )
    else:
        parser.add_argument("--N", type=int, help="number of particles")
    parser.add_argument("--t", type=float, help="time horizon of the mode")
    parser.add_argument("--replicas", type=int, help="number of replicas")
    parser.add_argument("--seed", type=int, required=True, help="rng seed (mandatory)")
    parser.add_argument("--tol", type=float, help="tolerance where applicable")
    parser.add_argument("--burn-in", type=float, dest="burn_in")
    parser.add_argument("--horizon", type=float)
    parser.add_argument("--out", help="output CSV path (default: stdout)")
    parser.add_argument("--server", help="base URL of a running service instance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qsdfv",
        description=(
            "Quasi-stationary distributions and Fleming-Viot particle experiments"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for mode in MODES:
        _add_common(sub.add_parser(mode, help=f"run the {mode} mode"), mode)
    cmp_parser = sub.add_parser("compare", help="join two result CSVs and emit deltas")
    cmp_parser.add_argument("report_a", help="first CSV path")
    cmp_parser.add_argument("report_b", help="second CSV path")
    cmp_parser.add_argument("--tol", type=float, default=0.0)
    cmp_parser.add_argument("--out", help="output CSV path (default: stdout)")
    cmp_parser.add_argument("--server", help="base URL of a running service instance")
    return parser


def _mu_argument(raw: str | None):
    if raw is None:
        return None
    if raw.startswith("{"):
        return json.loads(raw)
    return raw


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    chain = None
    chain_name = None
    builder = None
    if args.chain:
        path = Path(args.chain)
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"chain file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}") from exc
        chain = ChainDocument.model_validate(document)
        chain_name = path.stem
    if args.builder:
        builder = BuilderSpec(name=args.builder, p=args.p, L=args.L)
    n_value, n_list = None, None
    if args.N is not None:
        if args.command == "sweep":
            n_list = [int(part) for part in str(args.N).split(",") if part]
        else:
            n_value = args.N
    return ExperimentConfig(
        mode=args.command,
        seed=args.seed,
        chain=chain,
        chain_name=chain_name,
        builder=builder,
        mu=_mu_argument(args.mu),
        N=n_value,
        N_list=n_list,
        t=args.t,
        replicas=args.replicas,
        tol=args.tol,
        burn_in=args.burn_in,
        horizon=args.horizon,
        out=args.out,
    )


def _post(server: str, path: str, payload: dict) -> dict:
    request = urllib.request.Request(
        server.rstrip("/") + path,
        data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    try:
        with urllib.request.urlopen(request) as response:
            return json.loads(response.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        detail = exc.read().decode("utf-8", errors="replace")
        raise ConfigError(f"server returned {exc.code}: {detail}") from exc


def _write(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _run_command(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    if args.server:
        payload = _post(args.server, "/run", config.model_dump(exclude_none=True))
        response = RunResponse.model_validate(payload)
    else:
        response = run(config)
    _write(response.csv, config.out)
    return 2 if response.violations else 0


def _compare_command(args: argparse.Namespace) -> int:
    csv_a = Path(args.report_a).read_text(encoding="utf-8")
    csv_b = Path(args.report_b).read_text(encoding="utf-8")
    if args.server:
        payload = _post(
            args.server,
            "/compare",
            {"csv_a": csv_a, "csv_b": csv_b, "tol": args.tol},
        )
        response = CompareResponse.model_validate(payload)
    else:
        response = compare(csv_a, csv_b, args.tol)
    _write(response.csv, args.out)
    return 2 if response.flagged else 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            return _compare_command(args)
        return _run_command(args)
    except (ChainError, ConfigError, ConvergenceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
