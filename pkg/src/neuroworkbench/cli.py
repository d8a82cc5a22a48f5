"""Command line: ``generate``, ``run`` and ``eval``.

Any flag may also come from a flat ``key = value`` config file (``--config``);
values given on the command line win. An optional ``[prices]`` section in the
same file holds ``model = input, output`` lines (cents per 1M tokens).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .agents import Topology
from .backends.base import DEFAULT_PRICES, ConfigError, load_price_table
from .benchmark.dataset import FormatError, load_dataset, save_dataset
from .benchmark.phantom import SpecError
from .benchmark.suite import PROFILES, generate_suite, mean_plan_lengths
from .evaluation import aggregate
from .harness import RunConfig, evaluate_traces, run_suite, write_reports

log = logging.getLogger("neuroworkbench")

EXIT_OK, EXIT_FAIL, EXIT_PARTIAL = 0, 1, 2

# config-file key -> (argparse dest, converter)
_CONFIG_KEYS = {
    "dataset": ("dataset", str),
    "out": ("out", str),
    "topology": ("topology", lambda v: [s.strip() for s in v.split(",") if s.strip()]),
    "backend": ("backend", str),
    "model": ("model", str),
    "budget": ("budget", int),
    "noise": ("noise", float),
    "seed": ("seed", int),
    "parallel": ("parallel", int),
    "delay_seconds": ("delay_seconds", float),
    "prices": ("prices", str),
    "profile": ("profile", str),
    "endpoint": ("endpoint", str),
    "requests_per_minute": ("requests_per_minute", float),
}


def parse_config(text: str) -> tuple[dict, str]:
    """Split a config file into flag values and the raw ``[prices]`` section."""
    values, price_lines, section = {}, [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            continue
        if section == "prices":
            price_lines.append(line)
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        dest, conv = _CONFIG_KEYS[key]
        try:
            values[dest] = conv(value)
        except ValueError:
            raise ConfigError(f"config line {lineno}: bad value for {key}: {value!r}") from None
    return values, "\n".join(price_lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # defaults are None so that config-file values can fill the gaps
    common.add_argument("--config", help="flat key = value file; command line wins")
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--prices", help="price table file (model = in, out cents per 1M tokens)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="neuroworkbench", description="Neuroimaging agent benchmark workbench.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate a benchmark dataset and its volumes")
    g.add_argument("--profile", choices=sorted(PROFILES))
    g.add_argument("--no-volumes", action="store_true", help="write only the jsonl files")

    r = sub.add_parser("run", parents=[common], help="run episodes and evaluate them")
    r.add_argument("--topology", action="append", help="repeatable; default all four")
    r.add_argument("--backend", help="scripted | planner | remote | remote:<model>")
    r.add_argument("--model")
    r.add_argument("--endpoint", help="chat-completions URL for the remote backend")
    r.add_argument("--budget", type=int)
    r.add_argument("--noise", type=float)
    r.add_argument("--parallel", type=int)
    r.add_argument("--delay-seconds", type=float, dest="delay_seconds")
    r.add_argument("--requests-per-minute", type=float, dest="requests_per_minute")

    sub.add_parser("eval", parents=[common], help="score existing traces")
    return p


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge config-file values under command-line values and load the price table."""
    file_values, price_text = {}, ""
    if args.config:
        file_values, price_text = parse_config(Path(args.config).read_text(encoding="utf-8"))
    for dest, value in file_values.items():
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)
    defaults = {"seed": 0, "profile": "default", "backend": "scripted", "budget": None,
                "noise": 0.0, "parallel": 1, "delay_seconds": 0.0, "endpoint": "", "model": None,
                "requests_per_minute": None}
    for dest, value in defaults.items():
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)
    prices = dict(DEFAULT_PRICES)
    if price_text:
        prices.update(load_price_table(price_text))
    if args.prices:
        prices.update(load_price_table(Path(args.prices).read_text(encoding="utf-8")))
    args.price_table = prices
    backend = getattr(args, "backend", "scripted")
    if backend.startswith("remote:"):
        args.backend, args.model = "remote", backend.split(":", 1)[1] or args.model
    return args


def _need(args, *names):
    for n in names:
        if not getattr(args, n, None):
            raise ConfigError(f"--{n.replace('_', '-')} is required")


def cmd_generate(args) -> int:
    _need(args, "out")
    try:
        ds = generate_suite(args.profile, args.seed)
        save_dataset(ds, args.out, write_volumes=not args.no_volumes)
    except (SpecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"{len(ds.items)} items, {len(ds.cases)} cases (profile {ds.profile}, seed {ds.seed})")
    for tier in (1, 2, 3):
        items = ds.by_tier(tier)
        if not items:
            continue
        means = mean_plan_lengths(items)
        lengths = ", ".join(f"{t} {v:.2f}" for t, v in means.items())
        print(f"  tier {tier}: {len(items)} items; mean plan length {lengths}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    topos = tuple(Topology.parse(t) for t in (args.topology or [t.value for t in Topology]))
    kw = {}
    if args.budget is not None:
        kw["budget"] = args.budget
    return RunConfig(
        dataset=Path(args.dataset), out=Path(args.out), topologies=tuple(dict.fromkeys(topos)),
        backend=args.backend, model=args.model, noise=args.noise, parallel=args.parallel,
        delay_seconds=args.delay_seconds, prices=args.price_table, endpoint=args.endpoint,
        requests_per_minute=args.requests_per_minute, **kw,
    )


def cmd_run(args) -> int:
    _need(args, "dataset", "out")
    cfg = _run_config(args)
    ds = load_dataset(cfg.dataset)
    summary = run_suite(cfg, dataset=ds)
    print(f"runs: {len(summary.completed)} completed, {len(summary.skipped)} skipped, {len(summary.failed)} failed")
    for item_id, topo, err in summary.failed:
        print(f"  failed {item_id} [{topo}]: {err}", file=sys.stderr)
    outcome = evaluate_traces(cfg.out, ds, cfg.prices)
    write_reports(cfg.out, outcome)
    if outcome.reports:
        print(outcome_table(outcome))
    code = summary.exit_code
    if code == EXIT_OK and outcome.errors:
        code = EXIT_PARTIAL
    return code


def outcome_table(outcome) -> str:
    return aggregate(outcome.reports).to_text()


def cmd_eval(args) -> int:
    _need(args, "dataset", "out")
    ds = load_dataset(args.dataset)
    outcome = evaluate_traces(Path(args.out), ds, args.price_table)
    if not outcome.reports and not outcome.errors:
        print("no runs found", file=sys.stderr)
        return EXIT_FAIL
    write_reports(Path(args.out), outcome)
    for e in outcome.errors:
        print(f"error: {e}", file=sys.stderr)
    if outcome.reports:
        print(outcome_table(outcome))
    return outcome.exit_code


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = resolve(args)
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, SpecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
