"""``sbpairs`` command line.

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .backcast import InvalidSpec, MarketSpec, SimConfig, default_market, gen_feed, run_backcast, write_outputs
from .config import ConfigError, load_settings
from .engine import DecisionLog, EngineConfig
from .feed import MalformedRecord, format_feed, load_universe, read_feed, write_universe
from .marketgraph import build_similarity, load_similarity, minute_histories, write_similarity
from .oracle import enumerate_cycles, random_similarity_graph
from .qubo import QuboProblem, load_graph_dump, load_tabu
from .sbm import SbParams, XorshiftRng, solve_best_of, solver_penalty_weight
from .verify import CyclePath, Violation, decode, evaluate

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("sbpairs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return __version__


def _write_manifest(path: Path, command: str, args: argparse.Namespace, settings=None) -> None:
    record = {
        "command": command,
        "version": _version(),
        "seed": getattr(args, "seed", None),
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"},
    }
    if settings is not None:
        record["settings"] = settings.to_dict()
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- sub-commands -------------------------------------------------------------


def _settings(args, **extra):
    overrides = {"seed": args.seed, **extra}
    return load_settings(args.config, overrides)


def cmd_backcast(args) -> int:
    s = _settings(
        args,
        restarts_per_event=args.restarts,
        log_level=args.log_level,
        fill_model=args.fill_model,
        lapse_probability=args.lapse_probability,
        clamp_lots=True if args.clamp_lots else None,
        commission_rate=args.commission_rate,
    )
    universe = load_universe(args.universe)
    sim = load_similarity(args.sim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_backcast(
        read_feed(args.feed),
        universe,
        sim,
        EngineConfig.from_settings(s),
        SimConfig.from_settings(s),
        DecisionLog(s.log_level),
        measure_latency=args.latency,
    )
    write_outputs(result, out)
    _write_manifest(out / "manifest.json", "backcast", args, s)
    summary = result.summary()
    print(
        f"days={summary['days']} round_trips={summary['round_trips']} "
        f"pnl={summary['cum_realized_pnl']} sharpe={summary['sharpe']}",
        file=sys.stderr,
    )
    return 0


def _problem(args, s):
    graph, m_c, m_p = load_graph_dump(args.graph)
    tabu = load_tabu(args.tabu, graph.n_nodes) if args.tabu else np.zeros((graph.n_nodes,) * 2, dtype=np.int64)
    return graph, tabu, m_c, m_p


def cmd_solve(args) -> int:
    s = _settings(args, restarts_per_event=args.restarts)
    graph, tabu, m_c, m_p = _problem(args, s)
    if m_p is None:
        m_p = s.m_p if s.m_p is not None else solver_penalty_weight(graph.w, s.penalty_scale)
    problem = QuboProblem(graph, tabu, m_c, m_p)
    params = SbParams(s.n_steps, s.dt, s.a0, s.c0, s.machine_size, s.a0_scale, s.c0_gain)
    x, energy = solve_best_of(problem, params, XorshiftRng(s.seed), s.restarts_per_event)
    threshold = s.threshold if args.threshold is None else args.threshold
    decoded = decode(x, graph)
    print("verdict,reason,path,weight_sum,energy")
    if isinstance(decoded, Violation):
        print(f"invalid,{decoded.value},,,{energy!r}")
        return 0
    v = evaluate(decoded, graph, tabu, threshold)
    reason = v.reason.value if v.reason else ""
    print(f"{v.outcome.value},{reason},{decoded.notation()},{decoded.weight_sum!r},{energy!r}")
    return 0


def cmd_oracle(args) -> int:
    graph, _m_c, _m_p = load_graph_dump(args.graph)
    tabu = load_tabu(args.tabu, graph.n_nodes) if args.tabu else None
    res = enumerate_cycles(graph, tabu, args.max_len)
    ranked = res.top(args.top if args.top else res.count)
    print("rank,path,weight_sum,short,long")
    rank = 0
    for p in ranked:
        if p.weight_sum > args.threshold:
            break
        rank += 1
        print(f"{rank},{p.notation()},{p.weight_sum!r},{p.pair[0]},{p.pair[1]}")
    return 0


def cmd_gen_feed(args) -> int:
    if args.spec:
        with open(args.spec, "rb") as fh:
            try:
                spec = MarketSpec.from_mapping(tomllib.load(fh))
            except tomllib.TOMLDecodeError as exc:
                raise InvalidSpec(str(exc)) from exc
    else:
        spec = default_market(args.stocks, args.events, args.days, force_change=not args.no_force_change)
    events = gen_feed(spec, args.seed)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(format_feed(ev) + "\n")
    if args.universe_out:
        write_universe(spec.universe(), args.universe_out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "gen-feed", args)
    return 0


def cmd_build_sim(args) -> int:
    s = _settings(args)
    universe = load_universe(args.universe)
    hist = minute_histories(read_feed(args.feed), universe, s.sample_seconds * 10**9)
    sim = build_similarity(hist, universe.codes, s.dtw_days)
    out = Path(args.out)
    write_similarity(sim, out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "build-sim", args, s)
    return 0


def cmd_bench(args) -> int:
    s = _settings(args)
    params = SbParams(s.n_steps, s.dt, s.a0, s.c0, s.machine_size, s.a0_scale, s.c0_gain)
    gen = np.random.default_rng(args.seed)
    solver_rng = XorshiftRng(args.seed)
    lines = ["instance_id,restarts,best_energy,oracle_energy,success"]
    hits = 0
    for k in range(args.instances):
        graph = random_similarity_graph(args.stocks, gen)
        problem = QuboProblem(graph, np.zeros((graph.n_nodes,) * 2, dtype=np.int64), 1.0,
                              solver_penalty_weight(graph.w, s.penalty_scale))
        x, energy = solve_best_of(problem, params, solver_rng, args.restarts)
        best = enumerate_cycles(graph).best
        decoded = decode(x, graph)
        ok = isinstance(decoded, CyclePath) and math.isclose(decoded.weight_sum, best.weight_sum, rel_tol=0, abs_tol=1e-12)
        hits += ok
        lines.append(f"{k},{args.restarts},{energy!r},{best.weight_sum!r},{int(ok)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        _write_manifest(out.with_name(out.name + ".manifest.json"), "bench", args, s)
    else:
        sys.stdout.write(text)
    print(f"success {hits}/{args.instances}", file=sys.stderr)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sbpairs", description="Pair selection by cycle search on market graphs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="flat TOML config file")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="RNG seed (overrides config)")

    b = sub.add_parser("backcast", help="replay a feed through engine and positions")
    b.add_argument("--feed", required=True)
    b.add_argument("--universe", required=True)
    b.add_argument("--sim", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--restarts", type=int)
    b.add_argument("--log-level", choices=("off", "actions", "all"))
    b.add_argument("--fill-model", choices=("always", "lapse"))
    b.add_argument("--lapse-probability", type=float)
    b.add_argument("--commission-rate")
    b.add_argument("--clamp-lots", action="store_true")
    b.add_argument("--latency", action="store_true", help="write a per-decision latency histogram")
    common(b)
    b.set_defaults(func=cmd_backcast)

    s = sub.add_parser("solve", help="solve one graph dump with SB")
    s.add_argument("--graph", required=True)
    s.add_argument("--tabu")
    s.add_argument("--restarts", type=int)
    s.add_argument("--threshold", type=float)
    common(s)
    s.set_defaults(func=cmd_solve)

    o = sub.add_parser("oracle", help="rank all cycles of a graph dump")
    o.add_argument("--graph", required=True)
    o.add_argument("--tabu")
    o.add_argument("--threshold", type=float, default=math.inf)
    o.add_argument("--top", type=int, default=0, help="print at most this many (0: all)")
    o.add_argument("--max-len", type=int)
    o.set_defaults(func=cmd_oracle)

    g = sub.add_parser("gen-feed", help="write a synthetic feed")
    g.add_argument("--spec", help="TOML market spec (stocks, shocks, ...)")
    g.add_argument("--stocks", type=int, default=15)
    g.add_argument("--events", type=int, default=10_000, help="quote events per day")
    g.add_argument("--days", type=int, default=1)
    g.add_argument("--no-force-change", action="store_true")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", required=True)
    g.add_argument("--universe-out")
    g.set_defaults(func=cmd_gen_feed)

    m = sub.add_parser("build-sim", help="similarity matrix from historical feeds")
    m.add_argument("--feed", required=True)
    m.add_argument("--universe", required=True)
    m.add_argument("--out", required=True)
    common(m)
    m.set_defaults(func=cmd_build_sim)

    k = sub.add_parser("bench", help="SB versus oracle on random instances")
    k.add_argument("--stocks", type=int, default=5)
    k.add_argument("--instances", type=int, default=100)
    k.add_argument("--restarts", type=int, default=100)
    k.add_argument("--out")
    common(k, seed=False)
    k.add_argument("--seed", type=int, default=1)
    k.set_defaults(func=cmd_bench)
    return p


DATA_ERRORS = (ValueError, LookupError, OSError, ConfigError, MalformedRecord, InvalidSpec, ArithmeticError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"sbpairs {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
