"""Command line front-end: generate traces, run simulations, compare schedulers, check the oracle.

Every run-level setting can come from (highest first) a command line flag,
an ``ONES_<KEY>`` environment variable, a ``key = value`` config file passed
with ``--config``, or the built-in default.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from ones import oracle, traces
from ones.baselines import BaselineConfig, make_baseline
from ones.domain import ClusterSpec
from ones.evolution import EvolutionConfig
from ones.metrics import cf_csv, improvement, records_csv
from ones.predictor import PredictorConfig
from ones.scaling import PolicyConfig
from ones.scheduler import OnesPolicy
from ones.simulator import OverheadModelParams, SimResult, simulate

SCHEDULERS = ("ones", "fifo", "las", "srpt")
ENV_PREFIX = "ONES_"
STEP_COLUMNS = ["time", "job_id", "reason", "old_batch", "new_batch", "old_lr", "new_lr"]
COMPARE_COLUMNS = ["scheduler", "jct_mean", "jct_median", "queuing_mean", "queuing_median",
                   "execution_mean", "execution_median", "improvement_pct"]


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # cluster
    gpus: Optional[int] = None
    nodes: Optional[int] = None
    gpus_per_node: int = 4
    # run
    scheduler: str = "ones"
    trace: Optional[str] = None
    out: Optional[str] = None
    seed: int = 0
    # evolution
    population: Optional[int] = None
    mutation_rate: float = 0.2
    generations: int = 50
    rho_draws: int = 1
    # scaling policy
    sigma: str = "auto"
    warmup_epochs: int = 1
    # predictor
    cold_beta: float = 4.0
    # overhead
    elastic_seconds: float = 1.0
    checkpoint_seconds: float = 20.0
    overhead_mode: str = "stall"
    # baselines
    reschedule_interval: float = 600.0
    las_thresholds: str = "1000,10000,100000"

    def cluster(self, trace: Optional[traces.TraceFile] = None) -> ClusterSpec:
        if self.nodes is not None:
            return ClusterSpec(self.nodes, self.gpus_per_node)
        if self.gpus is not None:
            return ClusterSpec.with_gpus(self.gpus, self.gpus_per_node)
        if trace is not None and trace.cluster is not None:
            return trace.cluster
        return ClusterSpec(16, 4)

    def evolution(self) -> EvolutionConfig:
        return EvolutionConfig(population_size=self.population, mutation_rate=self.mutation_rate,
                               generations_per_round=self.generations, rng_seed=self.seed,
                               rho_draws=self.rho_draws)

    def policy(self) -> PolicyConfig:
        sigma = self.sigma if self.sigma == "auto" else float(self.sigma)
        return PolicyConfig(sigma=sigma, warmup_epochs=self.warmup_epochs)

    def overhead(self) -> OverheadModelParams:
        return OverheadModelParams(self.elastic_seconds, self.checkpoint_seconds,
                                   self.overhead_mode)

    def thresholds(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.las_thresholds.split(",") if x.strip())

    def make_scheduler(self, kind: Optional[str] = None):
        kind = kind or self.scheduler
        if kind == "ones":
            return OnesPolicy(self.evolution(), self.policy(),
                              PredictorConfig(cold_beta=self.cold_beta), seed=self.seed)
        if kind in ("fifo", "las", "srpt"):
            return make_baseline(kind, BaselineConfig(kind, self.reschedule_interval,
                                                      self.thresholds()))
        raise UsageError(f"unknown scheduler {kind!r} (choose from {', '.join(SCHEDULERS)})")


def _convert(name: str, raw: str):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if ftype in ("int", "Optional[int]"):
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError as exc:
        raise UsageError(f"bad value for {name}: {raw!r}") from exc
    return raw


def read_config_file(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            values[key] = _convert(key, raw)
    for f in fields(RunConfig):
        raw = environ.get(ENV_PREFIX + f.name.upper())
        if raw is not None:
            values[f.name] = _convert(f.name, raw)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# -- commands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    cluster = None
    if args.nodes is not None or args.gpus is not None:
        cluster = (ClusterSpec(args.nodes, args.gpus_per_node) if args.nodes is not None
                   else ClusterSpec.with_gpus(args.gpus, args.gpus_per_node))
    trace = traces.generate(args.jobs, args.arrival_rate, args.seed, cluster=cluster)
    traces.save(trace, args.output)
    print(f"wrote {args.output}")
    print("\n".join(traces.summary_lines(trace)))
    return 0


def _load_trace(cfg: RunConfig) -> traces.TraceFile:
    if not cfg.trace:
        raise UsageError("a trace file is required (--trace)")
    return traces.load(cfg.trace)


def _run(cfg: RunConfig, trace: traces.TraceFile, kind: str) -> SimResult:
    cluster = cfg.cluster(trace)
    return simulate(trace.jobs, cluster, cfg.make_scheduler(kind), cfg.overhead(), cfg.seed)


def steps_csv(result: SimResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEP_COLUMNS)
    for s in result.steps:
        w.writerow(s.as_row())
    return buf.getvalue()


def summary_text(result: SimResult, cluster: ClusterSpec) -> str:
    util = result.busy_gpu_seconds / (cluster.size * result.makespan) if result.makespan else 0.0
    head = [f"scheduler = {result.scheduler}",
            f"gpus = {cluster.size}",
            f"makespan = {result.makespan:.6f}",
            f"busy_gpu_seconds = {result.busy_gpu_seconds:.6f}",
            f"utilization = {util:.6f}",
            f"deployments = {len(result.deployments)}",
            f"reconfigurations = {result.reconfigurations}",
            f"total_execution = {result.total_execution:.6f}"]
    return "\n".join(head) + "\n" + result.summary.dumps()


def write_outputs(result: SimResult, cluster: ClusterSpec, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    name = result.scheduler
    files = {
        out / f"{name}_jobs.csv": records_csv(result.records),
        out / f"{name}_summary.txt": summary_text(result, cluster),
        out / f"{name}_cf.csv": cf_csv(result.summary.cf_curve),
        out / f"{name}_scaling.csv": steps_csv(result),
    }
    for path, text in files.items():
        path.write_text(text)
    return list(files)


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    if cfg.scheduler not in SCHEDULERS:
        raise UsageError(f"unknown scheduler {cfg.scheduler!r} "
                         f"(choose from {', '.join(SCHEDULERS)})")
    trace = _load_trace(cfg)
    result = _run(cfg, trace, cfg.scheduler)
    cluster = cfg.cluster(trace)
    print(summary_text(result, cluster), end="")
    if cfg.out:
        for path in write_outputs(result, cluster, Path(cfg.out)):
            print(f"wrote {path}")
    return 0


def compare_rows(results: Sequence[SimResult]) -> list[list[str]]:
    by_name = {r.scheduler: r for r in results}
    ones_mean = by_name["ones"].summary.stats["jct"].mean if "ones" in by_name else None
    rows = []
    for r in results:
        s = r.summary.stats
        imp = "" if ones_mean is None else f"{improvement(s['jct'].mean, ones_mean):.2f}"
        rows.append([r.scheduler,
                     f"{s['jct'].mean:.3f}", f"{s['jct'].median:.3f}",
                     f"{s['queuing'].mean:.3f}", f"{s['queuing'].median:.3f}",
                     f"{s['execution'].mean:.3f}", f"{s['execution'].median:.3f}", imp])
    return rows


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w)
                               for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    names = [s.strip() for s in args.schedulers.split(",") if s.strip()]
    if len(names) < 2:
        raise UsageError("compare needs at least two schedulers")
    unknown = [n for n in names if n not in SCHEDULERS]
    if unknown:
        raise UsageError(f"unknown scheduler(s): {', '.join(unknown)}")
    if len(set(names)) != len(names):
        raise UsageError("duplicate scheduler names")
    cfg = resolve_config(args)
    trace = _load_trace(cfg)
    results = [_run(cfg, trace, n) for n in names]
    rows = compare_rows(results)
    print(format_table(COMPARE_COLUMNS, rows), end="")
    if cfg.out:
        out = Path(cfg.out)
        cluster = cfg.cluster(trace)
        for r in results:
            write_outputs(r, cluster, out)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        w.writerows(rows)
        (out / "compare.csv").write_text(buf.getvalue())
        print(f"wrote {out / 'compare.csv'}")
    return 0


def cmd_oracle(args) -> int:
    try:
        oracle.check_bounds(args.gpus, args.jobs, args.options)
    except oracle.InstanceTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    matched = 0
    lines = ["seed,optimum,evolved,genomes,match"]
    for seed in range(args.seed, args.seed + args.runs):
        inst = oracle.random_instance(seed, args.gpus, args.jobs, args.options)
        best = oracle.optimum(inst)
        got = oracle.evolve(inst, args.generations, args.population, args.mutation_rate, seed)
        ok = oracle.scores_match(best.score, got.score)
        matched += ok
        lines.append(f"{seed},{best.score:.9f},{got.score:.9f},{best.evaluated},{int(ok)}")
        if args.runs == 1:
            alloc = " ".join(f"job{j}:B={b},c={c}" for j, (b, c) in sorted(best.allocation.items()))
            lines.append(f"# optimum schedule: {alloc}")
            lines.append(f"# evolved genome: {got.genome!r}")
    lines.append(f"# matched {matched} of {args.runs}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.output:
        Path(args.output).write_text(text)
    return 0


# -- parser --------------------------------------------------------------------

def _add_run_options(p: argparse.ArgumentParser) -> None:
    # defaults stay None so unset flags fall through to env / file / defaults
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--trace", help="trace CSV")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--gpus", type=int, help="total GPUs (split into nodes of --gpus-per-node)")
    p.add_argument("--nodes", type=int)
    p.add_argument("--gpus-per-node", dest="gpus_per_node", type=int)
    p.add_argument("--population", type=int, help="evolution population size K")
    p.add_argument("--mutation-rate", dest="mutation_rate", type=float)
    p.add_argument("--generations", type=int, help="evolution generations per round")
    p.add_argument("--rho-draws", dest="rho_draws", type=int)
    p.add_argument("--sigma", help="scale-down rate per second, or 'auto'")
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    p.add_argument("--cold-beta", dest="cold_beta", type=float)
    p.add_argument("--elastic-seconds", dest="elastic_seconds", type=float)
    p.add_argument("--checkpoint-seconds", dest="checkpoint_seconds", type=float)
    p.add_argument("--overhead-mode", dest="overhead_mode", choices=["stall", "account"])
    p.add_argument("--reschedule-interval", dest="reschedule_interval", type=float)
    p.add_argument("--las-thresholds", dest="las_thresholds",
                   help="comma separated GPU-second boundaries")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ones-sim",
                                     description="GPU cluster batch-size scheduling simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic Poisson trace")
    g.add_argument("--jobs", type=int, default=400)
    g.add_argument("--lambda", dest="arrival_rate", type=float, default=0.005,
                   help="arrivals per second")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gpus", type=int)
    g.add_argument("--nodes", type=int)
    g.add_argument("--gpus-per-node", dest="gpus_per_node", type=int, default=4)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("simulate", help="run one scheduler on a trace")
    s.add_argument("--scheduler")
    _add_run_options(s)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="run several schedulers on one trace")
    c.add_argument("--schedulers", default="ones,fifo,las,srpt")
    _add_run_options(c)
    c.set_defaults(func=cmd_compare)

    o = sub.add_parser("oracle", help="brute-force optimum versus evolution on micro-instances")
    o.add_argument("--gpus", type=int, default=4)
    o.add_argument("--jobs", type=int, default=3)
    o.add_argument("--options", type=int, default=3, help="batch options per job")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--runs", type=int, default=1)
    o.add_argument("--generations", type=int, default=200)
    o.add_argument("--population", type=int, default=4)
    o.add_argument("--mutation-rate", dest="mutation_rate", type=float, default=0.2)
    o.add_argument("-o", "--output")
    o.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, traces.TraceError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
