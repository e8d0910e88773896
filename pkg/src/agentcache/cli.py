"""Batch runner: policy grids over bundled or user scenarios, and the theory suite.

A scenario file is JSON::

    {"name": ..., "graph": {...} | "path/to/graph.json",
     "base": {SimConfig fields}, "axes": {field: [values]}, "seeds": [...]}

Exit codes: 0 ok, 1 bound violation, 2 unparseable input, 3 invalid values,
4 filesystem error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .callgraph import build_call_graph
from .simulator import CostModel, PromptModel, SimConfig, run
from .theory import TheoryConfig, report_csv, run_suite

log = logging.getLogger("agentcache")

OUT_ENV = "AGENTCACHE_OUT"
DEFAULT_OUT = "results"

EXIT_OK, EXIT_VIOLATION, EXIT_PARSE, EXIT_INVALID, EXIT_FS = 0, 1, 2, 3, 4

BUNDLED = ("loop", "codegen", "static")

_CONFIG_FIELDS = {f.name for f in fields(SimConfig)} - {"graph", "seed"}
_MARKERS = ("first_eviction", "first_termination", "retired_drained")


class ScenarioError(Exception):
    """The scenario file could not be read as a scenario."""


@dataclass
class Scenario:
    name: str
    graph: dict
    base: dict = field(default_factory=dict)
    axes: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])

    def cells(self) -> list[dict]:
        """Cross product of the axes, in file order."""
        keys = list(self.axes)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.axes[k] for k in keys))]

    def validate(self) -> None:
        for key in list(self.base) + list(self.axes):
            if key not in _CONFIG_FIELDS:
                raise ValidationError(f"unknown configuration field {key!r}")
        for key, values in self.axes.items():
            if not isinstance(values, list) or not values:
                raise ValidationError(f"axis {key!r} needs a non-empty list of values")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ValidationError("seeds must be a non-empty list of non-negative integers")
        graph = build_call_graph(self.graph)
        for cell in self.cells():
            make_config(graph, {**self.base, **cell}, self.seeds[0])


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("agentcache") / "scenarios" / f"{name}.json"))


def resolve(path_or_name: str) -> Path:
    if path_or_name in BUNDLED and not Path(path_or_name).exists():
        return bundled_path(path_or_name)
    return Path(path_or_name)


def load_scenario(path_or_name: str | Path) -> Scenario:
    path = resolve(str(path_or_name))
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    if not isinstance(raw, dict) or "graph" not in raw:
        raise ScenarioError(f"{path}: expected an object with a 'graph' entry")
    graph = raw["graph"]
    if isinstance(graph, str):
        gpath = Path(graph)
        if not gpath.is_absolute():
            gpath = path.parent / gpath
        try:
            graph = json.loads(gpath.read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{gpath}: {exc}") from None
    for key in ("base", "axes"):
        if not isinstance(raw.get(key, {}), dict):
            raise ScenarioError(f"{path}: '{key}' must be an object")
    return Scenario(
        name=str(raw.get("name", path.stem)),
        graph=graph,
        base=dict(raw.get("base", {})),
        axes=dict(raw.get("axes", {})),
        seeds=list(raw.get("seeds", [0])),
    )


def make_config(graph, params: dict, seed: int) -> SimConfig:
    params = dict(params)
    try:
        if isinstance(params.get("cost"), dict):
            params["cost"] = CostModel(**params["cost"])
        if isinstance(params.get("prompt"), dict):
            params["prompt"] = PromptModel(**params["prompt"])
        return SimConfig(graph, seed=seed, **params)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


_GRAPHS: dict = {}


def _graph(spec: dict):
    key = json.dumps(spec, sort_keys=True)
    if key not in _GRAPHS:
        _GRAPHS[key] = build_call_graph(spec)
    return _GRAPHS[key]


def run_cell(task):
    graph_spec, params, seed, with_events = task
    result = run(make_config(_graph(graph_spec), params, seed))
    m = result.metrics
    row = m.row()
    row.update({k: m.markers.get(k) for k in _MARKERS})
    return row, m.timeseries, result.events_text() if with_events else None


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.12g}"
    if isinstance(x, (dict, list)):
        return json.dumps(x, sort_keys=True)
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    path.write_text(buf.getvalue())


def run_scenario(scenario: Scenario, out: Path, workers: int = 1, seed_offset: int = 0, events: bool = False) -> Path:
    scenario.validate()
    seeds = [s + seed_offset for s in scenario.seeds]
    cells = scenario.cells()
    tasks = [(scenario.graph, {**scenario.base, **cell}, s, events) for cell in cells for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, tasks))
    else:
        results = [run_cell(t) for t in tasks]

    target = out / scenario.name
    target.mkdir(parents=True, exist_ok=True)
    axis_names = list(scenario.axes)
    metric_names = list(results[0][0]) if results else []

    metrics_rows, series_rows = [], []
    per_cell: dict[int, list[dict]] = {}
    for i, (row, series, text) in enumerate(results):
        c, s = divmod(i, len(seeds))
        cell, seed = cells[c], seeds[s]
        metrics_rows.append([c, *(cell[a] for a in axis_names), seed, *(row[k] for k in metric_names)])
        series_rows.extend([c, seed, idx, rate] for idx, rate in series)
        per_cell.setdefault(c, []).append(row)
        if text is not None:
            (target / "events").mkdir(exist_ok=True)
            (target / "events" / f"cell{c}-seed{seed}.log").write_text(text)

    _write_csv(target / "metrics.csv", ["cell", *axis_names, "seed", *metric_names], metrics_rows)
    _write_csv(target / "timeseries.csv", ["cell", "seed", "window", "hit_rate"], series_rows)

    numeric = [k for k in metric_names if k not in _MARKERS]
    agg_header = ["cell", *axis_names, "runs"]
    for k in numeric:
        agg_header += [f"{k}_mean", f"{k}_std"]
    agg_rows = []
    for c, rows in per_cell.items():
        line = [c, *(cells[c][a] for a in axis_names), len(rows)]
        for k in numeric:
            vals = np.array([r[k] for r in rows], dtype=float)
            line += [float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0]
        agg_rows.append(line)
    _write_csv(target / "aggregate.csv", agg_header, agg_rows)
    return target


def run_theory(out: Path, config: TheoryConfig, checks=("emc", "lipschitz", "ranking", "regret")) -> int:
    result = run_suite(config, checks)
    out.mkdir(parents=True, exist_ok=True)
    (out / "theory-report.csv").write_text(report_csv(result))
    print(result.summary())
    return EXIT_OK if result.ok else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agentcache", description=__doc__.splitlines()[0])
    p.add_argument("--scenario", action="append", default=[],
                   help=f"scenario file, or one of {', '.join(BUNDLED)} (repeatable)")
    p.add_argument("--out", default=None,
                   help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--workers", type=int, default=1, help="worker processes per scenario")
    p.add_argument("--seed-offset", type=int, default=0, help="added to every scenario seed")
    p.add_argument("--events", action="store_true", help="also write per-run event logs")
    p.add_argument("--theory", action="store_true", help="run the bound-checking suite")
    p.add_argument("--theory-scale", type=float, default=1.0,
                   help="multiply the default theory sweep sizes")
    p.add_argument("--theory-seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def output_dir(flag: str | None) -> Path:
    if flag is not None:
        return Path(flag)
    return Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)


def scaled_theory(scale: float, seed: int) -> TheoryConfig:
    base = TheoryConfig()
    # any positive scale keeps at least one instance; zero is rejected downstream
    n = lambda v: max(1, int(round(v * scale))) if scale > 0 else 0
    return TheoryConfig(
        emc_instances=n(base.emc_instances),
        emc_trajectories=max(2, n(base.emc_trajectories)),
        lipschitz_instances=n(base.lipschitz_instances),
        ranking_pairs=n(base.ranking_pairs),
        regret_instances=n(base.regret_instances),
        seed=seed,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if not args.scenario and not args.theory:
        args.scenario = ["loop"]
    out = output_dir(args.out)
    status = EXIT_OK
    try:
        if args.workers < 1:
            raise ValidationError("--workers must be at least 1")
        if args.seed_offset < 0:
            raise ValidationError("--seed-offset must be non-negative")
        for name in args.scenario:
            scenario = load_scenario(name)
            target = run_scenario(scenario, out, args.workers, args.seed_offset, args.events)
            print(f"{scenario.name}: wrote {target}")
        if args.theory:
            status = run_theory(out, scaled_theory(args.theory_scale, args.theory_seed))
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FS
    return status


if __name__ == "__main__":
    sys.exit(main())
