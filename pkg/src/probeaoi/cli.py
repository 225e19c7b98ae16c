"""Command-line interface: analyze, simulate, optimize, sweep, compare.

Every output starts with ``#`` lines holding the resolved config, seeds and
a timestamp; the body after them is a deterministic function of the inputs.
Exit status: 0 success, 1 numerical failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .analysis import analyze
from .chain import ConvergenceError, StabilityError
from .model import ConfigError, Mechanism, ProtocolConfig, validate_config
from .optimize import GridSpec, OptimizationError, grid_search, sweep
from .sim import aggregate, physical_factor, replicate, seed_list

COMMANDS = ("analyze", "simulate", "optimize", "sweep", "compare")
CONFIG_FIELDS = {f.name: f.type for f in fields(ProtocolConfig)}
_INT_KEYS = {"n", "M", "horizon", "replications", "seed"}
_FLOAT_KEYS = {"xi", "delta", "q", "eta", "grid_step"}
_EXTRA_KEYS = {"horizon", "replications", "seed", "grid_step", "parameter", "values", "format", "deltas"}


@dataclass
class ExperimentSpec:
    command: str
    config: ProtocolConfig
    horizon: int = 100_000
    replications: int = 10
    base_seed: int = 0
    grid_step: float = 0.01
    output: str | None = None
    format: str = "csv"
    parameter: str | None = None
    values: tuple = ()
    simulate: bool = False
    deltas: tuple = ()

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError("command", f"unknown command {self.command!r}")
        if self.format not in ("csv", "json"):
            raise ConfigError("format", "format must be csv or json")
        if self.horizon < 1:
            raise ConfigError("horizon", f"horizon must be ≥ 1, got {self.horizon}")
        if self.replications < 1:
            raise ConfigError("replications", f"replications must be ≥ 1, got {self.replications}")
        if self.command == "sweep":
            if not self.parameter:
                raise ConfigError("parameter", "sweep needs --parameter")
            if not self.values:
                raise ConfigError("values", "sweep needs --values")

    @property
    def seeds(self) -> list[int]:
        return seed_list(self.base_seed, self.replications)

    def grid(self, **kw) -> GridSpec:
        return GridSpec.uniform(self.grid_step, **kw)


# --- config parsing ---------------------------------------------------------

def _convert(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return _parse_float(raw)
        if key in ("values", "deltas"):
            return tuple(_parse_float(v) for v in raw.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigError(key, f"{key}: cannot parse {raw!r}") from None
    if key == "mechanism":
        return Mechanism.parse(raw)
    return raw


def _parse_float(raw: str) -> float:
    raw = raw.strip()
    if "/" in raw:
        num, den = raw.split("/", 1)
        return float(num) / float(den)
    return float(raw)


def read_config_file(path: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError("config", f"cannot read config file {path}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError("config", f"{path}:{lineno}: expected key=value, got {text!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in CONFIG_FIELDS and key not in _EXTRA_KEYS:
            raise ConfigError(key, f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, raw)
    return out


def build_spec(args: argparse.Namespace) -> ExperimentSpec:
    """Defaults, then the config file, then explicit flags."""
    values = read_config_file(args.config) if args.config else {}
    for key in list(CONFIG_FIELDS) + sorted(_EXTRA_KEYS):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = _convert(key, flag) if isinstance(flag, str) else flag
    cfg = {k: values[k] for k in CONFIG_FIELDS if k in values}
    config = validate_config(ProtocolConfig(**cfg))
    return ExperimentSpec(
        command=args.command,
        config=config,
        horizon=values.get("horizon", 100_000),
        replications=values.get("replications", 10),
        base_seed=values.get("seed", 0),
        grid_step=values.get("grid_step", 0.01),
        output=args.output,
        format=values.get("format", "csv"),
        parameter=values.get("parameter"),
        values=tuple(values.get("values", ())),
        simulate=getattr(args, "simulate", False),
        deltas=tuple(values.get("deltas", ())),
    )


# --- output -----------------------------------------------------------------

def _cell(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v)
    if isinstance(v, Mechanism):
        return v.value
    return v


def _jsonable(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        v = float(v)
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, Mechanism):
        return v.value
    return v


def header_lines(spec: ExperimentSpec, *, simulated: bool) -> list[str]:
    lines = [
        f"probeaoi {__version__} {spec.command}",
        f"generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}",
        "config " + " ".join(f"{k}={_cell(v)}" for k, v in spec.config.as_dict().items()),
        f"grid_step={spec.grid_step!r}",
    ]
    if spec.command == "sweep":
        lines.append(f"parameter={spec.parameter} values={','.join(repr(v) for v in spec.values)}")
    if spec.deltas:
        lines.append("deltas=" + ",".join(repr(v) for v in spec.deltas))
    if simulated:
        lines.append(f"horizon={spec.horizon} replications={spec.replications} "
                     f"seeds={' '.join(str(s) for s in spec.seeds)}")
    return lines


def render(rows: list[dict], spec: ExperimentSpec, *, simulated: bool) -> str:
    head = header_lines(spec, simulated=simulated)
    if spec.format == "json":
        doc = {"meta": head, "rows": [{k: _jsonable(v) for k, v in r.items()} for r in rows]}
        return json.dumps(doc, indent=2) + "\n"
    buf = io.StringIO()
    for line in head:
        buf.write(f"# {line}\n")
    columns = list(dict.fromkeys(k for r in rows for k in r))
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _cell(v) for k, v in r.items()})
    return buf.getvalue()


def emit(rows: list[dict], spec: ExperimentSpec, *, simulated: bool = False, summary: str | None = None) -> None:
    text = render(rows, spec, simulated=simulated)
    if spec.output:
        with open(spec.output, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        if summary:
            print(summary)
    else:
        sys.stdout.write(text)


# --- commands ---------------------------------------------------------------

def cmd_analyze(spec: ExperimentSpec) -> list[dict]:
    rec = analyze(spec.config).as_record()
    summary = f"{rec['mechanism']} {rec['regime']}: aoi_rounds={rec['aoi_rounds']:.6g} aoi_physical={rec['aoi_physical']:.6g}"
    emit([rec], spec, summary=summary)
    return [rec]


def _sim_rows(config: ProtocolConfig, spec: ExperimentSpec):
    episodes = replicate(config, spec.seeds, spec.horizon)
    agg = aggregate(episodes)
    return agg, episodes


def cmd_simulate(spec: ExperimentSpec) -> list[dict]:
    agg, episodes = _sim_rows(spec.config, spec)
    rows = [dict(kind="aggregate", **agg.as_record())]
    rows += [dict(kind="replication", **e.as_record()) for e in episodes]
    emit(rows, spec, simulated=True,
         summary=f"mean_aoi_rounds={agg.mean_aoi_rounds:.6g} ci95={agg.ci95:.3g}")
    return rows


def cmd_optimize(spec: ExperimentSpec) -> list[dict]:
    res = grid_search(spec.config, spec.grid())
    rows = []
    for q, eta, aoi in res.table:
        rows.append(dict(mechanism=spec.config.mechanism.value, q=float(q), eta=float(eta), aoi=float(aoi),
                         optimal=int(q == res.q_star and eta == res.eta_star)))
    emit(rows, spec, summary=f"q*={res.q_star!r} eta*={res.eta_star!r} aoi*={res.aoi_star:.6g}")
    return rows


def cmd_sweep(spec: ExperimentSpec) -> list[dict]:
    table = sweep(spec.config, spec.parameter, spec.values, spec.grid(), simulate=spec.simulate,
                  horizon=spec.horizon, replications=spec.replications, base_seed=spec.base_seed)
    rows = [asdict(r) for r in table]
    emit(rows, spec, simulated=spec.simulate, summary=f"{len(rows)} sweep rows")
    return rows


def compare_rows(spec: ExperimentSpec) -> list[dict]:
    rows = []
    for mech in Mechanism:
        cfg = validate_config(spec.config.with_(mechanism=mech))
        opt = grid_search(cfg, spec.grid())
        best = opt.best_config
        res = analyze(best)
        agg = aggregate(replicate(best, spec.seeds, spec.horizon))
        row = dict(
            mechanism=mech.value,
            q_star=opt.q_star,
            eta_star=opt.eta_star,
            regime=res.regime.value,
            p_a=res.p_a,
            aoi_theory=res.aoi_rounds,
            aoi_approx=res.approx_aoi_rounds,
            aoi_physical=res.aoi_physical,
            aoi_sim=agg.mean_aoi_rounds,
            aoi_sim_physical=agg.mean_aoi_rounds * physical_factor(best),
            ci95=agg.ci95,
            rel_error=(res.aoi_rounds - agg.mean_aoi_rounds) / agg.mean_aoi_rounds,
            empirical_p_a=agg.empirical_p_a,
            energy_rate=agg.energy_consumption_rate,
        )
        for d in spec.deltas:
            dopt = grid_search(cfg.with_(delta=float(d)), spec.grid(physical=True))
            row[f"aoi_physical_opt_delta_{d!r}"] = dopt.aoi_star
        rows.append(row)
    return rows


def cmd_compare(spec: ExperimentSpec) -> list[dict]:
    rows = compare_rows(spec)
    lines = [f"{r['mechanism']:<12} theory={r['aoi_theory']:.6g} sim={r['aoi_sim']:.6g}" for r in rows]
    emit(rows, spec, simulated=True, summary="\n".join(lines))
    return rows


HANDLERS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "optimize": cmd_optimize,
            "sweep": cmd_sweep, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", metavar="FILE", help="flat key=value file")
    g.add_argument("--n", type=int)
    g.add_argument("--xi", type=str, help="harvest probability per round")
    g.add_argument("--M", type=int, help="energy units per data packet")
    g.add_argument("--delta", type=str, help="probing mini-slot length / data slot length")
    g.add_argument("--mechanism", type=str, help="AUC, RUC, SAFC or SA_BASELINE")
    g.add_argument("--q", type=str, help="probing probability")
    g.add_argument("--eta", type=str, help="fallback access probability")
    g.add_argument("--horizon", type=int, help="rounds per replication (default 100000)")
    g.add_argument("--replications", type=int, help="replications (default 10)")
    g.add_argument("--seed", type=int, help="base seed; replication i uses seed + i")
    g.add_argument("--grid-step", dest="grid_step", type=str, help="q/eta grid resolution (default 0.01)")
    g.add_argument("--output", "-o", help="write here instead of stdout")
    g.add_argument("--format", choices=("csv", "json"))

    parser = argparse.ArgumentParser(prog="probeaoi", description="AoI of energy-harvesting random access with probing")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("analyze", parents=[common], help="exact and approximate AoI at one point")
    sub.add_parser("simulate", parents=[common], help="Monte-Carlo simulation")
    sub.add_parser("optimize", parents=[common], help="grid search over (q, eta)")
    sw = sub.add_parser("sweep", parents=[common], help="re-optimize across n, xi or delta")
    sw.add_argument("--parameter", choices=("n", "xi", "delta"))
    sw.add_argument("--values", help="comma-separated values")
    sw.add_argument("--simulate", action="store_true", help="also simulate each optimum")
    cp = sub.add_parser("compare", parents=[common], help="optimize, analyze and simulate every mechanism")
    cp.add_argument("--deltas", help="comma-separated delta values for physical-time columns")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = build_spec(args)
        HANDLERS[spec.command](spec)
    except ConfigError as exc:
        print(f"probeaoi: invalid {exc.field}: {exc}", file=sys.stderr)
        return 2
    except (ConvergenceError, StabilityError, OptimizationError, ArithmeticError) as exc:
        print(f"probeaoi: numerical failure: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"probeaoi: invalid input: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
