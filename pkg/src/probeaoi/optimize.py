"""Grid search over (q, eta) and re-optimizing parameter sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import _rounds_result, evaluate, scaled_xi
from .chain import Regime
from .model import ConfigError, Mechanism, ProtocolConfig, validate_config
from .sim import physical_factor, run_replications, seed_list

OBJECTIVES = ("analytic_exact", "analytic_approx", "simulated")
SWEEP_PARAMETERS = ("n", "xi", "delta")


class OptimizationError(RuntimeError):
    """No grid point produced a usable objective value."""


def default_values(step: float = 0.01) -> list[float]:
    """Probabilities step, 2 step, ..., 1 (rounded to suppress float drift)."""
    if not 0 < step <= 1:
        raise ConfigError("grid_step", f"grid_step must lie in (0, 1], got {step}")
    count = int(math.floor(1 / step + 1e-9))
    return [round((i + 1) * step, 12) for i in range(count)]


@dataclass(frozen=True)
class GridSpec:
    """Candidate parameters and the objective to minimize.

    ``physical`` switches the objective to AoI in data-slot units, with the
    harvest probability scaled to a (1 + delta)-long round.  The simulated
    objective uses ``sim_replications`` episodes of ``sim_horizon`` rounds
    with seeds ``base_seed, base_seed + 1, ...`` at every point.
    """

    q_values: tuple = field(default_factory=lambda: tuple(default_values()))
    eta_values: tuple = field(default_factory=lambda: tuple(default_values()))
    objective: str = "analytic_exact"
    physical: bool = False
    sim_horizon: int = 20_000
    sim_replications: int = 4
    base_seed: int = 0

    def __post_init__(self):
        qs = tuple(sorted(set(float(v) for v in self.q_values)))
        etas = tuple(sorted(set(float(v) for v in self.eta_values)))
        if not qs:
            raise ConfigError("q_values", "q grid is empty")
        if not etas:
            raise ConfigError("eta_values", "eta grid is empty")
        if any(not 0 < v <= 1 for v in qs):
            raise ConfigError("q_values", "q grid values must lie in (0, 1]")
        if any(not 0 <= v <= 1 for v in etas):
            raise ConfigError("eta_values", "eta grid values must lie in [0, 1]")
        if self.objective not in OBJECTIVES:
            raise ConfigError("objective", f"objective must be one of {', '.join(OBJECTIVES)}")
        object.__setattr__(self, "q_values", qs)
        object.__setattr__(self, "eta_values", etas)

    @classmethod
    def uniform(cls, step: float = 0.01, **kw) -> "GridSpec":
        values = tuple(default_values(step))
        return cls(q_values=values, eta_values=values, **kw)

    def points(self, mechanism: Mechanism) -> tuple[np.ndarray, np.ndarray]:
        """Axes actually searched: SAFC drops eta, the ALOHA baseline drops q."""
        q = np.asarray(self.q_values)
        eta = np.asarray(self.eta_values)
        if mechanism is Mechanism.SAFC:
            eta = np.zeros(1)
        elif mechanism is Mechanism.SA_BASELINE:
            q = np.zeros(1)
        return q, eta


@dataclass
class OptimizationResult:
    """Minimizer and the full table; ``table`` rows are (q, eta, aoi)."""

    config: ProtocolConfig
    q_star: float
    eta_star: float
    aoi_star: float
    table: np.ndarray
    failures: list[tuple[float, float, str]]
    objective: str
    physical: bool

    @property
    def best_config(self) -> ProtocolConfig:
        return self.config.with_(q=self.q_star, eta=self.eta_star)

    def rows(self) -> list[dict]:
        return [{"q": q, "eta": e, "aoi": a} for q, e, a in self.table]


def _analytic_grid(config: ProtocolConfig, q: np.ndarray, eta: np.ndarray, grid: GridSpec):
    """Objective on the q-major mesh plus per-point failure notes."""
    scale = 1.0
    xi = config.xi
    if grid.physical:
        scale = physical_factor(config)
        if config.mechanism.probes:
            xi = scaled_xi(config)
    Q, E = np.meshgrid(q, eta, indexing="ij")
    failures = []
    try:
        res = evaluate(config, q=Q, eta=E, xi=xi)
        values = res.approx if grid.objective == "analytic_approx" else res.aoi
        values = np.array(values, dtype=float)
    except (ArithmeticError, RuntimeError, ValueError):
        values = np.empty(Q.shape)
        for idx in np.ndindex(Q.shape):
            try:
                res = evaluate(config, q=Q[idx], eta=E[idx], xi=xi)
                values[idx] = float(res.approx if grid.objective == "analytic_approx" else res.aoi)
            except (ArithmeticError, RuntimeError, ValueError) as exc:
                values[idx] = np.nan
                failures.append((float(Q[idx]), float(E[idx]), str(exc)))
    return Q, E, values * scale, failures


def _simulated_grid(config: ProtocolConfig, q: np.ndarray, eta: np.ndarray, grid: GridSpec):
    if grid.physical and config.mechanism.probes:
        base = config.with_(xi=scaled_xi(config))
    else:
        base = config
    scale = physical_factor(config) if grid.physical else 1.0
    seeds = seed_list(grid.base_seed, grid.sim_replications)
    Q, E = np.meshgrid(q, eta, indexing="ij")
    values = np.empty(Q.shape)
    failures = []
    for idx in np.ndindex(Q.shape):
        try:
            stats = run_replications(base.with_(q=float(Q[idx]), eta=float(E[idx])), seeds, grid.sim_horizon,
                                     require_ci=False)
            values[idx] = stats.mean_aoi_rounds * scale
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            values[idx] = np.nan
            failures.append((float(Q[idx]), float(E[idx]), str(exc)))
    return Q, E, values, failures


def grid_search(config: ProtocolConfig, grid: GridSpec | None = None) -> OptimizationResult:
    """Minimize the chosen AoI objective over the grid.

    Ties go to the smallest q, then the smallest eta.  Points whose
    objective is NaN or below one round are reported in ``failures`` and
    skipped.
    """
    config = validate_config(config)
    grid = GridSpec() if grid is None else grid
    if grid.objective == "analytic_approx" and config.mechanism is Mechanism.SA_BASELINE:
        raise ConfigError("objective", "the ALOHA baseline has no approximate objective")
    q, eta = grid.points(config.mechanism)
    if grid.objective == "simulated":
        Q, E, values, failures = _simulated_grid(config, q, eta, grid)
    else:
        Q, E, values, failures = _analytic_grid(config, q, eta, grid)
    # an age below one round means the closed form left its range of validity
    bad = np.isnan(values) | (values < 1)
    noted = {(a, b) for a, b, _ in failures}
    for idx in zip(*np.nonzero(bad)):
        key = (float(Q[idx]), float(E[idx]))
        if key not in noted:
            failures.append((*key, "objective undefined" if np.isnan(values[idx]) else "objective below one round"))
    usable = np.where(bad, np.inf, values)
    flat = int(np.argmin(usable))  # first minimum in q-major order
    best = usable.flat[flat]
    if not np.isfinite(best):
        if len(failures) == values.size:
            raise OptimizationError("every grid point failed")
        raise OptimizationError("no grid point yields a finite age of information")
    table = np.column_stack([Q.ravel(), E.ravel(), values.ravel()])
    return OptimizationResult(
        config=config,
        q_star=float(Q.flat[flat]),
        eta_star=float(E.flat[flat]),
        aoi_star=float(best),
        table=table,
        failures=failures,
        objective=grid.objective,
        physical=grid.physical,
    )


@dataclass
class SweepRow:
    parameter: str
    value: float
    mechanism: str
    q_star: float
    eta_star: float
    regime: str
    aoi_exact: float
    aoi_approx: float
    aoi_physical: float
    aoi_objective: float
    aoi_sim: float = float("nan")
    ci95: float = float("nan")


def _row_for(config: ProtocolConfig, parameter: str, value, opt: OptimizationResult) -> SweepRow:
    best = opt.best_config
    sol, _, _, aoi, approx = _rounds_result(best, check_stability=False)
    if best.mechanism.probes:
        phys_cfg = best.with_(xi=scaled_xi(best))
        physical = physical_factor(best) * _rounds_result(phys_cfg, check_stability=False)[3]
    else:
        physical = aoi
    return SweepRow(
        parameter=parameter,
        value=float(value),
        mechanism=best.mechanism.value,
        q_star=opt.q_star,
        eta_star=opt.eta_star,
        regime=sol.regime.value if isinstance(sol.regime, Regime) else str(sol.regime),
        aoi_exact=aoi,
        aoi_approx=float("nan") if approx is None else approx,
        aoi_physical=physical,
        aoi_objective=opt.aoi_star,
    )


def sweep(base: ProtocolConfig, parameter: str, values, grid: GridSpec | None = None, *, simulate: bool = False,
          horizon: int = 100_000, replications: int = 10, base_seed: int = 0) -> list[SweepRow]:
    """Re-optimize (q, eta) at each value of ``parameter``.

    A delta sweep optimizes the physical-time objective, since delta only
    matters there.  With ``simulate`` the optimum is also simulated in the
    objective's units (``aoi_sim``, ``ci95``).
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError("parameter", f"parameter must be one of {', '.join(SWEEP_PARAMETERS)}")
    values = list(values)
    if not values:
        raise ConfigError("values", "sweep needs at least one value")
    grid = GridSpec() if grid is None else grid
    if parameter == "delta" and not grid.physical:
        grid = GridSpec(grid.q_values, grid.eta_values, grid.objective, True, grid.sim_horizon,
                        grid.sim_replications, grid.base_seed)
    rows = []
    for v in values:
        cfg = validate_config(base.with_(**{parameter: int(v) if parameter == "n" else float(v)}))
        opt = grid_search(cfg, grid)
        row = _row_for(cfg, parameter, v, opt)
        if simulate:
            best = opt.best_config
            target = best.with_(xi=scaled_xi(best)) if grid.physical and best.mechanism.probes else best
            stats = run_replications(target, seed_list(base_seed, replications), horizon)
            scale = physical_factor(best) if grid.physical else 1.0
            row.aoi_sim = stats.mean_aoi_rounds * scale
            row.ci95 = stats.ci95 * scale
        rows.append(row)
    return rows
