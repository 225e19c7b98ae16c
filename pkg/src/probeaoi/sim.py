"""Slot-level Monte-Carlo simulation of the n-node network.

Round order: active nodes (buffer >= threshold at round start) probe w.p.
q paying one unit; a lone prober sends; otherwise the mechanism's fallback
decides who sends; a round with exactly one sender delivers a fresh
update.  Harvests are credited at the end of the round, so one round moves
a buffer exactly by the jumps of the analytic chain.

Streams: replication seed s gives ``SeedSequence(s).spawn(n)``, one
PCG64 generator per node drawing three uniforms per round (probe,
fallback access, harvest).  Results depend only on (config, seed, horizon).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit
from scipy import stats

from .model import Mechanism, ProtocolConfig, validate_config

BURN_IN_FRACTION = 0.1
_CHUNK = 4096

_MECH_CODE = {Mechanism.AUC: 0, Mechanism.RUC: 1, Mechanism.SAFC: 2, Mechanism.SA_BASELINE: 3}

# counter slots
ATTEMPTS, SUCCESSES, COLLIDED, PROBES, ACTIVE, SPENT, HARVESTED, AOI_SUM, ROUNDS, SPENT_ALL, HARVESTED_ALL, RESERVED = range(12)
_N_COUNTERS = 12


@dataclass
class NodeState:
    energy: int
    aoi: int
    last_generation: int


@dataclass
class SimStats:
    """Counters and rates from one episode or a set of replications.

    Rates and the deficit histogram cover the measured rounds only (after
    burn-in); ``energy_harvested_total``/``energy_spent_total`` cover the
    whole run for conservation checks.  ``deficit_histogram[0]`` counts
    sends after which the node stayed active; entry l counts deficit l.
    """

    config: ProtocolConfig
    horizon: int
    seeds: list[int]
    mean_aoi_rounds: float
    mean_aoi_physical: float
    attempts: int
    successes: int
    collisions: int
    probes: int
    reservations: int
    active_rounds: int
    measured_rounds: int
    empirical_p_s: float
    empirical_p_T: float
    empirical_p_a: float
    energy_consumption_rate: float
    deficit_histogram: np.ndarray
    energy_spent: int
    energy_harvested_total: int
    energy_spent_total: int
    ci95: float = float("nan")
    replicate_aoi: list[float] = field(default_factory=list)
    final_energy: np.ndarray | None = None
    final_aoi: np.ndarray | None = None

    def nodes(self) -> list[NodeState]:
        if self.final_energy is None:
            return []
        return [NodeState(int(e), int(a), self.horizon - int(a)) for e, a in zip(self.final_energy, self.final_aoi)]

    def deficit_pmf(self) -> np.ndarray:
        """Empirical P(Q = l) for l = 1..threshold, over all sends."""
        total = self.deficit_histogram.sum()
        return self.deficit_histogram[1:] / total if total else np.zeros(len(self.deficit_histogram) - 1)

    def as_record(self) -> dict:
        rec = dict(self.config.as_dict())
        rec.update(
            horizon=self.horizon,
            seed=" ".join(str(s) for s in self.seeds),
            replications=len(self.seeds),
        )
        skip = {"config", "horizon", "seeds", "deficit_histogram", "replicate_aoi", "final_energy", "final_aoi"}
        for k, v in asdict(self).items():
            if k not in skip:
                rec[k] = v
        for level, count in enumerate(self.deficit_histogram):
            rec[f"deficit_{level}"] = int(count)
        return rec


@njit(cache=True, nogil=True)
def _run_chunk(energy, last_gen, u, t0, mech, M, q, eta, xi, burn_in, counters, hist):
    n = energy.shape[0]
    thr = M if mech == 3 else M + 1
    active = np.zeros(n, dtype=np.bool_)
    probe = np.zeros(n, dtype=np.bool_)
    tx = np.zeros(n, dtype=np.bool_)
    for k in range(u.shape[0]):
        t = t0 + k
        measure = t >= burn_in
        nprobe = 0
        solo = -1
        for j in range(n):
            a = energy[j] >= thr
            active[j] = a
            p = False
            if a and mech != 3 and u[k, j, 0] < q:
                p = True
                nprobe += 1
                solo = j
            probe[j] = p
            if measure:
                counters[7] += t - last_gen[j]
                if a:
                    counters[4] += 1
        ntx = 0
        sender = -1
        if nprobe == 1:
            for j in range(n):
                tx[j] = j == solo
            ntx = 1
            sender = solo
            if measure:
                counters[11] += 1
        else:
            for j in range(n):
                if mech == 0 or mech == 3:
                    x = active[j] and u[k, j, 1] < eta
                elif mech == 1:
                    x = probe[j] and u[k, j, 1] < eta
                else:
                    x = False
                tx[j] = x
                if x:
                    ntx += 1
                    sender = j
        if ntx == 1:
            last_gen[sender] = t
        for j in range(n):
            spend = 0
            if probe[j]:
                spend += 1
            if tx[j]:
                spend += M
            energy[j] -= spend
            h = 1 if u[k, j, 2] < xi else 0
            energy[j] += h
            counters[9] += spend
            counters[10] += h
            if measure:
                counters[5] += spend
                if probe[j]:
                    counters[3] += 1
                if tx[j]:
                    counters[0] += 1
                    if ntx == 1:
                        counters[1] += 1
                    else:
                        counters[2] += 1
                    deficit = thr - energy[j]
                    if deficit >= 1:
                        hist[deficit] += 1
                    else:
                        hist[0] += 1
        if measure:
            counters[8] += 1


def node_generators(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-node streams for one replication."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def run_episode(config: ProtocolConfig, seed: int, horizon: int, *, burn_in_fraction: float = BURN_IN_FRACTION) -> SimStats:
    """Simulate ``horizon`` rounds from empty buffers and zero ages."""
    config = validate_config(config)
    if horizon < 1:
        raise ValueError("horizon must be ≥ 1")
    n, M = config.n, config.M
    thr = config.activation_threshold
    burn_in = int(math.floor(burn_in_fraction * horizon))
    gens = node_generators(seed, n)
    energy = np.zeros(n, dtype=np.int64)
    last_gen = np.zeros(n, dtype=np.int64)
    counters = np.zeros(_N_COUNTERS, dtype=np.int64)
    hist = np.zeros(thr + 1, dtype=np.int64)
    u = np.empty((_CHUNK, n, 3))
    code = _MECH_CODE[config.mechanism]
    t = 0
    while t < horizon:
        size = min(_CHUNK, horizon - t)
        block = u[:size]
        for j, g in enumerate(gens):
            block[:, j, :] = g.random((size, 3))
        _run_chunk(energy, last_gen, block, t, code, M, config.q, config.eta, config.xi, burn_in, counters, hist)
        t += size
    return _episode_stats(config, seed, horizon, counters, hist, energy, horizon - last_gen)


def _rate(num, den):
    return num / den if den else float("nan")


def _episode_stats(config, seed, horizon, c, hist, energy, final_aoi) -> SimStats:
    n = config.n
    rounds = int(c[ROUNDS])
    mean_aoi = _rate(c[AOI_SUM], n * rounds)
    return SimStats(
        config=config,
        horizon=horizon,
        seeds=[seed],
        mean_aoi_rounds=mean_aoi,
        mean_aoi_physical=mean_aoi * physical_factor(config),
        attempts=int(c[ATTEMPTS]),
        successes=int(c[SUCCESSES]),
        collisions=int(c[COLLIDED]),
        probes=int(c[PROBES]),
        reservations=int(c[RESERVED]),
        active_rounds=int(c[ACTIVE]),
        measured_rounds=rounds,
        empirical_p_s=_rate(c[SUCCESSES], c[ATTEMPTS]),
        empirical_p_T=_rate(c[ATTEMPTS], c[ACTIVE]),
        empirical_p_a=_rate(c[ACTIVE], n * rounds),
        energy_consumption_rate=_rate(c[SPENT], n * rounds),
        deficit_histogram=hist.copy(),
        energy_spent=int(c[SPENT]),
        energy_harvested_total=int(c[HARVESTED_ALL]),
        energy_spent_total=int(c[SPENT_ALL]),
        replicate_aoi=[mean_aoi],
        final_energy=energy.copy(),
        final_aoi=np.asarray(final_aoi).copy(),
    )


def physical_factor(config: ProtocolConfig) -> float:
    """Round length in data slots; the ALOHA baseline has no mini-slot."""
    return 1.0 + config.delta if config.mechanism.probes else 1.0


def energy_consumption_rate(stats: SimStats, config: ProtocolConfig | None = None) -> float:
    """Energy spent on probes and packets per node per measured round."""
    config = stats.config if config is None else config
    return _rate(stats.energy_spent, config.n * stats.measured_rounds)


def ci_halfwidth(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return float("nan")
    return float(stats.t.ppf(0.975, values.size - 1) * values.std(ddof=1) / math.sqrt(values.size))


def aggregate(episodes: list[SimStats]) -> SimStats:
    """Pool counters across replications; AoI is the mean of episode means."""
    if not episodes:
        raise ValueError("nothing to aggregate")
    first = episodes[0]
    config = first.config
    n = config.n
    tot = {k: sum(getattr(e, k) for e in episodes) for k in (
        "attempts", "successes", "collisions", "probes", "reservations", "active_rounds", "measured_rounds",
        "energy_spent", "energy_harvested_total", "energy_spent_total")}
    aois = [e.mean_aoi_rounds for e in episodes]
    mean_aoi = float(np.mean(aois))
    return SimStats(
        config=config,
        horizon=first.horizon,
        seeds=[s for e in episodes for s in e.seeds],
        mean_aoi_rounds=mean_aoi,
        mean_aoi_physical=mean_aoi * physical_factor(config),
        empirical_p_s=_rate(tot["successes"], tot["attempts"]),
        empirical_p_T=_rate(tot["attempts"], tot["active_rounds"]),
        empirical_p_a=_rate(tot["active_rounds"], n * tot["measured_rounds"]),
        energy_consumption_rate=_rate(tot["energy_spent"], n * tot["measured_rounds"]),
        deficit_histogram=np.sum([e.deficit_histogram for e in episodes], axis=0),
        ci95=ci_halfwidth(aois),
        replicate_aoi=aois,
        **tot,
    )


def replicate(config: ProtocolConfig, seeds, horizon: int, *, burn_in_fraction: float = BURN_IN_FRACTION,
              workers: int | None = None) -> list[SimStats]:
    """One episode per seed, run in parallel threads, returned in seed order."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("no seeds given")
    config = validate_config(config)
    workers = workers or min(len(seeds), os.cpu_count() or 1)
    job = lambda s: run_episode(config, s, horizon, burn_in_fraction=burn_in_fraction)  # noqa: E731
    if workers <= 1:
        return [job(s) for s in seeds]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(job, seeds))


def run_replications(config: ProtocolConfig, seeds, horizon: int, *, burn_in_fraction: float = BURN_IN_FRACTION,
                     workers: int | None = None, require_ci: bool = True) -> SimStats:
    """Run one episode per seed and aggregate them.

    Aggregation is ordered by seed position, so the worker count never
    changes the result.
    """
    seeds = list(seeds)
    if require_ci and len(seeds) < 2:
        raise ValueError("at least 2 seeds are needed for a confidence interval")
    return aggregate(replicate(config, seeds, horizon, burn_in_fraction=burn_in_fraction, workers=workers))


def seed_list(base_seed: int, replications: int) -> list[int]:
    return [base_seed + i for i in range(replications)]
