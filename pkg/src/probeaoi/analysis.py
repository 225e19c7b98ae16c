"""Network-average AoI from the buffer chain: exact renewal form and approximations.

The update interval T splits into an access wait T_A (geometric in the
attempt probability) and an energy refill T_E (negative binomial given the
post-transmission deficit Q).  Exact here means the renewal expression built
from these moments; :func:`approx_aoi` gives the exponential-collision
approximations per mechanism.

:func:`evaluate` is the batched workhorse: q, eta and xi may be arrays and
everything broadcasts, which is what the grid search uses.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .chain import (
    ConvergenceError,
    Regime,
    StabilityError,
    StationarySolution,
    _head,
    _root_batch,
    chain_order,
    kernel_for,
    solve_fixed_point,
    solve_self_consistent,
    stability_condition,
)
from .model import Mechanism, ProtocolConfig, access_probability, validate_config


def _out(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


@dataclass(frozen=True)
class AccessProbabilities:
    p_ac: float
    p_cs: float
    p_T: float
    p_s: float


@dataclass(frozen=True)
class DeficitDistribution:
    """Post-transmission energy deficit Q.

    ``pmf[i]`` is P(Q = levels[i]).  By default levels run 1..M+1 and
    ``residual`` holds P(Q <= 0), the node still being active afterwards.
    """

    levels: np.ndarray
    pmf: np.ndarray
    residual: float
    omega_deep: float
    omega_std: float
    omega_eco: float

    def prob(self, level: int) -> float:
        hit = np.nonzero(self.levels == level)[0]
        return float(self.pmf[hit[0]]) if hit.size else 0.0


@dataclass(frozen=True)
class IntervalMoments:
    e_ta: float
    e_ta2: float
    e_te: float
    e_te2: float
    e_t: float = field(init=False)
    e_t2: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "e_t", self.e_ta + self.e_te)
        object.__setattr__(self, "e_t2", self.e_ta2 + 2 * self.e_ta * self.e_te + self.e_te2)


@dataclass(frozen=True)
class AoiResult:
    config: ProtocolConfig
    regime: Regime
    aoi_rounds: float
    aoi_physical: float
    probabilities: AccessProbabilities
    moments: IntervalMoments | None
    approx_aoi_rounds: float
    p_a: float
    z: float

    def as_record(self) -> dict:
        rec = dict(self.config.as_dict())
        m = self.moments
        rec.update(
            regime=self.regime.value,
            p_a=self.p_a,
            z=self.z,
            p_ac=self.probabilities.p_ac,
            p_cs=self.probabilities.p_cs,
            p_T=self.probabilities.p_T,
            p_s=self.probabilities.p_s,
            e_ta=m.e_ta if m else float("nan"),
            e_ta2=m.e_ta2 if m else float("nan"),
            e_te=m.e_te if m else float("nan"),
            e_te2=m.e_te2 if m else float("nan"),
            aoi_rounds=self.aoi_rounds,
            aoi_approx=self.approx_aoi_rounds,
            aoi_physical=self.aoi_physical,
        )
        return rec


# --- access ---------------------------------------------------------------

def attempt_probability(p_a, q, n: int, p_ac):
    """Probability that an active node sends data in a round."""
    P0n = (1 - np.asarray(p_a) * q) ** (n - 1)
    return _out(q * P0n + p_ac * (1 - n * q * np.asarray(p_a) * P0n))


def contention_success(p_a, n: int, p_ac):
    return _out(p_ac * (1 - np.asarray(p_a) * p_ac) ** (n - 1))


def success_probability(p_a, q, n: int, p_ac):
    """Probability that a data transmission is received.

    Counts solo reservations plus clean fallback contention after a
    network-wide reservation failure, divided by the attempt probability.
    """
    p_a = np.asarray(p_a, dtype=float)
    P0n = (1 - p_a * q) ** (n - 1)
    p_cs = p_ac * (1 - p_a * p_ac) ** (n - 1)
    p_T = q * P0n + p_ac * (1 - n * q * p_a * P0n)
    if np.ndim(p_T) == 0 and p_T == 0:
        raise ZeroDivisionError("attempt probability is zero: nodes never transmit")
    with np.errstate(divide="ignore", invalid="ignore"):
        return _out((q * P0n + p_cs * (1 - n * q * p_a * P0n)) / p_T)


def auc_attempt_probability(p_a, q, eta, n: int):
    """AUC-specialized attempt probability (reference form)."""
    return eta + q * (1 - n * eta * p_a) * (1 - p_a * q) ** (n - 1)


def auc_success_probability(p_a, q, eta, n: int):
    """AUC-specialized success probability (reference form)."""
    e = (1 - p_a * eta) ** (n - 1)
    num = eta * e + q * (1 - p_a * q) ** (n - 1) * (1 - n * eta * p_a * e)
    return num / auc_attempt_probability(p_a, q, eta, n)


# --- deficit and moments --------------------------------------------------

def omega_weights(mechanism: Mechanism, q, xi):
    """Probabilities that a transmission round cost M+1, M and M-1 units."""
    if mechanism is Mechanism.AUC:
        return (1 - xi) * q, xi * q + (1 - xi) * (1 - q), xi * (1 - q)
    # a send always follows a paid probe (or, for ALOHA, a full M-cost
    # packet in the shifted chain), offset only by a harvest
    return 1 - xi, xi, 0.0 * xi


def _deficit_bands(omegas, z, M: int, levels: np.ndarray):
    """P(Q = l) for each l in ``levels`` from the geometric active tail.

    S_m / p_a = (1 - z) z^{m-M-1} for m >= M + 1, and a deficit l after a
    jump of size c comes from level m = M + 1 + c - l (needs l <= c).
    """
    z = np.asarray(z, dtype=float)
    lv = levels.reshape((-1,) + (1,) * z.ndim)
    total = 0.0
    for w, c in zip(omegas, (M + 1, M, M - 1)):
        k = c - lv
        term = np.where(k >= 0, (1 - z) * z ** np.clip(k, 0, None), 0.0)
        total = total + w * term
    return total


def deficit_distribution(solution: StationarySolution, mechanism: Mechanism, q, xi, M: int | None = None, *,
                         signed: bool = False, tail_eps: float = 1e-18,
                         weights: str = "published") -> DeficitDistribution:
    """Deficit law after a transmission round.

    Uses the stationary masses S_{2M+2-l}, S_{2M+1-l}, S_{2M-l} divided by
    p_a.  ``signed=True`` extends the support below 1 (a surplus counts as
    a negative deficit) until the geometric tail is below ``tail_eps``.

    ``weights="published"`` uses :func:`omega_weights`; ``"kernel"`` uses
    the cost mix of an actual send, (p_ad, p_au, p_ae) / transmit.  The two
    agree except for AUC, where a send is far more likely to follow a probe
    than the published weights assume.
    """
    if solution.regime is Regime.ESR:
        raise StabilityError("deficit is undefined in the energy-sufficient regime")
    M = solution.M if M is None else M
    mechanism = Mechanism.parse(mechanism)
    if weights == "published":
        omegas = omega_weights(mechanism, q, xi)
    elif weights == "kernel":
        k = solution.kernel
        omegas = (k.p_ad / k.transmit, k.p_au / k.transmit, k.p_ae / k.transmit)
    else:
        raise ValueError(f"weights must be 'published' or 'kernel', got {weights!r}")
    lo = 1
    if signed and solution.z > 0:
        lo = 1 - int(math.ceil(math.log(tail_eps) / math.log(solution.z)))
    elif signed:
        lo = -M
    levels = np.arange(lo, M + 2)
    p_a = solution.head / (1 - solution.z)
    pmf = np.array([
        sum(w * solution(M + 1 + c - l) for w, c in zip(omegas, (M + 1, M, M - 1)) if l <= c)
        for l in levels
    ]) / p_a
    residual = max(0.0, 1.0 - float(pmf.sum()))
    return DeficitDistribution(levels, pmf, residual, *(float(w) for w in omegas))


def interval_moments(p_T, deficit: DeficitDistribution, xi, *, max_level: int | None = None) -> IntervalMoments:
    """First two moments of the access wait, refill time and their sum.

    Refill time sums l/xi and l(l - xi + 1)/xi^2 against P(Q = l) over the
    levels carried by ``deficit``; ``max_level`` cuts the sum (M reproduces
    the shorter l = 1..M range).  A residual deficit (no refill) adds 0.
    """
    levels = deficit.levels
    pmf = deficit.pmf
    if max_level is not None:
        keep = levels <= max_level
        levels, pmf = levels[keep], pmf[keep]
    e_te = float(np.sum(pmf * levels) / xi)
    e_te2 = float(np.sum(pmf * levels * (levels - xi + 1)) / xi ** 2)
    return IntervalMoments(1 / p_T, (2 - p_T) / p_T ** 2, e_te, e_te2)


def auc_refill_closed_form(q, xi, z, M: int):
    """AUC refill-time moments in closed form, returns (E[T_E], E[T_E^2])."""
    C = M + q - xi - z / (1 - z)
    e1 = C / xi
    e2 = (C * (C + 1 - xi) + z / (1 - z) ** 2) / xi ** 2
    return e1, e2


def renewal_aoi(p_s, e_t, e_t2):
    """Average age for attempts spaced by T and each delivered w.p. p_s."""
    return e_t2 / (2 * e_t) + (1 / p_s - 1) * e_t + 0.5


def interval_aoi(p_T, p_s, e_te, e_te2):
    """Renewal age with a geometric access wait (mean 1/p_T) plus a refill time."""
    return 1 / (p_T * p_s) + (1 / p_s - 1) * e_te + (e_te2 + e_te) / (2 * (1 / p_T + e_te))


def esr_aoi(q, n: int, p_ac):
    """Age when every node is always active (per-round Bernoulli delivery)."""
    base = q * (1 - q) ** (n - 1)
    return 1 / (base + p_ac * (1 - p_ac) ** (n - 1) * (1 - n * base))


def mechanism_stability(mechanism: Mechanism, n: int, M: int, xi, q, eta, p_a):
    """Mechanism-specific form of the stability inequality, as (lhs, rhs).

    Stable (energy-constrained) iff lhs > rhs.  ``M`` is the packet cost
    of the scheme (not the shifted chain parameter of the ALOHA baseline).
    """
    if mechanism is Mechanism.AUC:
        inner = (1 - eta) * (1 - p_a) + p_a * (1 - q) * (1 - n * eta)
        extra = q * (1 - p_a * q) ** (n - 2) * inner if n >= 2 else q * (1 - eta)
        return q + M * (eta + extra), xi
    if mechanism is Mechanism.RUC:
        return q * (1 + M * (eta + (1 - eta) * (1 - p_a * q) ** (n - 1))), xi
    if mechanism is Mechanism.SAFC:
        return q + M * q * (1 - p_a * q) ** (n - 1), xi
    return M * eta, xi


# --- approximations -------------------------------------------------------

def refill_constant(M: int, q, xi, z):
    return M + q - xi - z / (1 - z)


def _approx_ecr(mechanism, n, M, xi, q, eta, p_a, z):
    C = refill_constant(M, q, xi, z)
    eq = np.exp(-n * p_a * q)
    if mechanism is Mechanism.AUC:
        ee = np.exp(-n * p_a * eta)
        first = (1 + eta / xi * (1 - ee) * (1 - n * p_a * q * eq) * C) / (q * eq + eta * ee * (1 - n * p_a * q * eq))
        second = (eta + q * eq) / (2 * xi * C * (1 + eta + q * eq)) * (C * (C + 1 / (1 - z)) + z / (1 - z) ** 2)
        return first + second
    if mechanism is Mechanism.RUC:
        eqe = np.exp(-n * q * p_a * eta)
        first = (xi + q * C * eta * (1 - eq) * (1 - eqe)) / (xi * q * (eq + eta * eqe * (1 - eq)))
        mix = eta * (1 - eq) + eq
        second = q * mix / (2 * xi * (xi + q * C * mix)) * (C * (C + xi + 4 * z / (1 - z)) + (3 * z ** 2 - z) / (1 - z) ** 2)
        return first + second
    if mechanism is Mechanism.SAFC:
        K = (((M + 1) * (M + 2 - 3 * xi) - z * (2 * M + 2 - 3 * xi) + xi ** 2) / (1 - z)
             + 2 * z ** 2 / (1 - z) ** 2 + xi * C) / xi ** 2
        return 1 / (q * eq) + xi * q * eq * K / (2 * (xi + q * eq * C))
    raise ValueError("no closed-form approximation for the ALOHA baseline")


def _approx_esr(mechanism, n, q, eta):
    if mechanism is Mechanism.AUC:
        return 1 / (q * (1 - q) ** (n - 1) + eta * (1 - eta) ** (n - 1) * (1 - n * q * (1 - q) ** (n - 1)))
    if mechanism is Mechanism.RUC:
        inner = ((1 - q) ** (n - 1) * (1 - n * eta * q * (1 - q * eta) ** (n - 1))
                 + eta * (1 - q * eta) ** (n - 1) * (1 - (1 - q) ** n))
        return 1 / (q * inner)
    if mechanism is Mechanism.SAFC:
        return 1 / (q * (1 - q) ** (n - 1))
    return 1 / (eta * (1 - eta) ** (n - 1))


# --- batched evaluation ---------------------------------------------------

@dataclass(frozen=True)
class BatchResult:
    """Array-valued analysis over a parameter batch (NaN where undefined)."""

    ecr: np.ndarray
    p_a: np.ndarray
    z: np.ndarray
    p_T: np.ndarray
    p_s: np.ndarray
    e_te: np.ndarray
    e_te2: np.ndarray
    aoi: np.ndarray
    approx: np.ndarray


def evaluate(config: ProtocolConfig, *, q=None, eta=None, xi=None, max_level: int | None = None) -> BatchResult:
    """Exact and approximate AoI (rounds) for a batch of (q, eta, xi).

    Missing arguments default to the config's values.  Entries where no
    node ever transmits get an infinite age.
    """
    config = validate_config(config)
    mech = config.mechanism
    n = config.n
    q = np.asarray(config.q if q is None else q, dtype=float)
    eta = np.asarray(config.eta if eta is None else eta, dtype=float)
    xi = np.asarray(config.xi if xi is None else xi, dtype=float)
    if mech is Mechanism.SAFC:
        eta = 0.0 * eta
    if mech is Mechanism.SA_BASELINE:
        q = 0.0 * q
    shape = np.broadcast(q, eta, xi).shape
    q, eta, xi = (np.broadcast_to(v, shape) for v in (q, eta, xi))
    M = chain_order(config)

    fp = solve_fixed_point(mech, n, M, xi, q, eta)
    p_a = np.asarray(fp.p_a, dtype=float)
    kernel = kernel_for(mech, n, xi, q, eta, p_a)
    ecr = np.asarray(stability_condition(kernel, M))
    z = _root_batch(kernel, M)
    zc = np.where(ecr, z, 0.0)
    with np.errstate(all="ignore"):
        head = np.asarray(_head(kernel, zc, M, xi))
        tail = head / (1 - zc)
        p_a = np.where(ecr, np.minimum(tail, 1.0), 1.0)

        p_ac = q * eta if mech is Mechanism.RUC else (0.0 * eta if mech is Mechanism.SAFC else eta)
        P0n = (1 - p_a * q) ** (n - 1)
        p_T = q * P0n + p_ac * (1 - n * q * p_a * P0n)
        p_cs = p_ac * (1 - p_a * p_ac) ** (n - 1)
        p_s = np.where(p_T > 0, (q * P0n + p_cs * (1 - n * q * p_a * P0n)) / p_T, np.nan)

        omegas = omega_weights(mech, q, xi)
        top = M + 1 if max_level is None else max_level
        levels = np.arange(1, top + 1)
        pmf = _deficit_bands(omegas, zc, M, levels)
        lv = levels.reshape((-1,) + (1,) * zc.ndim)
        e_te = np.sum(pmf * lv, axis=0) / xi
        e_te2 = np.sum(pmf * lv * (lv - xi + 1), axis=0) / xi ** 2

        aoi_ecr = interval_aoi(p_T, p_s, e_te, e_te2)
        aoi_esr = 1 / (p_T * p_s)
        aoi = np.where(ecr, aoi_ecr, aoi_esr)
        aoi = np.where((p_T > 0) & np.isfinite(aoi), aoi, np.inf)

        if mech is Mechanism.SA_BASELINE:
            approx = np.full(shape, np.nan)
        else:
            approx = np.where(ecr, _approx_ecr(mech, n, config.M, xi, q, eta, p_a, zc), _approx_esr(mech, n, q, eta))

    return BatchResult(
        ecr=ecr,
        p_a=p_a,
        z=np.where(ecr, z, np.nan),
        p_T=p_T,
        p_s=p_s,
        e_te=np.where(ecr, e_te, np.nan),
        e_te2=np.where(ecr, e_te2, np.nan),
        aoi=aoi,
        approx=approx,
    )


# --- scalar entry points --------------------------------------------------

def scaled_xi(config: ProtocolConfig) -> float:
    """Per-round harvest probability once a round lasts 1 + delta slots."""
    xi = (1 + config.delta) * config.xi
    if xi > 1:
        warnings.warn(f"(1 + delta) xi = {xi:.4g} exceeds 1; clamped to 1", RuntimeWarning, stacklevel=3)
        xi = 1.0
    return xi


def _rounds_result(config: ProtocolConfig, *, check_stability: bool = True, max_level: int | None = None):
    config = validate_config(config)
    kernel, sol = solve_self_consistent(config)
    M = chain_order(config)
    mech = config.mechanism
    q, eta, xi, n = config.q, config.eta, config.xi, config.n
    p_ac = eta if mech is Mechanism.SA_BASELINE else access_probability(mech, q, eta)
    p_a = sol.p_a
    p_T = float(attempt_probability(p_a, q, n, p_ac))
    if p_T <= 0:
        raise ZeroDivisionError("attempt probability is zero: nodes never transmit, age is unbounded")
    p_s = float(success_probability(p_a, q, n, p_ac))
    probs = AccessProbabilities(float(p_ac), float(contention_success(p_a, n, p_ac)), p_T, p_s)

    if check_stability:
        lhs, rhs = mechanism_stability(mech, n, config.M, xi, q, eta, p_a)
        if abs(lhs - rhs) > 1e-9 and (lhs > rhs) != (sol.regime is Regime.ECR):
            raise ConvergenceError("mechanism stability inequality disagrees with the chain's stability condition")

    if sol.regime is Regime.ECR:
        deficit = deficit_distribution(sol, mech, q, xi, M)
        moments = interval_moments(p_T, deficit, xi, max_level=max_level)
        aoi = interval_aoi(p_T, p_s, moments.e_te, moments.e_te2)
        approx = None if mech is Mechanism.SA_BASELINE else float(_approx_ecr(mech, n, config.M, xi, q, eta, p_a, sol.z))
    else:
        moments = None
        aoi = esr_aoi(q, n, p_ac)
        approx = None if mech is Mechanism.SA_BASELINE else float(_approx_esr(mech, n, q, eta))
    return sol, probs, moments, float(aoi), approx


def network_aoi(config: ProtocolConfig) -> AoiResult:
    """Exact network-average AoI of a probing scheme, in rounds and physical time."""
    config = validate_config(config)
    if config.mechanism is Mechanism.SA_BASELINE:
        raise ValueError("use sa_baseline_aoi for the ALOHA baseline")
    sol, probs, moments, aoi, approx = _rounds_result(config)
    return AoiResult(
        config=config,
        regime=sol.regime,
        aoi_rounds=aoi,
        aoi_physical=physical_aoi(config),
        probabilities=probs,
        moments=moments,
        approx_aoi_rounds=approx,
        p_a=sol.p_a,
        z=sol.z,
    )


def approx_aoi(config: ProtocolConfig) -> float:
    """Closed-form approximation of the network-average AoI (rounds).

    Collision terms use exponentials in n p_a q and n p_a eta; the active
    probability and root come from the self-consistent chain.  In the
    energy-sufficient regime the exact all-active expression is returned.
    """
    config = validate_config(config)
    if config.mechanism is Mechanism.SA_BASELINE:
        raise ValueError("no closed-form approximation for the ALOHA baseline")
    _, sol = solve_self_consistent(config)
    if sol.regime is Regime.ESR:
        return float(_approx_esr(config.mechanism, config.n, config.q, config.eta))
    return float(_approx_ecr(config.mechanism, config.n, config.M, config.xi, config.q, config.eta, sol.p_a, sol.z))


def physical_aoi(config: ProtocolConfig) -> float:
    """AoI in data-slot units: rounds last 1 + delta and harvest (1 + delta) xi."""
    config = validate_config(config)
    if config.mechanism is Mechanism.SA_BASELINE:
        return _rounds_result(config)[3]
    scaled = config.with_(xi=scaled_xi(config))
    return (1 + config.delta) * _rounds_result(scaled)[3]


def sa_baseline_aoi(config: ProtocolConfig) -> AoiResult:
    """AoI of energy-harvesting slotted ALOHA.

    Nodes holding M units send w.p. eta each round with no probing, so the
    buffer chain is the probing chain with parameter M - 1, and there is
    no mini-slot overhead (physical age equals age in rounds).
    """
    config = validate_config(config)
    if config.mechanism is not Mechanism.SA_BASELINE:
        raise ValueError("sa_baseline_aoi needs mechanism SA_BASELINE")
    sol, probs, moments, aoi, _ = _rounds_result(config)
    return AoiResult(
        config=config,
        regime=sol.regime,
        aoi_rounds=aoi,
        aoi_physical=aoi,
        probabilities=probs,
        moments=moments,
        approx_aoi_rounds=float("nan"),
        p_a=sol.p_a,
        z=sol.z,
    )


def analyze(config: ProtocolConfig) -> AoiResult:
    """Dispatch to :func:`network_aoi` or :func:`sa_baseline_aoi`."""
    config = validate_config(config)
    if config.mechanism is Mechanism.SA_BASELINE:
        return sa_baseline_aoi(config)
    return network_aoi(config)
