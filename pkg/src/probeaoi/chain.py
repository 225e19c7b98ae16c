"""Energy-buffer Markov chain of a typical node.

States are buffer levels m = 0, 1, 2, ...  Levels up to ``M`` are silent
(harvest only); from ``M + 1`` upward the node is active and one round can
move it by +1, 0, -1, -(M-1), -M or -(M+1).  Because upward moves are at
most one unit, the active tail is geometric with ratio ``z``, the root in
[0, 1) of the characteristic polynomial.

Every function here broadcasts over numpy arrays so that whole parameter
grids can be solved in one pass; scalar inputs give scalar outputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import sparse
from scipy.optimize import brentq

from .model import Mechanism, ProtocolConfig, validate_config

ROW_TOL = 1e-12
STABILITY_TOL = 1e-12


class Regime(str, Enum):
    ECR = "ECR"  # energy-constrained: stationary buffer law exists
    ESR = "ESR"  # energy-sufficient: buffers grow, nodes always active


class StabilityError(ValueError):
    """The chain has no stationary law (energy-sufficient regime)."""


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations."""


@dataclass(frozen=True)
class TransitionKernel:
    """Per-round jump probabilities.

    ``p_sh``/``p_si`` apply to silent levels; the six ``p_a*`` fields apply
    to active levels: harvest (+1), idle (0), reservation-only (-1),
    economical (-(M-1)), standard (-M) and deep (-(M+1)) update.
    """

    p_sh: float
    p_si: float
    p_ah: float
    p_ai: float
    p_ar: float
    p_ae: float
    p_au: float
    p_ad: float

    @property
    def transmit(self):
        """Probability that an active node sends data in a round."""
        return self.p_ae + self.p_au + self.p_ad

    def row_sums(self):
        return self.p_sh + self.p_si, self.p_ah + self.p_ai + self.p_ar + self.p_ae + self.p_au + self.p_ad

    def drift(self, M: int):
        """Mean energy lost per active round (equals f'(1))."""
        return (M + 1) * self.p_ad + M * self.p_au + (M - 1) * self.p_ae + self.p_ar - self.p_ah


@dataclass(frozen=True)
class StationarySolution:
    """Closed-form stationary law of the buffer chain.

    ``head`` is S_{M+1}, the mass of the lowest active level.  In the
    energy-sufficient regime the law does not exist; ``z`` is NaN and
    ``p_a`` is 1.
    """

    z: float
    s0: float
    head: float
    p_a: float
    regime: Regime
    M: int
    kernel: TransitionKernel

    def __call__(self, m):
        if self.regime is Regime.ESR:
            raise StabilityError("no stationary distribution in the energy-sufficient regime")
        return _stationary_at(self.kernel, self.z, self.s0, self.head, self.M, m)

    def vector(self, size: int) -> np.ndarray:
        return np.asarray(self(np.arange(size)), dtype=float)


def chain_order(config: ProtocolConfig) -> int:
    """Deep-update size minus one.

    Probing schemes pay 1 + M per probed packet, so the chain parameter is
    ``M``.  The ALOHA baseline pays M with no probe, which is the same
    chain with parameter ``M - 1``.
    """
    return config.M if config.mechanism.probes else config.M - 1


def reservation_outcomes(p_a, q, n: int):
    """Probabilities that none / exactly one of the other n-1 nodes probes."""
    p_a = np.asarray(p_a, dtype=float)
    q = np.asarray(q, dtype=float)
    if n == 1:
        shape = np.broadcast(p_a, q).shape
        return _out(np.ones(shape)), _out(np.zeros(shape))
    x = p_a * q
    P0 = (1.0 - x) ** (n - 1)
    P1 = (n - 1) * x * (1.0 - x) ** (n - 2)
    return _out(P0), _out(P1)


def _out(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


def kernel_for(mechanism: Mechanism, n: int, xi, q, eta, p_a) -> TransitionKernel:
    """Broadcasting kernel builder behind :func:`build_transition_kernel`."""
    xi = np.asarray(xi, dtype=float)
    q = np.asarray(q, dtype=float)
    eta = np.asarray(eta, dtype=float)
    p_a = np.asarray(p_a, dtype=float)
    one = np.ones(np.broadcast(xi, q, eta, p_a).shape)
    zero = 0.0 * one

    if mechanism is Mechanism.SA_BASELINE:
        return _kernel_out(xi, 1 - xi, xi * (1 - eta), (1 - xi) * (1 - eta), zero, zero, xi * eta, (1 - xi) * eta, one)

    P0, P1 = reservation_outcomes(p_a, q, n)
    P0 = P0 * one
    P1 = P1 * one
    if mechanism is Mechanism.AUC:
        send_probed = P0 + (1 - P0) * eta
        send_silent = (1 - P1) * eta
        p_ad = (1 - xi) * q * send_probed
        p_au = xi * q * send_probed + (1 - xi) * (1 - q) * send_silent
        p_ae = xi * (1 - q) * send_silent
        p_ar = (1 - xi) * q * (1 - P0) * (1 - eta)
        p_ai = xi * q * (1 - P0) * (1 - eta) + (1 - xi) * (1 - q) * (P1 + (1 - P1) * (1 - eta))
        p_ah = xi * (1 - q) * (P1 + (1 - P1) * (1 - eta))
    elif mechanism in (Mechanism.RUC, Mechanism.SAFC):
        # only probing nodes may send; SAFC is RUC with eta = 0
        if mechanism is Mechanism.SAFC:
            eta = 0.0 * eta
        send_probed = P0 + (1 - P0) * eta
        p_ad = (1 - xi) * q * send_probed
        p_au = xi * q * send_probed
        p_ae = zero
        p_ar = (1 - xi) * q * (1 - P0) * (1 - eta)
        p_ai = xi * q * (1 - P0) * (1 - eta) + (1 - xi) * (1 - q)
        p_ah = xi * (1 - q)
    else:  # pragma: no cover
        raise ValueError(mechanism)
    return _kernel_out(xi, 1 - xi, p_ah, p_ai, p_ar, p_ae, p_au, p_ad, one)


def _kernel_out(p_sh, p_si, p_ah, p_ai, p_ar, p_ae, p_au, p_ad, one) -> TransitionKernel:
    vals = [np.asarray(v * one, dtype=float) for v in (p_sh, p_si, p_ah, p_ai, p_ar, p_ae, p_au, p_ad)]
    return TransitionKernel(*(_out(v) for v in vals))


def build_transition_kernel(config: ProtocolConfig, p_a: float) -> TransitionKernel:
    """Kernel of a typical node when every other node is active w.p. ``p_a``."""
    if not 0.0 <= p_a <= 1.0:
        raise ValueError(f"p_a must lie in [0, 1], got {p_a}")
    return kernel_for(config.mechanism, config.n, config.xi, config.q, config.eta, p_a)


def stability_condition(kernel: TransitionKernel, M: int):
    """True iff consumption outweighs harvesting in the active regime.

    The boundary (equality) counts as energy-sufficient; a margin below
    ``STABILITY_TOL`` is treated as the boundary, since the root is then
    within rounding of 1.
    """
    lhs = (M + 1) * np.asarray(kernel.p_ad) + M * np.asarray(kernel.p_au) + (M - 1) * np.asarray(kernel.p_ae) + np.asarray(kernel.p_ar)
    res = lhs - np.asarray(kernel.p_ah) > STABILITY_TOL
    return bool(res) if res.ndim == 0 else res


def char_poly_coeffs(kernel: TransitionKernel, M: int) -> np.ndarray:
    """Coefficients of f(z) in ascending powers, shape (M + 3, *batch)."""
    p_ah = np.asarray(kernel.p_ah, dtype=float)
    c = np.zeros((M + 3,) + p_ah.shape)
    c[0] += p_ah
    c[1] += np.asarray(kernel.p_ai) - 1.0
    c[2] += kernel.p_ar
    c[M] += kernel.p_ae
    c[M + 1] += kernel.p_au
    c[M + 2] += kernel.p_ad
    return c


def _horner(coeffs: np.ndarray, z):
    acc = np.zeros_like(np.asarray(z, dtype=float) * coeffs[0])
    for c in coeffs[::-1]:
        acc = acc * z + c
    return acc


def char_poly(kernel: TransitionKernel, M: int, z):
    """f(z) = p_ad z^{M+2} + p_au z^{M+1} + p_ae z^M + p_ar z^2 + (p_ai - 1) z + p_ah."""
    return _out(_horner(char_poly_coeffs(kernel, M), np.asarray(z, dtype=float)))


def _root_batch(kernel: TransitionKernel, M: int) -> np.ndarray:
    """Root in [0, 1) for every stable entry, NaN elsewhere.

    f(1) = 0 always, so f(z) = (z - 1) g(z); g is the secant slope of a
    convex function, increasing on [0, 1] from -p_ah to f'(1).  Bisection
    on g avoids the cancellation of evaluating f next to its root at 1.
    """
    c = char_poly_coeffs(kernel, M)
    # synthetic division by (z - 1): d_k = sum_{j > k} c_j
    d = np.cumsum(c[::-1], axis=0)[::-1][1:]
    stable = np.asarray(stability_condition(kernel, M))
    lo = np.zeros(stable.shape)
    hi = np.ones(stable.shape)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        neg = _horner(d, mid) < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    z = 0.5 * (lo + hi)
    # Newton polish on g, kept inside the final bracket
    dd = d[1:] * np.arange(1, d.shape[0]).reshape((-1,) + (1,) * z.ndim)
    for _ in range(2):
        gz = _horner(d, z)
        gp = _horner(dd, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(gp > 0, gz / gp, 0.0)
        cand = z - step
        z = np.where((cand >= lo) & (cand <= hi), cand, z)
    z = np.where(np.asarray(kernel.p_ah) == 0, 0.0, z)
    return np.where(stable, z, np.nan)


def characteristic_root(kernel: TransitionKernel, M: int):
    """Unique root in [0, 1) of the characteristic polynomial.

    Raises :class:`StabilityError` when the stability condition fails, in
    which case no such root exists.
    """
    z = _root_batch(kernel, M)
    if np.any(np.isnan(z)):
        raise StabilityError("stability condition violated: energy-sufficient regime, no root in [0, 1)")
    return _out(z)


def _harvest_over_z(kernel: TransitionKernel, z, M: int):
    """p_ah / z through the root identity.

    On the root, p_ah / z = 1 - p_ai - p_ar z - p_ae z^{M-1} - p_au z^M -
    p_ad z^{M+1}.  This stays accurate when z is tiny (z ~ p_ah), where the
    direct ratio inherits the root's absolute error.
    """
    z = np.asarray(z, dtype=float)
    return (1 - np.asarray(kernel.p_ai) - kernel.p_ar * z - kernel.p_ae * z ** (M - 1)
            - kernel.p_au * z ** M - kernel.p_ad * z ** (M + 1))


def _head(kernel: TransitionKernel, z, M: int, xi):
    """S_{M+1} from normalization of the piecewise law.

    Each level is written as a multiple of S_{M+1}; S_0 = p_ad S_{M+1} / xi
    so the result stays finite when p_ad = 0 (xi = 1).
    """
    z = np.asarray(z, dtype=float)
    b = kernel.p_ae + z * kernel.p_au + z ** 2 * kernel.p_ad
    total = np.asarray(kernel.p_ad) / xi + 1.0 / (1.0 - z)
    if M >= 1:
        total = total + _harvest_over_z(kernel, z, M) / xi
    if M >= 2:
        total = total + ((M - 1) * (kernel.p_ae + kernel.p_au + kernel.p_ad) / (xi * (1 - z))
                         - b * (1 - z ** (M - 1)) / (xi * (1 - z) ** 2))
    return 1.0 / total


def s0_closed_form(kernel: TransitionKernel, z, M: int):
    """Mass of the empty buffer, as the explicit reciprocal sum.

    The last term is evaluated through the root identity
    z^2 p_ar + z(p_ai - 1) + p_ah = -(p_ad z^{M+2} + p_au z^{M+1} + p_ae z^M),
    which equals the literal form on the root and stays finite at z = 0.
    """
    z = np.asarray(z, dtype=float)
    p_ad = np.asarray(kernel.p_ad, dtype=float)
    b = kernel.p_ae + z * kernel.p_au + z ** 2 * p_ad
    inv = (1.0
           + _harvest_over_z(kernel, z, M) / p_ad
           + ((M - 1) * (kernel.p_ae + kernel.p_au + p_ad) + kernel.p_sh) / (p_ad * (1 - z))
           - b / (p_ad * (1 - z) ** 2)
           + z ** (M - 1) * b / (p_ad * (1 - z) ** 2))
    return _out(1.0 / inv)


def _stationary_at(kernel, z, s0, head, M, m):
    m = np.asarray(m)
    z = float(z)
    xi = kernel.p_sh
    out = np.zeros(m.shape, dtype=float)
    out = np.where(m == 0, s0, out)
    if M >= 2:
        b = kernel.p_ae + z * kernel.p_au + z ** 2 * kernel.p_ad
        mm = np.clip(m, 1, None)
        mid = head * (kernel.p_ad * (1 + z) + kernel.p_au + b * (1 - z ** (mm - 1)) / (1 - z)) / xi
        out = np.where((m >= 1) & (m <= M - 1), mid, out)
    if M >= 1:
        out = np.where(m == M, head * float(_harvest_over_z(kernel, z, M)) / xi, out)
    tail_exp = np.clip(m - M - 1, 0, None)
    out = np.where(m >= M + 1, head * z ** tail_exp, out)
    return _out(out)


def stationary_distribution(kernel: TransitionKernel, z: float, M: int) -> StationarySolution:
    """Piecewise closed-form stationary law for a root ``z`` of the chain."""
    if not 0.0 <= z < 1.0:
        raise ValueError(f"root must lie in [0, 1), got {z}")
    if not stability_condition(kernel, M):
        raise StabilityError("stability condition violated: no stationary distribution")
    head = float(_head(kernel, z, M, kernel.p_sh))
    s0 = kernel.p_ad * head / kernel.p_sh
    sol = StationarySolution(z=float(z), s0=float(s0), head=head, p_a=0.0, regime=Regime.ECR, M=M, kernel=kernel)
    return _replace_pa(sol, active_probability(sol))


def _replace_pa(sol: StationarySolution, p_a: float) -> StationarySolution:
    return StationarySolution(sol.z, sol.s0, sol.head, p_a, sol.regime, sol.M, sol.kernel)


def active_probability(solution: StationarySolution) -> float:
    """Stationary probability of holding at least M + 1 units.

    Evaluated as S_0 xi / (p_ad (1 - z)), which is the geometric tail sum
    S_{M+1} / (1 - z); the tail form is used when p_ad = 0.
    """
    if solution.regime is Regime.ESR:
        return 1.0
    k = solution.kernel
    if k.p_ad > 0:
        val = solution.s0 * k.p_sh / (k.p_ad * (1 - solution.z))
    else:
        val = solution.head / (1 - solution.z)
    return min(float(val), 1.0)


def conservation_active_probability(kernel: TransitionKernel, M: int):
    """Active probability implied by energy balance alone.

    Silent levels gain xi per round and active levels lose drift(M) on
    average, so stationarity needs xi (1 - p_a) = drift * p_a.  In the
    energy-constrained regime this coincides with :func:`active_probability`
    (checked in the tests); otherwise it is 1.
    """
    d = np.asarray(kernel.drift(M), dtype=float)
    xi = np.asarray(kernel.p_sh, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(d > 0, xi / (xi + np.where(d > 0, d, 1.0)), 1.0)
    return _out(np.minimum(val, 1.0))


@dataclass(frozen=True)
class FixedPoint:
    p_a: np.ndarray
    iterations: int
    residual: float
    method: str


def solve_fixed_point(mechanism: Mechanism, n: int, M: int, xi, q, eta, *, initial=0.0,
                      damping: float = 0.5, tol: float = 1e-10, max_iter: int = 10_000) -> FixedPoint:
    """Damped iteration p <- (1 - damping) p + damping Phi(p), batched.

    Phi maps the others' active probability to the typical node's.  The
    first step is undamped, so a kernel that ignores p_a converges at once.
    Entries whose residual keeps changing sign (oscillation) or that do not
    converge are finished by bracketing on p - Phi(p) over [0, 1].
    """

    def phi(p):
        k = kernel_for(mechanism, n, xi, q, eta, p)
        return np.asarray(conservation_active_probability(k, M), dtype=float)

    shape = np.broadcast(np.asarray(xi), np.asarray(q), np.asarray(eta), np.asarray(initial)).shape
    p = phi(np.broadcast_to(np.asarray(initial, dtype=float), shape).copy()) * np.ones(shape)
    flips = np.zeros(shape, dtype=int)
    prev_sign = np.zeros(shape)
    done = np.zeros(shape, dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        r = phi(p) - p
        done = np.abs(r) < tol
        if done.all():
            break
        sign = np.sign(r)
        flips += (sign * prev_sign < 0)
        prev_sign = sign
        stuck = flips > 50
        if (done | stuck).all():
            break
        p = np.where(done, p, p + damping * r)
    method = "damped"
    pending = ~done
    if pending.any():
        method = "damped+bracket"
        xi_b, q_b, eta_b = (np.broadcast_to(np.asarray(v, dtype=float), shape) for v in (xi, q, eta))
        for idx in zip(*np.nonzero(pending)) if shape else [()]:
            args = (xi_b[idx], q_b[idx], eta_b[idx])
            g = lambda x, a=args: float(phi_scalar(mechanism, n, M, *a, x)) - x  # noqa: E731
            if g(1.0) >= 0.0:
                root = 1.0
            else:
                root = brentq(lambda x: -g(x), 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
            if shape:
                p[idx] = root
            else:
                p = np.asarray(root)
    residual = float(np.max(np.abs(phi(p) - p))) if np.size(p) else 0.0
    if residual > tol:
        raise ConvergenceError(f"active-probability fixed point not reached (residual {residual:.3e})")
    return FixedPoint(p_a=p, iterations=it, residual=residual, method=method)


def phi_scalar(mechanism: Mechanism, n: int, M: int, xi, q, eta, p):
    return conservation_active_probability(kernel_for(mechanism, n, xi, q, eta, p), M)


def fixed_point_candidates(config: ProtocolConfig, points: int = 401) -> list[float]:
    """Approximate locations of every sign change of p - Phi(p) on [0, 1]."""
    M = chain_order(config)
    grid = np.linspace(0.0, 1.0, points)
    k = kernel_for(config.mechanism, config.n, config.xi, config.q, config.eta, grid)
    g = grid - np.asarray(conservation_active_probability(k, M))
    roots = []
    for i in range(points - 1):
        if g[i] == 0.0:
            roots.append(float(grid[i]))
        elif g[i] * g[i + 1] < 0:
            roots.append(float(0.5 * (grid[i] + grid[i + 1])))
    if g[-1] == 0.0:
        roots.append(1.0)
    return roots


def solve_self_consistent(config: ProtocolConfig, initial: float = 0.0, *, warn_multiple: bool = True):
    """Active probability consistent with the kernel it induces.

    Returns ``(kernel, solution)``; in the energy-sufficient regime the
    solution has ``p_a = 1`` and no stationary law.  The reported p_a is
    re-derived from the closed-form stationary law and must agree with the
    fixed point to 1e-8.
    """
    config = validate_config(config)
    M = chain_order(config)
    fp = solve_fixed_point(config.mechanism, config.n, M, config.xi, config.q, config.eta, initial=initial)
    p_star = float(fp.p_a)
    if warn_multiple:
        cands = fixed_point_candidates(config)
        if len(cands) > 1:
            warnings.warn(f"several self-consistent active probabilities near {cands}; reporting {p_star:.6g}",
                          RuntimeWarning, stacklevel=2)
    kernel = kernel_for(config.mechanism, config.n, config.xi, config.q, config.eta, p_star)
    if not stability_condition(kernel, M):
        esr = StationarySolution(z=float("nan"), s0=0.0, head=0.0, p_a=1.0, regime=Regime.ESR, M=M, kernel=kernel)
        return kernel, esr
    z = characteristic_root(kernel, M)
    sol = stationary_distribution(kernel, z, M)
    if abs(sol.p_a - p_star) > 1e-8:
        raise ConvergenceError(f"closed-form active probability {sol.p_a:.12g} disagrees with fixed point {p_star:.12g}")
    return kernel, sol


def transition_matrix(kernel: TransitionKernel, M: int, size: int) -> sparse.csr_matrix:
    """Explicit chain on levels 0..size-1; moves past the top are held."""
    rows, cols, vals = [], [], []

    def add(i, j, p):
        if p > 0:
            rows.append(i)
            cols.append(min(max(j, 0), size - 1))
            vals.append(p)

    for m in range(size):
        if m <= M:
            add(m, m + 1, kernel.p_sh)
            add(m, m, kernel.p_si)
        else:
            add(m, m + 1, kernel.p_ah)
            add(m, m, kernel.p_ai)
            add(m, m - 1, kernel.p_ar)
            add(m, m - (M - 1), kernel.p_ae)
            add(m, m - M, kernel.p_au)
            add(m, m - (M + 1), kernel.p_ad)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(size, size))


def oracle_stationary(kernel: TransitionKernel, M: int, truncation: int | None = None, *,
                      tol: float = 1e-12, max_iter: int = 2_000_000, boundary_tol: float = 1e-10,
                      max_size: int = 200_000) -> np.ndarray:
    """Stationary vector of the truncated chain by power iteration.

    Independent of the closed form: it only uses the jump taxonomy.  The
    truncation doubles while more than ``boundary_tol`` mass sits at the
    top level.  A chain without consumption drifts upward and its mass
    ends at the top; pass ``boundary_tol=1.0`` to inspect that case.
    """
    size = truncation or 200 * (M + 1)
    while True:
        PT = transition_matrix(kernel, M, size).T.tocsr()
        v = np.zeros(size)
        v[0] = 1.0
        for _ in range(max_iter):
            # two steps per check keeps period-2 artifacts visible
            nxt = PT @ (PT @ v)
            nxt /= nxt.sum()
            if np.abs(nxt - v).sum() < tol:
                v = nxt
                break
            v = nxt
        else:
            raise ConvergenceError("power iteration did not converge")
        if v[-1] <= boundary_tol or size >= max_size:
            return v
        size *= 2
