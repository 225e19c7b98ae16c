import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from probeaoi.chain import (
    ConvergenceError, Regime, StabilityError, TransitionKernel, active_probability, build_transition_kernel,
    char_poly, characteristic_root, chain_order, conservation_active_probability, fixed_point_candidates,
    kernel_for, oracle_stationary, reservation_outcomes, s0_closed_form, solve_self_consistent,
    stability_condition, stationary_distribution,
)
from probeaoi.model import Mechanism, ProtocolConfig, validate_config

from conftest import enumerated_kernel, kernel_jumps


def active_kernel(xi=0.1, ah=0.0, ai=0.0, ar=0.0, ae=0.0, au=0.0, ad=0.0):
    return TransitionKernel(xi, 1 - xi, ah, ai, ar, ae, au, ad)


QUAD = active_kernel(xi=0.3, ah=0.1, ai=0.4, au=0.5)


def balance_residual(kernel, M, pi_fn, top):
    """max |(pi P)_m - pi_m| for m <= top with the untruncated chain."""
    size = top + M + 3
    pi = np.asarray(pi_fn(np.arange(size)), dtype=float)
    inflow = np.zeros(top + 1)
    for j in range(size):
        moves = [(j + 1, kernel.p_sh), (j, kernel.p_si)] if j <= M else [
            (j + 1, kernel.p_ah), (j, kernel.p_ai), (j - 1, kernel.p_ar), (j - M + 1, kernel.p_ae),
            (j - M, kernel.p_au), (j - M - 1, kernel.p_ad)]
        for dest, p in moves:
            if dest <= top:
                inflow[dest] += pi[j] * p
    return np.max(np.abs(inflow - pi[: top + 1]))


# --- reservation outcomes and kernels ---------------------------------------

def test_reservation_outcomes_examples():
    assert reservation_outcomes(0.3, 0.9, 1) == (1.0, 0.0)
    P0, P1 = reservation_outcomes(0.5, 0.4, 3)
    assert P0 == pytest.approx(0.64, abs=1e-15) and P1 == pytest.approx(0.32, abs=1e-15)
    assert reservation_outcomes(1, 1, 3) == (0.0, 0.0)


def test_lone_auc_node_always_reserves():
    k = build_transition_kernel(validate_config(ProtocolConfig(n=1, q=1, eta=0.37)), 0.8)
    assert (k.p_ad, k.p_au) == pytest.approx((0.9, 0.1), abs=1e-15)
    assert k.p_ae == k.p_ar == k.p_ai == k.p_ah == 0


def test_auc_hand_kernel_n3():
    k = kernel_for(Mechanism.AUC, 3, 0.1, 0.4, 0.2, 0.5)
    P0, P1 = 0.64, 0.32
    expect = dict(
        p_ad=0.9 * 0.4 * (P0 + (1 - P0) * 0.2),
        p_au=0.1 * 0.4 * (P0 + (1 - P0) * 0.2) + 0.9 * 0.6 * (1 - P1) * 0.2,
        p_ae=0.1 * 0.6 * (1 - P1) * 0.2,
        p_ar=0.9 * 0.4 * (1 - P0) * 0.8,
        p_ah=0.1 * 0.6 * (P1 + (1 - P1) * 0.8),
    )
    for name, val in expect.items():
        assert getattr(k, name) == pytest.approx(val, abs=1e-15)
    assert sum(k.row_sums()) == pytest.approx(2.0, abs=1e-12)


def test_safc_kernel_ignores_eta():
    a = kernel_for(Mechanism.SAFC, 20, 0.1, 0.3, 0.0, 0.4)
    b = kernel_for(Mechanism.SAFC, 20, 0.1, 0.3, 0.9, 0.4)
    assert a == b and a.p_ae == 0


@pytest.mark.parametrize("mech", ["AUC", "RUC", "SAFC"])
@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_kernel_matches_enumeration(mech, n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        xi, q, eta, p_a = rng.uniform(0.05, 0.95, 4)
        M = int(rng.integers(3, 8))
        k = kernel_for(Mechanism(mech), n, xi, q, eta, p_a)
        got = kernel_jumps(k, M)
        want = enumerated_kernel(mech, n, xi, q, eta if mech != "SAFC" else 0.0, p_a, M)
        for d in set(got) | set(want):
            assert got.get(d, 0) == pytest.approx(want.get(d, 0), abs=1e-13), (d, got, want)


@given(mech=st.sampled_from(list(Mechanism)), n=st.integers(1, 200), xi=st.floats(0.001, 1),
       q=st.floats(0, 1), eta=st.floats(0, 1), p_a=st.floats(0, 1))
def test_kernel_rows_are_distributions(mech, n, xi, q, eta, p_a):
    k = kernel_for(mech, n, xi, q, eta, p_a)
    silent, active = k.row_sums()
    assert silent == pytest.approx(1, abs=1e-12) and active == pytest.approx(1, abs=1e-12)
    for v in (k.p_ah, k.p_ai, k.p_ar, k.p_ae, k.p_au, k.p_ad):
        assert v >= -1e-15


# --- stability and root -----------------------------------------------------

def test_stability_examples():
    assert stability_condition(active_kernel(ah=0.1, au=0.5, ai=0.4), 1)
    assert not stability_condition(active_kernel(ah=0.3, ai=0.7), 4)
    # drift exactly zero: (M+1) p_ad = p_ah with M = 1
    assert not stability_condition(active_kernel(ah=0.4, ad=0.2, ai=0.4), 1)


def test_quadratic_root():
    z = characteristic_root(QUAD, 1)
    assert abs(z - 0.2) < 1e-12
    assert abs(char_poly(QUAD, 1, z)) < 1e-12


def test_zero_harvest_root():
    assert characteristic_root(active_kernel(ai=0.5, au=0.3, ad=0.2), 3) == 0.0


def test_unstable_root_raises():
    with pytest.raises(StabilityError):
        characteristic_root(active_kernel(ah=0.3, ai=0.7), 4)


def test_defaults_root_against_oracle_tail():
    cfg = ProtocolConfig()
    kernel, sol = solve_self_consistent(cfg)
    assert abs(char_poly(kernel, cfg.M, sol.z)) < 1e-12
    v = oracle_stationary(kernel, cfg.M)
    m = np.arange(cfg.M + 2, cfg.M + 20)
    assert np.allclose(v[m + 1] / v[m], sol.z, atol=1e-8)


# --- stationary law ----------------------------------------------------------

def test_quadratic_oracle_tail_ratio():
    v = oracle_stationary(QUAD, 1)
    assert v[5] / v[4] == pytest.approx(0.2, abs=1e-9)
    sol = stationary_distribution(QUAD, characteristic_root(QUAD, 1), 1)
    assert np.max(np.abs(sol.vector(len(v)) - v)) < 1e-10


def test_pure_harvest_oracle_drifts_to_boundary():
    v = oracle_stationary(active_kernel(ah=0.2, ai=0.8), 2, truncation=60, boundary_tol=1.0)
    assert v[-1] > 0.99


@pytest.mark.parametrize("mech,q,eta", [("AUC", 0.2, 0.1), ("AUC", 0.44, 0.08), ("RUC", 0.5, 0.3),
                                        ("SAFC", 0.2, 0.0), ("SA", 0.0, 0.5)])
def test_closed_form_matches_oracle(mech, q, eta):
    cfg = validate_config(ProtocolConfig(mechanism=mech, q=q, eta=eta))
    kernel, sol = solve_self_consistent(cfg)
    M = chain_order(cfg)
    v = oracle_stationary(kernel, M)
    closed = sol.vector(len(v))
    assert np.max(np.abs(closed - v)) < 1e-8
    assert sol.p_a == pytest.approx(v[M + 1:].sum(), abs=1e-8)
    assert sol.head == pytest.approx(sol.s0 * kernel.p_sh / kernel.p_ad, rel=1e-12)
    assert float(s0_closed_form(kernel, sol.z, M)) == pytest.approx(sol.s0, rel=1e-10)


def test_balance_at_defaults():
    cfg = ProtocolConfig()
    kernel, sol = solve_self_consistent(cfg)
    assert balance_residual(kernel, cfg.M, sol, 6 * cfg.M) < 1e-10


def random_ecr_kernel(rng, M):
    while True:
        xi = rng.uniform(0.02, 0.9)
        w = rng.dirichlet(np.full(6, 0.6))
        k = TransitionKernel(xi, 1 - xi, *w)
        if M == 1:
            k = TransitionKernel(xi, 1 - xi, w[0], w[1] + w[3], w[2], 0.0, w[4], w[5])
        if stability_condition(k, M) and characteristic_root(k, M) < 0.93:
            return k


def test_random_kernels_against_oracle_and_balance(rng):
    """50 random energy-constrained kernels, M from 1 to 10."""
    for i in range(50):
        M = 1 + i % 10
        k = random_ecr_kernel(rng, M)
        z = characteristic_root(k, M)
        assert abs(char_poly(k, M, z)) < 1e-12
        sol = stationary_distribution(k, z, M)
        v = oracle_stationary(k, M)
        assert np.max(np.abs(sol.vector(len(v)) - v)) < 1e-7, (i, M)
        assert balance_residual(k, M, sol, 4 * M + 8) < 1e-10


@settings(max_examples=60, deadline=None)
@given(mech=st.sampled_from(["AUC", "RUC", "SAFC", "SA"]), n=st.integers(1, 120), xi=st.floats(0.01, 1),
       M=st.integers(1, 12), q=st.floats(0.01, 1), eta=st.floats(0, 1))
def test_self_consistent_properties(mech, n, xi, M, q, eta):
    cfg = validate_config(ProtocolConfig(n=n, xi=xi, M=M, mechanism=mech, q=q, eta=eta))
    try:
        kernel, sol = solve_self_consistent(cfg, warn_multiple=False)
    except ConvergenceError:
        assume(False)
    Mc = chain_order(cfg)
    assert 0 <= sol.p_a <= 1
    if sol.regime is Regime.ECR:
        assert 0 <= sol.z < 1
        assert abs(char_poly(kernel, Mc, sol.z)) < 1e-12
        assert sol.p_a == pytest.approx(float(conservation_active_probability(kernel, Mc)), abs=1e-8)
        mass = sol.vector(Mc + 1).sum() + sol.head / (1 - sol.z)
        assert mass == pytest.approx(1, abs=1e-10)
        assert balance_residual(kernel, Mc, sol, 3 * Mc + 4) < 1e-10
    else:
        assert sol.p_a == 1 and not stability_condition(kernel, Mc)


def test_active_probability_is_tail_sum():
    kernel, sol = solve_self_consistent(ProtocolConfig(mechanism="RUC", q=0.6, eta=0.2))
    assert active_probability(sol) == pytest.approx(sol.head / (1 - sol.z), rel=1e-12)


def test_active_probability_clamped():
    kernel, sol = solve_self_consistent(ProtocolConfig())
    from dataclasses import replace
    bent = replace(sol, s0=sol.s0 * 1e6)
    assert active_probability(bent) == 1.0


def test_lone_node_converges_immediately():
    cfg = validate_config(ProtocolConfig(n=1, xi=0.1, q=0.5, eta=0.3))
    kernel, sol = solve_self_consistent(cfg)
    assert kernel == build_transition_kernel(cfg, 0.0) == build_transition_kernel(cfg, 1.0)
    assert sol.p_a == pytest.approx(float(conservation_active_probability(kernel, cfg.M)), abs=1e-14)


def test_auc_fixed_point_closed_relation():
    cfg = ProtocolConfig(q=0.44, eta=0.08)
    _, sol = solve_self_consistent(cfg)
    p_a, n, q, eta, xi, M = sol.p_a, cfg.n, cfg.q, cfg.eta, cfg.xi, cfg.M
    P0, P1 = reservation_outcomes(p_a, q, n)
    rhs = xi / (M * (q * (P0 + (1 - P0) * eta) + eta * (1 - q) * (1 - P1)) + q)
    assert abs(p_a - rhs) < 1e-8


def test_fixed_point_unique_at_defaults():
    assert len(fixed_point_candidates(ProtocolConfig())) == 1
