import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probeaoi.analysis import (
    DeficitDistribution, analyze, approx_aoi, attempt_probability, auc_attempt_probability,
    auc_refill_closed_form, auc_success_probability, deficit_distribution, evaluate, interval_moments,
    mechanism_stability, network_aoi, physical_aoi, refill_constant, sa_baseline_aoi, success_probability,
    interval_aoi,
)
from probeaoi.chain import Regime, chain_order, solve_self_consistent, stability_condition
from probeaoi.model import Mechanism, ProtocolConfig, validate_config


def point_mass(level):
    return DeficitDistribution(np.array([level]), np.array([1.0]), 0.0, 0, 0, 0)


# --- access probabilities -------------------------------------------------

def test_lone_probing_node_always_attempts_and_succeeds():
    assert attempt_probability(1.0, 1.0, 1, 0.3) == pytest.approx(1.0)
    assert success_probability(1.0, 1.0, 1, 0.3) == pytest.approx(1.0)


@given(p_a=st.floats(0, 1), q=st.floats(0.001, 1), n=st.integers(1, 300))
def test_safc_attempts_only_after_reservation(p_a, q, n):
    assert attempt_probability(p_a, q, n, 0.0) == pytest.approx(q * (1 - p_a * q) ** (n - 1), abs=1e-15)
    if q * (1 - p_a * q) ** (n - 1) > 1e-300:
        assert success_probability(p_a, q, n, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_unified_equals_auc_forms_example():
    assert abs(attempt_probability(0.5, 0.5, 2, 0.25) - auc_attempt_probability(0.5, 0.5, 0.25, 2)) < 1e-15
    assert abs(success_probability(0.5, 0.5, 2, 0.25) - auc_success_probability(0.5, 0.5, 0.25, 2)) < 1e-15


def test_unified_equals_auc_forms_random(rng):
    for _ in range(100):
        p_a, q, eta = rng.uniform(0, 1, 3)
        n = int(rng.integers(1, 200))
        assert abs(attempt_probability(p_a, q, n, eta) - auc_attempt_probability(p_a, q, eta, n)) < 1e-12
        assert abs(success_probability(p_a, q, n, eta) - auc_success_probability(p_a, q, eta, n)) < 1e-12


def test_zero_attempt_probability_raises():
    with pytest.raises(ZeroDivisionError):
        success_probability(0.5, 0.0, 10, 0.0)


# --- moments --------------------------------------------------------------

def test_geometric_access_moments():
    m = interval_moments(0.5, point_mass(1), 0.5)
    assert (m.e_ta, m.e_ta2) == (2.0, 6.0)


def test_deterministic_refill():
    m = interval_moments(0.5, point_mass(2), 1.0)
    assert (m.e_te, m.e_te2) == (2.0, 4.0)
    assert m.e_t == 4.0 and m.e_t2 == 6.0 + 2 * 2 * 2 + 4


def test_negative_binomial_moments_by_simulation():
    rng = np.random.default_rng(3)
    xi, level = 0.3, 4
    draws = rng.negative_binomial(level, xi, size=400_000) + level
    m = interval_moments(1.0, point_mass(level), xi)
    assert draws.mean() == pytest.approx(m.e_te, rel=5e-3)
    assert (draws.astype(float) ** 2).mean() == pytest.approx(m.e_te2, rel=1e-2)


def random_auc(rng):
    while True:
        cfg = validate_config(ProtocolConfig(n=int(rng.integers(2, 120)), xi=float(rng.uniform(0.02, 0.5)),
                                             M=int(rng.integers(2, 12)), q=float(rng.uniform(0.01, 1)),
                                             eta=float(rng.uniform(0, 1))))
        _, sol = solve_self_consistent(cfg, warn_multiple=False)
        if sol.regime is Regime.ECR:
            return cfg, sol


def test_auc_mean_refill_closed_form(rng):
    """The signed-support deficit sum gives the closed-form mean refill time."""
    for _ in range(100):
        cfg, sol = random_auc(rng)
        d = deficit_distribution(sol, cfg.mechanism, cfg.q, cfg.xi, signed=True)
        m = interval_moments(1.0, d, cfg.xi)
        e1, _ = auc_refill_closed_form(cfg.q, cfg.xi, sol.z, cfg.M)
        assert abs(m.e_te - e1) < 1e-10 * max(1.0, abs(e1))


def test_auc_second_refill_moment_gap_is_cost_variance(rng):
    """The closed-form second moment drops Var(packet cost) / xi^2."""
    for _ in range(20):
        cfg, sol = random_auc(rng)
        d = deficit_distribution(sol, cfg.mechanism, cfg.q, cfg.xi, signed=True)
        m = interval_moments(1.0, d, cfg.xi)
        _, e2 = auc_refill_closed_form(cfg.q, cfg.xi, sol.z, cfg.M)
        var = d.omega_deep + d.omega_eco - (d.omega_deep - d.omega_eco) ** 2
        assert m.e_te2 - e2 == pytest.approx(var / cfg.xi ** 2, rel=1e-9, abs=1e-9)


# --- deficit --------------------------------------------------------------

@pytest.mark.parametrize("mech", ["AUC", "RUC", "SAFC", "SA"])
def test_deficit_is_subprobability(mech):
    cfg = validate_config(ProtocolConfig(mechanism=mech, q=0.3, eta=0.2))
    _, sol = solve_self_consistent(cfg)
    d = deficit_distribution(sol, cfg.mechanism, cfg.q, cfg.xi, chain_order(cfg))
    assert np.all(d.pmf >= 0) and d.pmf.sum() <= 1 + 1e-12
    assert d.pmf.sum() + d.residual == pytest.approx(1, abs=1e-12)


def test_safc_deficit_has_no_economical_term():
    cfg = validate_config(ProtocolConfig(mechanism="SAFC", q=0.3))
    _, sol = solve_self_consistent(cfg)
    d = deficit_distribution(sol, cfg.mechanism, cfg.q, cfg.xi)
    assert d.omega_eco == 0
    M, p_a = cfg.M, sol.p_a
    for l in range(1, M + 2):
        expect = (d.omega_deep * sol(2 * M + 2 - l) + d.omega_std * (sol(2 * M + 1 - l) if l <= M else 0)) / p_a
        assert d.prob(l) == pytest.approx(expect, rel=1e-12)


# --- age ------------------------------------------------------------------

def test_perfect_updating():
    assert interval_aoi(1.0, 1.0, 0.0, 0.0) == 1.0


def test_safc_energy_sufficient_two_nodes():
    res = network_aoi(ProtocolConfig(n=2, xi=1.0, M=1, delta=0.0, mechanism="SAFC", q=0.5))
    assert res.regime is Regime.ESR
    assert res.aoi_rounds == pytest.approx(4.0, abs=1e-12)
    assert approx_aoi(ProtocolConfig(n=2, xi=1.0, M=1, mechanism="SAFC", q=0.5)) == pytest.approx(4.0, abs=1e-12)


def test_refill_constant_example():
    assert refill_constant(7, 0.3, 0.1, 0.5) == pytest.approx(6.2, abs=1e-12)


def test_defaults_regime_matches_mechanism_inequality():
    res = network_aoi(ProtocolConfig())
    lhs, rhs = mechanism_stability(Mechanism.AUC, 50, 7, 0.1, 0.2, 0.1, res.p_a)
    assert (lhs > rhs) == (res.regime is Regime.ECR)
    assert res.regime is Regime.ECR


def test_ruc_active_probability_closed_form():
    cfg = ProtocolConfig(mechanism="RUC", q=0.6, eta=0.2)
    _, sol = solve_self_consistent(cfg)
    xi, q, M, z = cfg.xi, cfg.q, cfg.M, sol.z
    g = (1 - xi) * z + xi
    closed = xi * z * (1 - z ** M) * g / (q * z * (1 - z ** M) * g + M * (1 - z) * (xi * (1 - q) - (1 - xi) * q * z))
    assert sol.p_a == pytest.approx(closed, rel=1e-9)


def test_safc_active_probability_closed_form():
    cfg = ProtocolConfig(mechanism="SAFC", q=0.2)
    _, sol = solve_self_consistent(cfg)
    xi, q, M, z, n = cfg.xi, cfg.q, cfg.M, sol.z, cfg.n
    g = (1 - xi) * z + xi
    ratio = (1 - z) * (q * g - xi) / (q * z * (z ** M - 1) * g)
    closed = 1 / q - ratio ** (1 / (n - 1)) / q
    assert sol.p_a == pytest.approx(closed, rel=1e-9)


@settings(max_examples=80, deadline=None)
@given(mech=st.sampled_from(["AUC", "RUC", "SAFC", "SA"]), n=st.integers(1, 100), xi=st.floats(0.01, 1),
       M=st.integers(1, 10), q=st.floats(0.01, 1), eta=st.floats(0.0, 1))
def test_mechanism_inequality_agrees_with_chain(mech, n, xi, M, q, eta):
    cfg = validate_config(ProtocolConfig(n=n, xi=xi, M=M, mechanism=mech, q=q, eta=eta))
    if cfg.mechanism is Mechanism.SA_BASELINE and M == 1:
        return
    kernel, sol = solve_self_consistent(cfg, warn_multiple=False)
    lhs, rhs = mechanism_stability(cfg.mechanism, n, M, xi, cfg.q, cfg.eta, sol.p_a)
    if abs(lhs - rhs) > 1e-9:
        assert (lhs > rhs) == stability_condition(kernel, chain_order(cfg))


def test_batch_matches_scalar():
    base = ProtocolConfig()
    q = np.array([0.1, 0.44, 0.9])
    eta = np.array([0.05, 0.08, 0.5])
    batch = evaluate(base, q=q, eta=eta)
    for i in range(3):
        res = network_aoi(base.with_(q=float(q[i]), eta=float(eta[i])))
        assert batch.aoi[i] == pytest.approx(res.aoi_rounds, rel=1e-9)
        assert batch.p_a[i] == pytest.approx(res.p_a, rel=1e-9)
        assert batch.approx[i] == pytest.approx(res.approx_aoi_rounds, rel=1e-9)


# --- physical time and baseline --------------------------------------------

def test_physical_zero_delta_is_identity():
    cfg = ProtocolConfig(delta=0.0)
    assert physical_aoi(cfg) == pytest.approx(network_aoi(cfg).aoi_rounds, rel=1e-14)


def test_physical_scaling_rule():
    cfg = ProtocolConfig(delta=1 / 20)
    expect = 1.05 * network_aoi(cfg.with_(xi=0.105, delta=0.0)).aoi_rounds
    assert physical_aoi(cfg) == pytest.approx(expect, rel=1e-12)


def test_physical_continuous_at_zero():
    base = physical_aoi(ProtocolConfig(delta=0.0))
    assert abs(physical_aoi(ProtocolConfig(delta=1e-9)) - base) < 1e-5


def test_sa_lone_node():
    res = sa_baseline_aoi(ProtocolConfig(n=1, xi=1.0, M=1, mechanism="SA", eta=1.0))
    assert res.regime is Regime.ESR and res.aoi_rounds == pytest.approx(1.0)


def test_sa_energy_sufficient_formula():
    n, eta = 10, 0.05
    res = sa_baseline_aoi(ProtocolConfig(n=n, xi=1.0, M=3, mechanism="SA", eta=eta))
    assert res.regime is Regime.ESR
    assert res.aoi_rounds == pytest.approx(1 / (eta * (1 - eta) ** (n - 1)), rel=1e-12)


def test_sa_physical_equals_rounds():
    res = analyze(ProtocolConfig(mechanism="SA", eta=0.5, delta=0.3))
    assert res.aoi_physical == res.aoi_rounds


def test_energy_sufficient_has_no_moments():
    res = network_aoi(ProtocolConfig(n=2, xi=1.0, M=1, mechanism="AUC", q=0.5, eta=0.2))
    assert res.regime is Regime.ESR and res.moments is None and math.isnan(res.z)


@pytest.mark.parametrize("mech", ["RUC", "SAFC", "SA"])
def test_kernel_weights_agree_outside_auc(mech):
    cfg = validate_config(ProtocolConfig(mechanism=mech, q=0.4, eta=0.3))
    _, sol = solve_self_consistent(cfg)
    a = deficit_distribution(sol, cfg.mechanism, cfg.q, cfg.xi, chain_order(cfg))
    b = deficit_distribution(sol, cfg.mechanism, cfg.q, cfg.xi, chain_order(cfg), weights="kernel")
    assert np.allclose(a.pmf, b.pmf, rtol=1e-12, atol=1e-15)


def test_kernel_weights_sum_to_one():
    _, sol = solve_self_consistent(ProtocolConfig())
    d = deficit_distribution(sol, "AUC", 0.2, 0.1, weights="kernel")
    assert d.omega_deep + d.omega_std + d.omega_eco == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ValueError):
        deficit_distribution(sol, "AUC", 0.2, 0.1, weights="other")
