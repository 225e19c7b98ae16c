import itertools

import numpy as np
import pytest

from probeaoi.chain import TransitionKernel


def enumerated_kernel(mech, n, xi, q, eta, p_a, M):
    """Mean-field kernel of an active node by brute-force enumeration.

    Every other node is independently inactive, active-silent or
    active-probing; the tagged node's probe, fallback coin and harvest are
    enumerated too.  Returns the jump distribution keyed by net change.
    """
    others = [(1 - p_a, "off"), (p_a * (1 - q), "quiet"), (p_a * q, "probe")]
    jumps = {}
    for combo in itertools.product(others, repeat=n - 1):
        w = np.prod([c[0] for c in combo])
        k = sum(c[1] == "probe" for c in combo)
        for probe, wp in ((True, q), (False, 1 - q)):
            for coin, wc in ((True, eta), (False, 1 - eta)):
                for harvest, wh in ((1, xi), (0, 1 - xi)):
                    weight = w * wp * wc * wh
                    if weight == 0:
                        continue
                    if probe and k == 0:
                        send = True
                    elif not probe and k == 1:
                        send = False
                    elif mech == "AUC":
                        send = coin
                    elif mech == "RUC":
                        send = probe and coin
                    else:
                        send = False
                    delta = harvest - int(probe) - (M if send else 0)
                    jumps[delta] = jumps.get(delta, 0.0) + weight
    return jumps


def kernel_jumps(kernel: TransitionKernel, M):
    out = {}
    for d, p in ((1, kernel.p_ah), (0, kernel.p_ai), (-1, kernel.p_ar), (-(M - 1), kernel.p_ae),
                 (-M, kernel.p_au), (-(M + 1), kernel.p_ad)):
        out[d] = out.get(d, 0.0) + float(p)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}")
