import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from absorbmc.concentration import conc_steady
from absorbmc.lattice_walk import WalkConfig
from absorbmc.model_fit import FitParams, ParamTable, build_param_table, interp_params
from absorbmc.receptor_queue import (
    QueueSolution,
    ReceptorSpec,
    TableDomainError,
    arrival_rate,
    blocking_q,
    solve_fixed_point,
    sweep_queue,
)
from conftest import EXEMPT

CFG3 = WalkConfig(3)
SITE = (6, 0, 0)


def synthetic_table(site=SITE, q=(0.0, 0.25, 0.5, 0.75, 1.0), alpha=(2.0, 1.7, 1.5, 1.35, 1.2), d=3):
    # alpha falls with q like a fitted receptor table, beta and gamma held fixed
    dist = math.dist(site, (0,) * len(site))
    params = tuple(FitParams(a, 1.1, 0.0 if d == 3 else 0.8, dist) for a in alpha)
    return ParamTable(d, site, site, tuple(q), params, EXEMPT, WalkConfig(d))


def test_blocking_examples():
    assert blocking_q(0.0, 2.0) == 1.0
    assert blocking_q(2.0, 2.0) == 0.5
    q = blocking_q(6.0, 2.0)
    assert q == 0.25 and q * 6.0 == 0.75 * 2.0
    with pytest.raises(ValueError):
        blocking_q(-1.0, 1.0)
    with pytest.raises(ValueError):
        blocking_q(1.0, 0.0)


def test_spec_validation():
    spec = ReceptorSpec(2.0, [6, 0, 0])
    assert spec.site == SITE and spec.mu * spec.T_trafficking == 1.0
    with pytest.raises(ValueError):
        ReceptorSpec(0.0, SITE)
    with pytest.raises(ValueError):
        ReceptorSpec(1.0, SITE, kappa=-1.0)


def test_arrival_rate_linear_and_checked():
    table = synthetic_table()
    spec = ReceptorSpec(1.0, SITE)
    D = CFG3.D
    assert arrival_rate(0.0, spec, table, 0.5, D, 3) == 0.0
    a = arrival_rate(1.0, spec, table, 0.6, D, 3)
    assert arrival_rate(2.0, spec, table, 0.6, D, 3) == pytest.approx(2 * a, rel=1e-15)
    assert a == pytest.approx(conc_steady(interp_params(table, 0.6), 1.0, 6.0, D, 3), rel=1e-15)
    assert arrival_rate(1.0, ReceptorSpec(1.0, SITE, kappa=3.0), table, 0.6, D, 3) == pytest.approx(3 * a, rel=1e-15)
    assert arrival_rate(1.0, spec, table, 1.0, D, 3) < arrival_rate(1.0, spec, table, 0.0, D, 3)
    with pytest.raises(TableDomainError):
        arrival_rate(1.0, spec, table, 1.2, D, 3)


def test_table_must_match_receptor():
    spec = ReceptorSpec(1.0, (4, 0, 0))
    with pytest.raises(ValueError, match="receptor sits"):
        solve_fixed_point(1.0, spec, synthetic_table(), CFG3.D, 3)
    short = synthetic_table(q=(0.0, 0.5, 0.9), alpha=(2.0, 1.5, 1.3))
    with pytest.raises(TableDomainError, match="q = 1"):
        solve_fixed_point(1.0, ReceptorSpec(1.0, SITE), short, CFG3.D, 3)
    with pytest.raises(ValueError):
        solve_fixed_point(1.0, ReceptorSpec(1.0, SITE), synthetic_table(), CFG3.D, 3, omega=0.0)


def _check_solution(sol: QueueSolution, spec, table, tol=1e-8):
    assert sol.converged and sol.iterations <= 500
    assert sol.q + sol.p_b == 1.0
    assert sol.lambda_a == sol.q * sol.lambda_in
    lam = arrival_rate(sol.Q, spec, table, sol.q, CFG3.D, 3)
    assert lam == sol.lambda_in
    assert abs(sol.q - blocking_q(lam, spec.mu)) <= tol * min(1.0, sol.q)
    assert sol.lambda_a <= spec.mu * (1 + 1e-8) and sol.lambda_a <= sol.lambda_in
    assert sol.trace[0] == 1.0


@given(logQ=st.floats(-2, 4), T=st.sampled_from([0.5, 1.0, 2.0]))
def test_solution_consistency(logQ, T):
    table = synthetic_table()
    spec = ReceptorSpec(T, SITE)
    _check_solution(solve_fixed_point(10.0**logQ, spec, table, CFG3.D, 3), spec, table)


def test_zero_release_keeps_receptor_free():
    table = synthetic_table()
    sol = solve_fixed_point(0.0, ReceptorSpec(1.0, SITE), table, CFG3.D, 3)
    assert sol.q == 1.0 and sol.lambda_in == 0.0 and sol.iterations == 1


def test_fast_service_limit():
    table = synthetic_table()
    sol = solve_fixed_point(1.0, ReceptorSpec(1e-9, SITE), table, CFG3.D, 3)
    assert sol.q > 1 - 1e-6
    assert sol.lambda_a == pytest.approx(sol.lambda_in, rel=1e-6)


def test_result_independent_of_damping():
    table = synthetic_table()
    spec = ReceptorSpec(1.0, SITE)
    for Q in (0.5, 20.0, 1e3):
        a = solve_fixed_point(Q, spec, table, CFG3.D, 3, omega=0.5)
        b = solve_fixed_point(Q, spec, table, CFG3.D, 3, omega=0.2)
        c = solve_fixed_point(Q, spec, table, CFG3.D, 3, omega=1.0)
        assert abs(a.q - b.q) <= 1e-7 * a.q and abs(a.q - c.q) <= 1e-7 * a.q


def test_oscillation_falls_back_to_bisection():
    # a fitted table makes the map increasing in q, so iterates approach monotonically;
    # an amplitude that grows with q reverses that and undamped steps overshoot
    table = synthetic_table(alpha=(0.01, 0.2, 1.0, 5.0, 20.0))
    spec = ReceptorSpec(1.0, SITE)
    sol = solve_fixed_point(10.0, spec, table, CFG3.D, 3, omega=1.0)
    assert sol.method == "bisection"
    _check_solution(sol, spec, table)


def test_non_convergence_is_flagged():
    table = synthetic_table()
    sol = solve_fixed_point(50.0, ReceptorSpec(1.0, SITE), table, CFG3.D, 3, max_iter=3)
    assert not sol.converged and sol.iterations == 3
    assert sol.residual > 1e-8


def test_leaving_table_raises_domain_error():
    table = synthetic_table(q=(0.5, 0.75, 1.0), alpha=(1.5, 1.35, 1.2))
    with pytest.raises(TableDomainError, match="below the table minimum"):
        solve_fixed_point(1e3, ReceptorSpec(1.0, SITE), table, CFG3.D, 3)


def test_one_dimensional_queue_leaves_valid_range():
    # in 1-D the table starts at q = 0.25 (steady state exists only for gamma > 1/2),
    # so a large release rate drives the iterate out of the table
    table = build_param_table(WalkConfig(1), (6,), (6,), [0.25, 0.5, 0.75, 1.0], convention=EXEMPT)
    spec = ReceptorSpec(1.0, (6,))
    ok = solve_fixed_point(1e-2, spec, table, WalkConfig(1).D, 1)
    assert ok.converged and ok.q > 0.9
    with pytest.raises(TableDomainError):
        solve_fixed_point(10.0, spec, table, WalkConfig(1).D, 1)


def test_sweep_matches_single_solves_and_reports_failures():
    table = synthetic_table(q=(0.5, 0.75, 1.0), alpha=(1.5, 1.35, 1.2))
    specs = [ReceptorSpec(T, SITE) for T in (0.5, 2.0)]
    Qs = [0.1, 1.0, 1e4]
    out = sweep_queue(Qs, specs, table, CFG3.D, 3)
    assert len(out) == 6
    for k, (spec, Q) in enumerate([(s, Q) for s in specs for Q in Qs]):
        if isinstance(out[k], Exception):
            assert isinstance(out[k], TableDomainError) and Q == 1e4
        else:
            assert out[k] == solve_fixed_point(Q, spec, table, CFG3.D, 3)
    both = sweep_queue([1.0], [ReceptorSpec(1.0, SITE)], {SITE: table}, CFG3.D, 3)
    assert both[0] == solve_fixed_point(1.0, ReceptorSpec(1.0, SITE), table, CFG3.D, 3)


def test_sorted_sweep_is_monotone():
    table = synthetic_table()
    for T in (0.5, 1.0, 2.0):
        out = sweep_queue(np.logspace(-2, 4, 25), [ReceptorSpec(T, SITE)], table, CFG3.D, 3)
        q = np.array([s.q for s in out])
        la = np.array([s.lambda_a for s in out])
        assert np.all(np.diff(q) <= 0) and np.all(np.diff(la) >= 0)
        assert la[-1] <= 1 / T * (1 + 1e-8)
