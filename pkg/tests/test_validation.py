import math

import numpy as np
import pytest

from sidemc.errors import ConfigurationError
from sidemc.solver import estimate_solution
from sidemc.validation import (OracleProblem, burkholder_check, compound_poisson_oracle, convergence_study,
                               generator_defect, heat_oracle, oracle_suite, poisson_moment, poisson_series,
                               positivity_suite, run_oracle, sin_drift_oracle, stirling2, transport_oracle)


@pytest.mark.parametrize("build", [transport_oracle, heat_oracle, compound_poisson_oracle, sin_drift_oracle,
                                   lambda: transport_oracle(c=0.5)])
def test_closed_forms_pass_generator_audit(build):
    assert build().audit_defect <= 1e-4


def test_wrong_closed_form_is_rejected():
    good = heat_oracle()
    with pytest.raises(ConfigurationError):
        # the heat kernel with the wrong variance does not solve the equation
        OracleProblem("bad", good.spec, lambda t, X: (1 + 2 * t) ** -0.5 * np.exp(-X**2 / (2 * (1 + 2 * t))),
                      ("abs", 1.0), np.zeros(1), 0.5)


def test_generator_defect_detects_a_sign_error():
    o = transport_oracle()
    assert generator_defect(o.spec, lambda t, X: np.sin(X - t)) > 0.5


def test_poisson_series_small_rate_expansion():
    x = np.linspace(-1, 1, 5)
    lam = 1e-3
    expected = math.exp(-lam) * sum(lam**n / math.factorial(n) * np.sin(x + 0.3 * n) for n in range(8))
    np.testing.assert_allclose(poisson_series(np.sin, x, lam, 0.3), expected, atol=1e-10)


def test_oracle_suite_has_three_problems():
    assert [o.name for o in oracle_suite(1000, 1000)] == ["transport", "latent-heat", "compound-poisson"]


def test_transport_oracle_run():
    rep = run_oracle(transport_oracle())
    assert rep.passed and rep.sup_error <= 1e-3


def test_small_heat_oracle_run():
    rep = run_oracle(heat_oracle(samples=4000, points=21))
    assert rep.passed


def test_sin_drift_order_against_closed_form():
    table = convergence_study(sin_drift_oracle(), [0.04, 0.02, 0.01, 0.005], [1, 2, 4])
    assert table.dt_order >= 0.9
    assert table.to_csv().startswith("dt,samples,error,stderr\n")


def test_sin_drift_order_against_fine_reference():
    o = sin_drift_oracle()
    q = o.queries
    ref = estimate_solution(o.spec, 1.0, q, M_inner=1, n_steps=20_000).estimate
    dts = [0.04, 0.02, 0.01, 0.005]
    errs = [np.max(np.abs(estimate_solution(o.spec, 1.0, q, M_inner=1, n_steps=int(round(1 / dt))).estimate - ref))
            for dt in dts]
    assert np.polyfit(np.log(dts), np.log(errs), 1)[0] >= 0.9


def test_stirling_and_touchard():
    assert [stirling2(4, k) for k in range(5)] == [0, 1, 7, 6, 1]
    assert poisson_moment(2, 3.0) == 12.0
    assert poisson_moment(3, 1.0) == 5.0


def test_burkholder_worked_values():
    rep = burkholder_check(2, 3.0, 1.0)
    assert (rep.moment, rep.lower, rep.upper) == (12.0, 3.0, 48.0)


@pytest.mark.parametrize("p", [2, 3, 4])
@pytest.mark.parametrize("mean", [0.5, 1.0, 3.0])
def test_burkholder_lattice(p, mean):
    assert burkholder_check(p, mean, 1.0).passed


def test_burkholder_monte_carlo_moment():
    rep = burkholder_check(3, 1.0, 1.0, n_mc=1_000_000, seed=1)
    assert abs(rep.mc_moment - 5.0) <= 5 * rep.mc_stderr


@pytest.mark.parametrize("clause", [1, 2])
def test_positivity_specs_meet_their_bounds(clause):
    for spec, sol, rep in positivity_suite(clause, count=2, M_inner=200, n_steps=10):
        if clause == 1:
            assert rep.lower_hypotheses
            assert sol.estimate.min() >= -3 * sol.stderr.max()
        else:
            assert rep.upper_hypotheses
            assert sol.estimate.max() <= 1 + 3 * sol.stderr.max()
