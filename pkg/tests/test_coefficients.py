from __future__ import annotations

import math

import numpy as np
import pytest

from mfbsde import (
    CoefficientSet,
    GrowthSpec,
    bound_R,
    builtin_problem,
    catalog_names,
    load_problem,
    problem_from_dict,
    validate_growth,
)


def _zero(dim):
    return lambda t, x, y, z: np.zeros((x.shape[0], dim))


def test_bound_R_matches_closed_form():
    spec = GrowthSpec(d=1, l=1, T=2.0, sigma=[[1.0]], lam=1.0, k1=0.0, k2=0.5, k3=3.0)
    assert bound_R(spec) == pytest.approx(3.0 * math.exp(1.0))
    assert spec.R == bound_R(spec)


def test_linear_ode_R_is_c_exp_lambda_T():
    _, spec, _ = builtin_problem("linear-ode", lam=0.7, c=2.0, T=1.5)
    assert spec.R == pytest.approx(2.0 * math.exp(0.7 * 1.5))


def test_growth_spec_rejects_degenerate_sigma():
    with pytest.raises(ValueError):
        GrowthSpec(d=1, l=1, T=1.0, sigma=[[0.5]], lam=1.0, k1=0, k2=0, k3=1)


def test_growth_spec_rejects_large_dimension():
    with pytest.raises(ValueError):
        GrowthSpec(d=3, l=1, T=1.0, sigma=np.eye(3), lam=1.0, k1=0, k2=0, k3=1)


def test_catalog_problems_validate():
    for name in catalog_names():
        coeffs, spec, _ = builtin_problem(name)
        rep = validate_growth(coeffs, spec, budget=512)
        assert rep.passed, (name, rep.ratios)
        assert all(r <= 1 + 1e-9 for r in rep.ratios.values())


def test_unknown_problem_lists_names():
    with pytest.raises(KeyError, match="heat"):
        builtin_problem("no-such-problem")


def test_validate_growth_flags_violation():
    spec = GrowthSpec(d=1, l=1, T=1.0, sigma=[[1.0]], lam=1.0, k1=1.0, k2=0.0, k3=1.0)
    coeffs = CoefficientSet(
        b=lambda t, x, y, z: 5.0 * np.ones((x.shape[0], 1)),
        g=_zero(1),
        h=lambda x: np.zeros((x.shape[0], 1)),
        flag_b1=True,
    )
    rep = validate_growth(coeffs, spec, budget=256)
    assert not rep.passed
    assert rep.ratios["b"] > 1
    assert "b" in rep.witnesses


def test_flags_summary():
    coeffs, _, _ = builtin_problem("sign-drift")
    assert coeffs.flags() == {"B1": True, "B2": False, "A5": True, "A6": True}
    assert coeffs.admissible


def test_heat_oracle_at_terminal_time_is_h():
    _, spec, oracle = builtin_problem("heat")
    x = np.linspace(-2, 2, 7)
    assert np.allclose(oracle.v_exact(spec.T, x)[:, 0], np.tanh(x))


def test_heat_oracle_is_odd_and_bounded():
    _, _, oracle = builtin_problem("heat")
    x = np.linspace(-3, 3, 13)
    v = oracle.v_exact(0.0, x)[:, 0]
    assert np.allclose(v, -v[::-1], atol=1e-12)
    assert np.all(np.abs(v) < 1)


def test_piecewise_constant_is_right_continuous():
    cfg = {
        "d": 1, "l": 1, "T": 1.0, "sigma": [[1.0]], "k1": 1, "k2": 0, "k3": 1,
        "b": {"family": "piecewise-constant", "breakpoints": [0.0], "values": [-1.0, 1.0]},
        "h": {"family": "piecewise-constant", "breakpoints": [0.0], "values": [0.0, 1.0]},
        "flags": {"b1": True},
    }
    coeffs, spec, _ = problem_from_dict(cfg)
    x = np.array([[-1e-9], [0.0], [1e-9]])
    assert coeffs.h(x)[:, 0].tolist() == [0.0, 1.0, 1.0]
    assert coeffs.rough_args == {"b": ("x",), "h": ("x",)}


def test_polynomial_family_and_yaml(tmp_path):
    path = tmp_path / "p.yaml"
    path.write_text(
        "problem:\n"
        "  d: 1\n  l: 1\n  T: 1.0\n  sigma: [[1.0]]\n  k1: 0\n  k2: 1\n  k3: 1\n"
        "  g: {family: polynomial, variable: y, coefficients: [0.0, -0.5]}\n"
        "  h: {family: polynomial, coefficients: [0.5]}\n"
        "  flags: {b1: true, b2: true, a5: true, a6: true}\n"
    )
    coeffs, spec, _ = load_problem(path)
    y = np.array([[2.0]])
    assert coeffs.g(0.0, np.zeros((1, 1)), y, np.zeros((1, 1, 1)))[0, 0] == pytest.approx(-1.0)
    assert coeffs.flags()["B2"]


def test_problem_config_missing_key():
    with pytest.raises(KeyError, match="k3"):
        problem_from_dict({"d": 1, "l": 1, "T": 1.0, "sigma": [[1.0]], "k1": 0, "k2": 0})


@pytest.mark.parametrize("k3,k2,expected", [(2.0, 0.0, 2.0), (0.0, 5.0, 0.0), (1.0, 1.0, math.e)])
def test_bound_R_examples(k3, k2, expected):
    spec = GrowthSpec(d=1, l=1, T=1.0, sigma=[[1.0]], lam=1.0, k1=0, k2=k2, k3=k3)
    assert bound_R(spec) == pytest.approx(expected, rel=1e-15)


def _terminal_only(h, k3=1.0):
    spec = GrowthSpec(d=1, l=1, T=1.0, sigma=[[1.0]], lam=1.0, k1=0.5, k2=0.5, k3=k3)
    coeffs = CoefficientSet(b=_zero(1), g=_zero(1), h=h, flag_b1=True)
    return coeffs, spec


def test_validate_zero_coefficients():
    rep = validate_growth(*_terminal_only(lambda x: np.zeros((x.shape[0], 1))), budget=256)
    assert rep.passed and all(r == 0.0 for r in rep.ratios.values())


def test_validate_sign_terminal_passes_and_double_fails():
    ok = validate_growth(*_terminal_only(lambda x: np.sign(x[:, :1])), budget=256)
    assert ok.passed
    bad = validate_growth(*_terminal_only(lambda x: 2 * np.sign(x[:, :1])), budget=256)
    assert not bad.passed and bad.ratios["h"] == pytest.approx(2.0)


def test_catalog_closed_form_values():
    _, _, lin = builtin_problem("linear-ode")
    assert lin.v_exact(0.0, [0.0])[0, 0] == pytest.approx(math.exp(-1.0), rel=1e-15)
    _, _, heat = builtin_problem("heat")
    assert heat.v_exact(1.0, [0.3])[0, 0] == pytest.approx(math.tanh(0.3), rel=1e-15)
    coeffs, spec, _ = builtin_problem("sign-drift")
    assert (spec.k1, spec.k2, spec.k3) == (1.0, 0.0, 1.0)
