from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfbsde import (
    DecouplingField,
    GridSpec,
    builtin_problem,
    check_apriori,
    gradient,
    mollify_coefficients,
    solve_decoupling_field,
)
from mfbsde.pde import hessian_norm


def _field(name, n, grid=GridSpec(), **params):
    coeffs, spec, oracle = builtin_problem(name, **params)
    mc = mollify_coefficients(coeffs, spec, n, box_half_width=grid.L)
    return spec, oracle, mc, solve_decoupling_field(mc, spec, grid)


def _synthetic(grid, values):
    v = np.broadcast_to(values[None, :, None], (grid.Nt + 1, grid.Nx, 1)).copy()
    return DecouplingField(grid, 1.0, np.eye(1), v, np.zeros(v.shape + (1,)))


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(Nx=400)
    with pytest.raises(ValueError):
        GridSpec(delta_list=(0.1, 0.2))
    g = GridSpec(L=6, Nx=401)
    assert g.dx == pytest.approx(0.03)
    assert g.nodes(2).shape == (401 * 401, 2)


def test_constant_terminal_gives_constant_field():
    spec, _, _, fld = _field("linear-ode", 4, GridSpec(Nx=101, Nt=50), lam=0.0, c=0.7)
    assert np.max(np.abs(fld.v - 0.7)) <= 1e-12
    rep = check_apriori(fld, spec)
    assert rep.sup_v == pytest.approx(0.7, abs=1e-12)
    assert all(g <= 1e-12 for g in rep.grad_bound_per_delta.values())
    assert all(s <= 1e-20 for s in rep.sobolev_local.values())


def test_linear_ode_value_at_zero():
    _, oracle, _, fld = _field("linear-ode", 8)
    assert np.max(np.abs(fld.v[0, :, 0] - np.exp(-1.0))) <= 2e-3


def test_heat_oracle_error():
    _, oracle, _, fld = _field("heat", 64)
    err = np.max(np.abs(fld.v[0, :, 0] - oracle.v_exact(0.0, fld.grid.axis)[:, 0]))
    assert err <= 1e-2


def test_heat_refinement_reduces_error():
    errs = []
    for Nx, Nt in ((101, 25), (201, 50)):
        _, oracle, _, fld = _field("heat", 64, GridSpec(Nx=Nx, Nt=Nt))
        errs.append(np.max(np.abs(fld.v[0, :, 0] - oracle.v_exact(0.0, fld.grid.axis)[:, 0])))
    assert errs[0] / errs[1] >= 1.5


def test_heat_gradient_bound_survives_to_terminal_time():
    spec, _, _, fld = _field("heat", 32)
    assert check_apriori(fld, spec).grad_bound_per_delta[0.0] <= 1 + 5e-2


def test_terminal_layer_is_exact():
    _, _, mc, fld = _field("sign-drift", 8, GridSpec(Nx=201, Nt=40))
    assert np.array_equal(fld.v[-1], mc.h(fld.nodes))


def test_max_principle_all_catalog():
    from mfbsde import catalog_names

    for name in catalog_names():
        spec, _, _, fld = _field(name, 8, GridSpec(Nx=201, Nt=100))
        assert np.max(np.abs(fld.v)) <= spec.R * (1 + 1e-6), name


def test_gradient_exact_on_linear_and_quadratic():
    g = GridSpec(L=2.0, Nx=41, Nt=2)
    x = g.axis
    lin = _synthetic(g, x.copy())
    assert np.allclose(gradient(lin)[:, 1:-1, 0, 0], 1.0, atol=1e-12)
    quad = _synthetic(g, x**2)
    assert np.allclose(gradient(quad)[:, 1:-1, 0, 0], 2 * x[1:-1], atol=1e-12)


def test_hessian_of_quadratic():
    g = GridSpec(L=2.0, Nx=41, Nt=2)
    h = hessian_norm((g.axis**2)[:, None], 1, g.Nx, g.dx)
    assert np.allclose(h[2:-2], 2.0, atol=1e-10)


def test_interpolation_is_exact_at_nodes_and_clamped_outside():
    g = GridSpec(L=2.0, Nx=41, Nt=2)
    fld = _synthetic(g, g.axis**2)
    gradient(fld)
    v, _ = fld.interpolate(0.0, g.axis[:, None])
    assert np.allclose(v[:, 0], g.axis**2)
    v_out, _ = fld.interpolate(0.0, np.array([[5.0], [-5.0]]))
    assert np.allclose(v_out[:, 0], 4.0)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_interpolation_reproduces_affine_fields(a, b):
    g = GridSpec(L=2.0, Nx=21, Nt=2)
    fld = _synthetic(g, a * g.axis + b)
    x = np.linspace(-1.9, 1.9, 17)[:, None]
    v, _ = fld.interpolate(0.5, x)
    assert np.allclose(v[:, 0], a * x[:, 0] + b, atol=1e-12)


def test_sign_drift_gradient_dichotomy():
    spec, _, _, fld = _field("sign-drift", 16)
    rep = check_apriori(fld, spec)
    assert rep.grad_bound_per_delta[0.1] < 3.0
    assert rep.grad_bound_per_delta[0.0] > 3 * rep.grad_bound_per_delta[0.1]


def test_apriori_report_serialises():
    spec, _, _, fld = _field("coupled-lip", 8, GridSpec(Nx=201, Nt=50))
    d = check_apriori(fld, spec).to_dict()
    assert set(d) == {"sup_v", "R", "grad_bound_per_delta", "holder_fit", "sobolev_local", "p", "box"}
    assert 0 < d["holder_fit"]["alpha"] <= 2


def test_apriori_rejects_small_p():
    spec, _, _, fld = _field("heat", 4, GridSpec(Nx=101, Nt=10))
    with pytest.raises(ValueError):
        check_apriori(fld, spec, p=1.5)


def test_field_csv_roundtrip(tmp_path):
    _, _, _, fld = _field("heat", 4, GridSpec(Nx=21, Nt=10))
    path = tmp_path / "f.csv"
    fld.to_csv(path, stride=3)
    header = path.read_text().splitlines()[0]
    assert header == "t,x1,v1,w1_1"
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    # layers 0, 3, 6, 9 plus the terminal layer
    assert data.shape == (5 * 21, 4)
    assert np.array_equal(data[-21:, 2], fld.v[-1, :, 0])


def test_two_dimensional_heat_is_bounded():
    from mfbsde import CoefficientSet, GrowthSpec

    spec = GrowthSpec(d=2, l=1, T=0.5, sigma=np.eye(2), lam=1.0, k1=0, k2=0, k3=1)
    zero = lambda t, x, y, z: np.zeros((x.shape[0], 1))  # noqa: E731
    coeffs = CoefficientSet(
        b=lambda t, x, y, z: np.zeros((x.shape[0], 2)),
        g=zero,
        h=lambda x: np.tanh(x[:, :1] + x[:, 1:2]),
        flag_b1=True,
        flag_b2=True,
    )
    mc = mollify_coefficients(coeffs, spec, 4)
    fld = solve_decoupling_field(mc, spec, GridSpec(L=4, Nx=41, Nt=20))
    assert np.max(np.abs(fld.v)) <= 1.0
    # symmetric under x1 <-> x2
    cube = fld.v[0, :, 0].reshape(41, 41)
    assert np.allclose(cube, cube.T, atol=1e-12)
