from __future__ import annotations

import numpy as np
import pytest

from mfbsde import (
    CoefficientSet,
    GridSpec,
    GrowthSpec,
    brownian_increments,
    builtin_problem,
    mollify_coefficients,
    reconstruct_yz,
    simulate_forward,
    simulate_malliavin,
    solve_decoupling_field,
)
from mfbsde.verify import (
    applicable_claims,
    bsde_residual,
    cauchy_convergence,
    delta_sequence,
    girsanov_law_check,
    gradient_windows,
    ks_critical,
    malliavin_regularity_summary,
    sobolev_flow_check,
    terminal_match,
    terminal_sequence,
    weighted_ks,
)

GRID = GridSpec(L=6.0, Nx=201, Nt=200)


def _field(name, n, grid=GRID, **params):
    coeffs, spec, _ = builtin_problem(name, **params)
    mc = mollify_coefficients(coeffs, spec, n, box_half_width=grid.L)
    return coeffs, spec, mc, solve_decoupling_field(mc, spec, grid)


def _ensemble(name, n, M=2000, N=64, seed=0, dW=None, grid=GRID, **params):
    coeffs, spec, mc, fld = _field(name, n, grid, **params)
    ens = simulate_forward(fld, mc, spec, 0.0, N=N, M=M, seed=seed, dW=dW)
    return coeffs, spec, mc, fld, reconstruct_yz(ens, fld)


def linear_drift(a: float, const: float = 0.0):
    spec = GrowthSpec(d=1, l=1, T=1.0, sigma=[[1.0]], lam=1.0, k1=0.0, k2=0.0, k3=0.0)
    coeffs = CoefficientSet(
        b=lambda t, x, y, z: a * x[:, :1] + const,
        g=lambda t, x, y, z: np.zeros((x.shape[0], 1)),
        h=lambda x: np.zeros((x.shape[0], 1)),
    )
    mc = mollify_coefficients(coeffs, spec, 4, box_half_width=GRID.L)
    return spec, mc, solve_decoupling_field(mc, spec, GRID)


# --- Girsanov ---------------------------------------------------------------


def test_girsanov_zero_drift_is_trivial():
    _, spec, mc, fld = _field("heat", 4)
    rep = girsanov_law_check(mc, fld, spec, 0.0, 0.5, 500, seed=0, N=32)
    assert rep.weight_mean == 1.0 and rep.weight_se == 0.0
    # both sides are the same Brownian sample, so only rounding separates them
    assert all(abs(z) <= 1e-9 for z in rep.z_scores.values())
    assert rep.ks_stat <= 1e-12 and rep.martingale_ok and not rep.unreliable


def test_girsanov_constant_drift():
    spec, mc, fld = linear_drift(0.0, const=0.5)
    rep = girsanov_law_check(mc, fld, spec, 0.0, 0.5, 5000, seed=1, N=32)
    assert rep.max_abs_z <= 4 and rep.ks_ok and rep.martingale_ok


@pytest.mark.filterwarnings("ignore:.*left the PDE box")
def test_girsanov_flags_degenerate_weights():
    spec, mc, fld = linear_drift(0.0, const=8.0)
    rep = girsanov_law_check(mc, fld, spec, 0.0, 1.0, 500, seed=1, N=32)
    assert rep.ess < 100 and rep.unreliable


def test_weighted_ks_basics():
    x = np.linspace(0, 1, 101)
    assert weighted_ks(x, np.ones_like(x), x) <= 1e-12
    assert weighted_ks(x, np.ones_like(x), x + 10.0) == pytest.approx(1.0, abs=1e-12)
    assert ks_critical(1000, 1000) == pytest.approx(np.sqrt(-0.5 * np.log(5e-4)) * np.sqrt(2e-3))


# --- backward equation -------------------------------------------------------


def test_residual_and_terminal_zero_for_constant_field():
    coeffs, spec, mc, fld, ens = _ensemble("linear-ode", 4, M=200, lam=0.0, c=0.6)
    assert bsde_residual(ens, mc) <= 1e-12
    assert terminal_match(ens, coeffs.h) <= 1e-12


def test_residual_linear_ode():
    coeffs, spec, mc, fld, ens = _ensemble("linear-ode", 4, M=2000, N=256)
    assert bsde_residual(ens, mc) <= 3e-2


def test_residual_requires_yz():
    _, spec, mc, fld = _field("heat", 4)
    ens = simulate_forward(fld, mc, spec, 0.0, N=8, M=10, seed=0)
    with pytest.raises(ValueError):
        bsde_residual(ens, mc)


def test_coupled_lip_terminal_interpolation_bound():
    coeffs, spec, mc, fld, ens = _ensemble("coupled-lip", 16, grid=GridSpec())
    assert terminal_match(ens, coeffs.h) <= 2 * spec.k3 * GridSpec().dx


def test_terminal_and_delta_sequences_decrease():
    coeffs, spec, _ = builtin_problem("sign-drift")
    dW = brownian_increments(3, 4000, 128, 1, spec.T / 128)
    ensembles = {n: _ensemble("sign-drift", n, M=4000, N=128, seed=3, dW=dW)[4] for n in (4, 16)}
    seq = terminal_sequence(ensembles, coeffs.h)
    assert seq[16] < seq[4]
    ds = delta_sequence(ensembles[16], coeffs.h, [0.2, 0.1, 0.05, 0.025])
    vals = list(ds.values())
    assert all(a > b for a, b in zip(vals, vals[1:]))


# --- Cauchy ------------------------------------------------------------------


def test_cauchy_identical_smooth_levels():
    coeffs, spec, _ = builtin_problem("linear-ode")
    dW = brownian_increments(0, 500, 64, 1, spec.T / 64)
    levels = []
    for n in (16, 32):
        _, _, mc, fld, ens = _ensemble("linear-ode", n, M=500, dW=dW)
        levels.append((n, fld, ens))
    rep = cauchy_convergence(levels, 0.05, [0.5])
    for metric in rep.metrics().values():
        assert all(v <= 1e-6 for v in metric.values())


def test_cauchy_rejects_unshared_seeds():
    a = _ensemble("sign-drift", 4, M=100, seed=0)
    b = _ensemble("sign-drift", 8, M=100, seed=1)
    with pytest.raises(ValueError, match="Brownian"):
        cauchy_convergence([(4, a[3], a[4]), (8, b[3], b[4])], 0.05, [0.5])


def test_cauchy_rejects_mismatched_grids():
    _, _, _, f1 = _field("heat", 4)
    _, _, _, f2 = _field("heat", 8, GridSpec(Nx=101, Nt=50))
    with pytest.raises(ValueError, match="grid"):
        cauchy_convergence([(4, f1, None), (8, f2, None)], 0.05)


def test_cauchy_sign_drift_strong_gap_shrinks():
    coeffs, spec, _ = builtin_problem("sign-drift")
    dW = brownian_increments(1, 3000, 128, 1, spec.T / 128)
    levels = [(n,) + _ensemble("sign-drift", n, M=3000, N=128, seed=1, dW=dW, grid=GridSpec())[3:] for n in (4, 8, 16, 32)]
    rep = cauchy_convergence(levels, 0.05, [0.5])
    assert rep.X_L2[16][0.5] < rep.X_L2[4][0.5]
    assert rep.Y_H2[16] < rep.Y_H2[4]


def test_gradient_windows_overlap():
    _, _, _, fld = _field("sign-drift", 8)
    win = gradient_windows(fld, [0.2, 0.1])
    k = win[0.2].shape[0]
    assert win[0.1].shape[0] > k
    assert np.array_equal(win[0.1][:k], win[0.2])


# --- regularity --------------------------------------------------------------


def test_flow_identity_for_zero_drift():
    _, spec, mc, fld = _field("heat", 4)
    rep = sobolev_flow_check(mc, fld, spec, 0.0, 1.0, np.linspace(-2, 2, 5), 0.15, 50, seed=0)
    assert np.allclose(rep.flow_derivative, 1.0, atol=1e-12)


def test_flow_linear_drift_oracle():
    a = 0.5
    spec, mc, fld = linear_drift(a)
    N = 64
    rep = sobolev_flow_check(mc, fld, spec, 0.0, 1.0, np.linspace(-1, 1, 5), 0.15, 50, seed=0, N=N, check_y=False)
    rel = np.abs(rep.flow_derivative / np.exp(a) - 1)
    assert np.all(rel <= 2 * a / N)
    assert rep.y_norm is None


def test_flow_input_validation():
    _, spec, mc, fld = _field("heat", 4)
    with pytest.raises(ValueError, match="twice the grid"):
        sobolev_flow_check(mc, fld, spec, 0.0, 1.0, [0.0, 0.5], 0.01, 10, seed=0)
    with pytest.raises(ValueError, match="box"):
        sobolev_flow_check(mc, fld, spec, 0.0, 1.0, [0.0, 5.95], 0.15, 10, seed=0)


def test_claims_follow_flags():
    assert applicable_claims(builtin_problem("sign-drift")[0]) == {"X": "all t", "Y": "[0, T - delta]", "Z": None}
    assert applicable_claims(builtin_problem("coupled-lip")[0]) == {"X": "all t", "Y": "all t", "Z": "all t"}


def test_malliavin_summary_tables():
    out = {}
    for name in ("heat", "sign-drift"):
        coeffs, spec, mc, fld, ens = _ensemble(name, 8, M=200, N=32)
        mall = simulate_malliavin(ens, mc, fld, np.linspace(0, 1, 5))
        out[name] = malliavin_regularity_summary({8: mall}, coeffs, {8: fld}, {8: ens}, delta=0.1)
    heat = out["heat"]
    assert heat.x_table[8] == pytest.approx(1.0)
    assert 8 in heat.z_table and np.isfinite(heat.z_table[8])
    sd = out["sign-drift"]
    assert np.isfinite(sd.y_table[8]) and sd.z_table == {}
    assert sd.to_dict()["claims"]["Z"] is None
