"""Checks that a constructed triple ``(X, Y, Z)`` behaves like an FBSDE solution.

Each check is a pure function of its inputs and returns a report object
with a ``to_dict`` method for JSON export.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from mfbsde.coefficients import CoefficientSet, GrowthSpec
from mfbsde.mollifier import MollifiedCoefficients
from mfbsde.pde import DecouplingField, _central
from mfbsde.simulate import (
    MalliavinEnsemble,
    PathEnsemble,
    brownian_increments,
    simulate_forward,
)

KS_ALPHA = 1e-3
MIN_ESS = 100.0


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


# ---------------------------------------------------------------------------
# Girsanov


@dataclass
class GirsanovReport:
    t: float
    M: int
    weighted_moments: dict
    direct_moments: dict
    z_scores: dict
    ess: float
    weight_mean: float
    weight_se: float
    ks_stat: Optional[float] = None
    ks_crit: Optional[float] = None
    unreliable: bool = False

    @property
    def martingale_ok(self) -> bool:
        if self.weight_se == 0:
            return abs(self.weight_mean - 1.0) < 1e-12
        return abs(self.weight_mean - 1.0) <= 5 * self.weight_se

    @property
    def max_abs_z(self) -> float:
        return max(abs(z) for z in self.z_scores.values())

    @property
    def ks_ok(self) -> Optional[bool]:
        if self.ks_stat is None:
            return None
        return self.ks_stat < self.ks_crit

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "t": self.t,
                "M": self.M,
                "weighted_moments": self.weighted_moments,
                "direct_moments": self.direct_moments,
                "z_scores": self.z_scores,
                "ess": self.ess,
                "weight_mean": self.weight_mean,
                "weight_se": self.weight_se,
                "martingale_ok": self.martingale_ok,
                "ks_stat": self.ks_stat,
                "ks_crit": self.ks_crit,
                "unreliable": self.unreliable,
            }
        )


def _weighted_mean_se(values: np.ndarray, w: np.ndarray):
    total = w.sum()
    mu = float(np.dot(w, values) / total)
    se = float(np.sqrt(np.sum(w**2 * (values - mu) ** 2)) / total)
    return mu, se


def weighted_ks(sample_w: np.ndarray, weights: np.ndarray, sample: np.ndarray) -> float:
    """Sup distance between a weighted and an unweighted empirical CDF."""
    order = np.argsort(sample_w, kind="stable")
    xs, ws = sample_w[order], weights[order] / weights.sum()
    cdf_w = np.cumsum(ws)
    ys = np.sort(sample)
    pts = np.concatenate([xs, ys])
    fw = np.concatenate([[0.0], cdf_w])[np.searchsorted(xs, pts, side="right")]
    fu = np.searchsorted(ys, pts, side="right") / ys.size
    return float(np.max(np.abs(fw - fu)))


def ks_critical(n_eff: float, m: int, alpha: float = KS_ALPHA) -> float:
    """Asymptotic two-sample KS critical value at level ``alpha``."""
    return math.sqrt(-0.5 * math.log(alpha / 2)) * math.sqrt((n_eff + m) / (n_eff * m))


def girsanov_law_check(
    mc: MollifiedCoefficients,
    field: DecouplingField,
    spec: GrowthSpec,
    x0,
    t: float,
    M: int,
    seed: int,
    N: int = 256,
) -> GirsanovReport:
    """Compare ``X^n_t`` with ``x0 + sigma W_t`` reweighted by the stochastic exponential.

    Both sides use the same increments.  The weight is the discrete
    exponential of ``sum u . dW - 1/2 sum |u|^2 dt`` with
    ``u = sigma^T (sigma sigma^T)^{-1} b~_n(t_i, B_i)``, which is exactly the
    likelihood ratio turning the driftless chain into the Euler chain.
    Moment z-scores use delta-method standard errors for the self-normalised
    weighted side.
    """
    d = spec.d
    dt = spec.T / N
    dW = brownian_increments(seed, M, N, d, dt)
    ens = simulate_forward(field, mc, spec, x0, 0.0, N, M, seed, dW=dW)
    it = ens.index_of(t)
    sigma = spec.sigma
    proj = sigma.T @ np.linalg.inv(sigma @ sigma.T)
    B = np.empty((M, d))
    B[:] = ens.x0
    logw = np.zeros(M)
    for i in range(it):
        u = field.drift(mc, ens.times[i], B) @ proj.T
        logw += np.sum(u * dW[:, i], axis=1) - 0.5 * np.sum(u * u, axis=1) * dt
        B = B + dW[:, i] @ sigma.T
    w = np.exp(logw)
    X = ens.X[:, it]

    feats = {}
    for c in range(d):
        feats[f"m1_x{c + 1}"] = (B[:, c], X[:, c])
        feats[f"m2_x{c + 1}"] = (B[:, c] ** 2, X[:, c] ** 2)
    if d == 2:
        feats["m2_x1x2"] = (B[:, 0] * B[:, 1], X[:, 0] * X[:, 1])

    weighted, direct, zs = {}, {}, {}
    for name, (fb, fx) in feats.items():
        mw, sew = _weighted_mean_se(fb, w)
        mx, sex = float(fx.mean()), float(fx.std(ddof=1) / math.sqrt(M))
        weighted[name], direct[name] = mw, mx
        den = math.hypot(sew, sex)
        zs[name] = 0.0 if den == 0 else (mw - mx) / den
    ess = float(w.sum() ** 2 / np.sum(w**2))
    ks_stat = ks_crit = None
    if d == 1:
        ks_stat = weighted_ks(B[:, 0], w, X[:, 0])
        ks_crit = ks_critical(ess, M)
    return GirsanovReport(
        t=float(ens.times[it]),
        M=M,
        weighted_moments=weighted,
        direct_moments=direct,
        z_scores=zs,
        ess=ess,
        weight_mean=float(w.mean()),
        weight_se=float(w.std(ddof=1) / math.sqrt(M)),
        ks_stat=ks_stat,
        ks_crit=ks_crit,
        unreliable=ess < MIN_ESS,
    )


# ---------------------------------------------------------------------------
# Backward equation


def bsde_residual(ens: PathEnsemble, driver, delta: float = 0.0) -> float:
    """L2 residual of the backward equation on ``[s, T - delta]``.

    ``(E|Y_s - Y_{T-delta} - sum g_i dt + sum Z_i dW_i|^2)^(1/2)`` with
    left-point sums; ``driver`` is anything with a ``g`` attribute.
    """
    if ens.Y is None or ens.Z is None:
        raise ValueError("ensemble has no Y/Z; call reconstruct_yz first")
    end = ens.index_of(ens.times[-1] - delta)
    dt = ens.dt
    acc = np.zeros_like(ens.Y[:, 0])
    for i in range(end):
        tt = np.full(ens.M, ens.times[i])
        gi = np.asarray(driver.g(tt, ens.X[:, i], ens.Y[:, i], ens.Z[:, i]), dtype=float)
        acc += gi.reshape(acc.shape) * dt - np.einsum("mld,md->ml", ens.Z[:, i], ens.dW[:, i])
    res = ens.Y[:, 0] - ens.Y[:, end] - acc
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def terminal_match(ens: PathEnsemble, h: Callable) -> float:
    """``(E|Y_T - h(X_T)|^2)^(1/2)``."""
    if ens.Y is None:
        raise ValueError("ensemble has no Y; call reconstruct_yz first")
    hv = np.asarray(h(ens.X[:, -1]), dtype=float).reshape(ens.Y[:, -1].shape)
    return float(np.sqrt(np.mean(np.sum((ens.Y[:, -1] - hv) ** 2, axis=1))))


def terminal_sequence(ensembles: Mapping[int, PathEnsemble], h: Callable) -> dict:
    """Terminal mismatch per mollification level, in increasing ``n``."""
    return {n: terminal_match(ensembles[n], h) for n in sorted(ensembles)}


def delta_sequence(ens: PathEnsemble, h: Callable, deltas: Sequence[float]) -> dict:
    """``E|Y_{T - delta} - h(X_T)|^2`` for each offset, as the offsets shrink."""
    hv = np.asarray(h(ens.X[:, -1]), dtype=float).reshape(ens.Y[:, -1].shape)
    out = {}
    for delta in deltas:
        i = ens.index_of(ens.times[-1] - delta)
        out[float(delta)] = float(np.mean(np.sum((ens.Y[:, i] - hv) ** 2, axis=1)))
    return out


# ---------------------------------------------------------------------------
# Convergence across mollification levels


@dataclass
class ConvergenceReport:
    """Gaps between consecutive levels, keyed by the coarser level ``n``."""

    delta: float
    levels: list
    v_sup: dict = field(default_factory=dict)
    grad_sup: dict = field(default_factory=dict)
    X_L2: dict = field(default_factory=dict)
    Y_H2: dict = field(default_factory=dict)
    Z_H2: dict = field(default_factory=dict)
    stoch_int_L2: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        """Flat mapping ``metric name -> {n: gap}``."""
        out = {
            "v_sup": self.v_sup,
            "grad_sup": self.grad_sup,
            "Y_H2": self.Y_H2,
            "Z_H2": self.Z_H2,
            "stoch_int_L2": self.stoch_int_L2,
        }
        if self.X_L2:
            ts = next(iter(self.X_L2.values())).keys()
            for t in ts:
                out[f"X_L2@{t:g}"] = {n: self.X_L2[n][t] for n in self.X_L2}
        return {k: v for k, v in out.items() if v}

    def decreasing(self) -> dict:
        """Whether the finest gap is below the coarsest one, per metric."""
        res = {}
        for name, gaps in self.metrics().items():
            ns = sorted(gaps)
            res[name] = bool(gaps[ns[-1]] < gaps[ns[0]])
        return res

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "delta": self.delta,
                "levels": self.levels,
                "metrics": self.metrics(),
                "decreasing": self.decreasing(),
            }
        )


def cauchy_convergence(
    levels: Sequence[tuple],
    delta: float,
    t_list: Sequence[float] = (),
) -> ConvergenceReport:
    """Consecutive-level gaps for ``v``, ``D_x v``, ``X``, ``Y``, ``Z`` and ``int Z dW``.

    ``levels`` is a sequence of ``(n, field, ensemble)`` in increasing ``n``;
    the ensemble may be ``None`` to compare fields only.  Fields must share a
    grid and ensembles must share their Brownian increments.
    """
    levels = sorted(levels, key=lambda u: u[0])
    if len(levels) < 2:
        raise ValueError("need at least two levels")
    f0 = levels[0][1]
    e0 = levels[0][2]
    for n, f, e in levels[1:]:
        if f.grid != f0.grid or abs(f.T - f0.T) > 1e-12:
            raise ValueError(f"level {n}: decoupling field grid differs from level {levels[0][0]}")
        if (e is None) != (e0 is None):
            raise ValueError("either all levels or none must carry an ensemble")
        if e is not None and (
            e.dW.shape != e0.dW.shape or not np.array_equal(e.dW, e0.dW) or not np.array_equal(e.times, e0.times)
        ):
            raise ValueError(f"level {n}: ensemble does not share Brownian increments (seed) with level {levels[0][0]}")

    rep = ConvergenceReport(delta=float(delta), levels=[int(u[0]) for u in levels])
    T = f0.T
    layers = f0.times <= T - delta + 1e-12
    for (n, fa, ea), (_, fb, eb) in zip(levels, levels[1:]):
        rep.v_sup[n] = float(np.max(np.abs(fa.v[layers] - fb.v[layers])))
        rep.grad_sup[n] = float(np.max(np.abs(fa.w[layers] - fb.w[layers])))
        if ea is None:
            continue
        rep.X_L2[n] = {
            float(t): float(np.sqrt(np.mean(np.sum((ea.X[:, ea.index_of(t)] - eb.X[:, eb.index_of(t)]) ** 2, axis=1))))
            for t in t_list
        }
        if ea.Y is None or eb.Y is None:
            continue
        end = ea.index_of(T - delta)
        dt = ea.dt
        dy = (ea.Y[:, :end] - eb.Y[:, :end]).reshape(ea.M, end, -1)
        dz = (ea.Z[:, :end] - eb.Z[:, :end])
        rep.Y_H2[n] = float(np.sqrt(np.mean(np.sum(dy**2, axis=(1, 2))) * dt))
        rep.Z_H2[n] = float(np.sqrt(np.mean(np.sum(dz.reshape(ea.M, end, -1) ** 2, axis=(1, 2))) * dt))
        integral = np.einsum("mild,mid->ml", dz, ea.dW[:, :end])
        rep.stoch_int_L2[n] = float(np.sqrt(np.mean(np.sum(integral**2, axis=1))))
    return rep


def gradient_windows(field: DecouplingField, deltas: Sequence[float]) -> dict:
    """``D_x v`` restricted to ``[0, T - delta]`` for each offset.

    Gluing these windows gives the piecewise gradient; consecutive windows
    agree on their overlap because they read the same field.
    """
    times = field.times
    return {float(dl): field.w[times <= field.T - dl + 1e-12] for dl in deltas}


# ---------------------------------------------------------------------------
# Regularity


@dataclass
class RegularityReport:
    s: float
    t: float
    x_points: np.ndarray
    bump: float
    p: float
    flow_derivative: np.ndarray
    flow_derivative_mean: np.ndarray
    weighted_norm: float
    y_norm: Optional[float] = None
    malliavin: Optional[dict] = None

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "s": self.s,
                "t": self.t,
                "x_points": self.x_points,
                "bump": self.bump,
                "p": self.p,
                "flow_derivative_mean": self.flow_derivative_mean,
                "weighted_norm": self.weighted_norm,
                "y_norm": self.y_norm,
                "malliavin": self.malliavin,
            }
        )


def gaussian_weight(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.sum(np.asarray(x) ** 2, axis=-1))


def _flow_endpoints(field, mc, starts: np.ndarray, s: float, t: float, N: int, dW: np.ndarray) -> np.ndarray:
    """Euler endpoints ``X^{s, x}_t`` for every start ``x``, all driven by ``dW``."""
    Q, d = starts.shape
    M = dW.shape[0]
    dt = (t - s) / N
    noise = np.tile(dW @ field.sigma.T, (Q, 1, 1))
    X = np.repeat(starts, M, axis=0)
    for i in range(N):
        X = X + field.drift(mc, s + i * dt, X) * dt + noise[:, i]
    return X.reshape(Q, M, d)


def sobolev_flow_check(
    mc: MollifiedCoefficients,
    field: DecouplingField,
    spec: GrowthSpec,
    s: float,
    t: float,
    x_grid: Sequence[float],
    bump: float,
    M: int,
    seed: int,
    rho: Callable = gaussian_weight,
    p: float = 2.0,
    N: int = 64,
    check_y: bool = True,
    u_box: tuple = (-1.0, 1.0),
) -> RegularityReport:
    """Flow derivatives ``dX^{s,x}_t/dx`` by central bumps under common random numbers.

    The weighted norm is the L2(Omega) norm of the discrete
    ``||X||_{L^p(rho)} + sum_j ||d_j X||_{L^p(rho)}`` over the tensor grid.
    With ``check_y`` the analogous ``W^1_1(U)`` norm of ``Y = v(t, X)`` on
    ``U = u_box^d`` is reported; this needs ``l = 1``.
    """
    if check_y and spec.l != 1:
        raise ValueError(f"the Y flow check is only defined for l = 1 (got l = {spec.l})")
    if bump < 2 * field.grid.dx - 1e-15:
        raise ValueError(f"bump {bump} must be at least twice the grid spacing {field.grid.dx}")
    if not 0 <= s < t <= spec.T:
        raise ValueError("need 0 <= s < t <= T")
    d = spec.d
    axis = np.asarray(x_grid, dtype=float)
    if np.any(np.abs(axis) + bump > field.grid.L):
        raise ValueError("x_grid (plus bump) must lie inside the PDE box")
    pts = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), -1).reshape(-1, d)
    K = pts.shape[0]
    h = axis[1] - axis[0] if axis.size > 1 else 1.0
    cell = h**d

    starts = [pts]
    for j in range(d):
        e = np.zeros(d)
        e[j] = bump
        starts += [pts + e, pts - e]
    dW = brownian_increments(seed, M, N, d, (t - s) / N)
    ends = _flow_endpoints(field, mc, np.vstack(starts), s, t, N, dW)
    Xc = ends[:K]
    flow = np.empty((K, M, d, d))
    for j in range(d):
        plus = ends[K * (1 + 2 * j) : K * (2 + 2 * j)]
        minus = ends[K * (2 + 2 * j) : K * (3 + 2 * j)]
        flow[:, :, :, j] = (plus - minus) / (2 * bump)

    weight = rho(pts)[:, None]
    lp = lambda arr: np.sum(arr**p * weight, axis=0) * cell  # noqa: E731
    norm = lp(np.linalg.norm(Xc, axis=-1)) ** (1 / p)
    for j in range(d):
        norm = norm + lp(np.linalg.norm(flow[:, :, :, j], axis=-1)) ** (1 / p)
    weighted = float(np.sqrt(np.mean(norm**2)))

    y_norm = None
    if check_y:
        inside = np.all((pts >= u_box[0]) & (pts <= u_box[1]), axis=1)
        yv = lambda X: field.interpolate(t, X.reshape(-1, d))[0].reshape(X.shape[0], M)  # noqa: E731
        Yc = yv(Xc[inside])
        total = np.abs(Yc)
        for j in range(d):
            plus = ends[K * (1 + 2 * j) : K * (2 + 2 * j)][inside]
            minus = ends[K * (2 + 2 * j) : K * (3 + 2 * j)][inside]
            total = total + np.abs(yv(plus) - yv(minus)) / (2 * bump)
        per_path = np.sum(total, axis=0) * cell
        y_norm = float(np.sqrt(np.mean(per_path**2)))

    return RegularityReport(
        s=float(s),
        t=float(t),
        x_points=pts,
        bump=float(bump),
        p=float(p),
        flow_derivative=flow,
        flow_derivative_mean=flow.mean(axis=1),
        weighted_norm=weighted,
        y_norm=y_norm,
    )


def _hessian_at(field: DecouplingField, k: int, x: np.ndarray) -> np.ndarray:
    """``D_x w`` at layer ``k`` interpolated at ``x``; shape ``(P, l, d, d)``."""
    g = field.grid
    P = field.w.shape[1]
    flat = field.w[k].reshape(P, -1)
    hess = _central(flat, field.d, g.Nx, g.dx)  # (P, l*d, d)
    corners = field._weights(x)
    out = sum(wt[:, None, None] * hess[idx] for idx, wt in corners)
    return out.reshape(x.shape[0], field.l, field.d, field.d)


@dataclass
class MalliavinSummary:
    claims: dict
    x_table: dict
    y_table: dict
    z_table: dict
    delta: float

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "claims": self.claims,
                "x_table": self.x_table,
                "y_table": self.y_table,
                "z_table": self.z_table,
                "delta": self.delta,
            }
        )


def applicable_claims(coeffs: CoefficientSet) -> dict:
    """Which of ``X``, ``Y``, ``Z`` are claimed Malliavin differentiable, and where."""
    claims = {"X": None, "Y": None, "Z": None}
    if coeffs.flag_b1 or coeffs.flag_b2:
        claims["X"] = "all t"
    if coeffs.flag_b2:
        claims["Y"] = "all t"
    elif coeffs.flag_b1:
        claims["Y"] = "[0, T - delta]"
    if coeffs.flag_b2 and (coeffs.flag_g_no_z or coeffs.flag_g_no_x):
        claims["Z"] = "all t"
    return claims


def malliavin_regularity_summary(
    malls: Mapping[int, MalliavinEnsemble],
    coeffs: CoefficientSet,
    fields: Mapping[int, DecouplingField],
    ensembles: Mapping[int, PathEnsemble],
    delta: float = 0.1,
) -> MalliavinSummary:
    """Tabulate ``sup E|D X|^2`` per level plus the chain-rule tables for ``Y`` and ``Z``.

    ``D_t Y_r = D_x v(r, X_r) D_t X_r`` and
    ``D_t Z_r = D_x(w sigma)(r, X_r) D_t X_r``; each table is only filled on
    the time window where the corresponding claim applies.  ``Y`` and ``Z``
    tables hold ``sup`` over ``(t, r)`` of the second moment.
    """
    claims = applicable_claims(coeffs)
    x_table, y_table, z_table = {}, {}, {}
    for n in sorted(malls):
        mall, fld, ens = malls[n], fields[n], ensembles[n]
        x_table[n] = mall.sup_second_moment()
        T = fld.T
        if claims["Y"] is None:
            continue
        limit = T if claims["Y"] == "all t" else T - delta
        idx = [i for i, t in enumerate(ens.times) if t <= limit + 1e-12]
        best_y, best_z = 0.0, 0.0
        for i in idx:
            X = ens.X[:, i]
            _, w = fld.interpolate(ens.times[i], X)  # (M, l, d)
            Dx = mall.D[:, :, i]  # (M, Ns, d, d)
            dy = np.einsum("mld,mjdc->mjlc", w, Dx)
            best_y = max(best_y, float(np.max(np.mean(np.sum(dy.reshape(*dy.shape[:2], -1) ** 2, -1), 0))))
            if claims["Z"] is not None:
                H = _hessian_at(fld, fld.layer_index(ens.times[i]), X)  # (M, l, d_w, d_x)
                dz = np.einsum("majk,jb,mskc->msabc", H, fld.sigma, Dx)
                best_z = max(best_z, float(np.max(np.mean(np.sum(dz.reshape(*dz.shape[:2], -1) ** 2, -1), 0))))
        y_table[n] = best_y
        if claims["Z"] is not None:
            z_table[n] = best_z
    return MalliavinSummary(claims, x_table, y_table, z_table, float(delta))
