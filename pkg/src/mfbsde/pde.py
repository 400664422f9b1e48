"""Backward IMEX solver for the quasilinear decoupling-field PDE.

Solves

    d_t v + b_n(t, x, v, D_x v sigma) . D_x v + 1/2 tr(sigma sigma^T D_xx v)
          + g_n(t, x, v, D_x v sigma) = 0,      v(T, .) = h_n

on the box ``[-L, L]^d`` with homogeneous Neumann conditions.  Diffusion is
implicit (one prefactorised sparse solve per layer for all components);
transport and source are explicit, lagged from the later layer.  Transport
uses upwind differences so each layer is a convex combination of the
previous one under the CFL restriction, which keeps the discrete maximum
principle.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from mfbsde.coefficients import GrowthSpec
from mfbsde.mollifier import MollifiedCoefficients

log = logging.getLogger(__name__)

DEFAULT_DELTAS = (0.2, 0.1, 0.05, 0.025)


@dataclass(frozen=True)
class GridSpec:
    L: float = 6.0
    Nx: int = 401
    Nt: int = 200
    delta_list: tuple = DEFAULT_DELTAS

    def __post_init__(self):
        object.__setattr__(self, "delta_list", tuple(float(u) for u in self.delta_list))
        if not self.L > 0:
            raise ValueError("box half-width L must be positive")
        if self.Nx < 3 or self.Nx % 2 == 0:
            raise ValueError(f"Nx must be odd and >= 3, got {self.Nx}")
        if self.Nt < 1:
            raise ValueError("Nt must be >= 1")
        ds = self.delta_list
        if any(u <= 0 for u in ds) or any(a <= b for a, b in zip(ds, ds[1:])):
            raise ValueError(f"delta_list must be strictly decreasing and positive: {ds}")

    @property
    def dx(self) -> float:
        return 2.0 * self.L / (self.Nx - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.Nx)

    def nodes(self, d: int) -> np.ndarray:
        axes = np.meshgrid(*([self.axis] * d), indexing="ij")
        return np.stack(axes, axis=-1).reshape(-1, d)


def _central(v: np.ndarray, d: int, Nx: int, dx: float) -> np.ndarray:
    """Gradient of one layer ``(Nx^d, l)``: central inside, one-sided at edges."""
    l = v.shape[-1]
    cube = v.reshape((Nx,) * d + (l,))
    parts = np.gradient(cube, dx, axis=tuple(range(d)), edge_order=1)
    if d == 1:
        parts = [parts]
    # -> (Nx^d, l, d)
    return np.stack([p.reshape(-1, l) for p in parts], axis=-1)


@dataclass
class DecouplingField:
    """Grid values of ``v_n`` and its spatial gradient ``w = D_x v_n``.

    Interpolation is multilinear in ``x`` with constant extrapolation past
    the box, and piecewise constant from the left in ``t``.
    """

    grid: GridSpec
    T: float
    sigma: np.ndarray
    v: np.ndarray
    w: np.ndarray
    n: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.sigma.shape[0]

    @property
    def l(self) -> int:
        return self.v.shape[-1]

    @property
    def dt(self) -> float:
        return self.T / self.grid.Nt

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.grid.Nt + 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes(self.d)

    def layer_index(self, t: float) -> int:
        k = int(np.floor(t / self.dt + 1e-9))
        return min(max(k, 0), self.grid.Nt)

    def _weights(self, x: np.ndarray):
        g = self.grid
        x = np.clip(np.asarray(x, dtype=float).reshape(-1, self.d), -g.L, g.L)
        s = (x + g.L) / g.dx
        j = np.clip(np.floor(s).astype(np.int64), 0, g.Nx - 2)
        frac = s - j
        corners = []
        for bits in np.ndindex(*([2] * self.d)):
            idx = np.zeros(x.shape[0], dtype=np.int64)
            wt = np.ones(x.shape[0])
            for ax, bit in enumerate(bits):
                idx = idx * g.Nx + j[:, ax] + bit
                wt = wt * (frac[:, ax] if bit else 1.0 - frac[:, ax])
            corners.append((idx, wt))
        return corners

    def interpolate(self, t: float, x: np.ndarray):
        """Return ``(v, w)`` at time ``t`` and points ``x`` of shape ``(P, d)``."""
        k = self.layer_index(t)
        vk, wk = self.v[k], self.w[k]
        corners = self._weights(x)
        vv = sum(wt[:, None] * vk[idx] for idx, wt in corners)
        ww = sum(wt[:, None, None] * wk[idx] for idx, wt in corners)
        return vv, ww

    def drift(self, mc: MollifiedCoefficients, t: float, x: np.ndarray) -> np.ndarray:
        """Decoupled drift ``b_n(t, x, v_n(t, x), D_x v_n(t, x) sigma)``."""
        vv, ww = self.interpolate(t, x)
        tt = np.full(x.shape[0], float(t))
        return np.asarray(mc.b(tt, x, vv, ww @ self.sigma), dtype=float).reshape(x.shape[0], self.d)

    def to_csv(self, path, stride: int = 1) -> None:
        """Write ``t, x..., v..., w...`` rows (every ``stride``-th layer)."""
        nodes = self.nodes
        P = nodes.shape[0]
        header = (
            ["t"]
            + [f"x{i + 1}" for i in range(self.d)]
            + [f"v{i + 1}" for i in range(self.l)]
            + [f"w{i + 1}_{j + 1}" for i in range(self.l) for j in range(self.d)]
        )
        rows = []
        times = self.times
        for k in range(0, self.grid.Nt + 1, stride):
            rows.append(
                np.column_stack(
                    [np.full(P, times[k]), nodes, self.v[k], self.w[k].reshape(P, -1)]
                )
            )
        if (self.grid.Nt % stride) != 0:
            k = self.grid.Nt
            rows.append(
                np.column_stack([np.full(P, times[k]), nodes, self.v[k], self.w[k].reshape(P, -1)])
            )
        np.savetxt(path, np.vstack(rows), delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def _neumann_ops(Nx: int, dx: float):
    main = np.full(Nx, -2.0)
    upper = np.ones(Nx - 1)
    lower = np.ones(Nx - 1)
    upper[0] = 2.0
    lower[-1] = 2.0
    d2 = sp.diags([lower, main, upper], [-1, 0, 1], format="csr") / dx**2
    up = np.full(Nx - 1, 0.5)
    lo = np.full(Nx - 1, -0.5)
    up[0] = 0.0
    lo[-1] = 0.0
    d1 = sp.diags([lo, up], [-1, 1], format="csr") / dx
    return d2, d1


def diffusion_matrix(grid: GridSpec, sigma: np.ndarray) -> sp.csr_matrix:
    """Discrete ``1/2 tr(sigma sigma^T D_xx)`` with reflecting (Neumann) ghosts."""
    a = sigma @ sigma.T
    d = a.shape[0]
    d2, d1 = _neumann_ops(grid.Nx, grid.dx)
    if d == 1:
        return 0.5 * a[0, 0] * d2
    eye = sp.identity(grid.Nx, format="csr")
    return 0.5 * (
        a[0, 0] * sp.kron(d2, eye) + a[1, 1] * sp.kron(eye, d2) + 2.0 * a[0, 1] * sp.kron(d1, d1)
    ).tocsr()


def _upwind_transport(v: np.ndarray, bvals: np.ndarray, d: int, Nx: int, dx: float) -> np.ndarray:
    l = v.shape[-1]
    cube = v.reshape((Nx,) * d + (l,))
    out = np.zeros_like(cube)
    for ax in range(d):
        diff = np.diff(cube, axis=ax) / dx
        pad_hi = [(0, 0)] * cube.ndim
        pad_lo = [(0, 0)] * cube.ndim
        pad_hi[ax] = (0, 1)
        pad_lo[ax] = (1, 0)
        fwd = np.pad(diff, pad_hi)
        bwd = np.pad(diff, pad_lo)
        bax = bvals[:, ax].reshape((Nx,) * d + (1,))
        out += np.maximum(bax, 0.0) * fwd + np.minimum(bax, 0.0) * bwd
    return out.reshape(-1, l)


def solve_decoupling_field(
    mc: MollifiedCoefficients, spec: GrowthSpec, grid: GridSpec
) -> DecouplingField:
    """Step the decoupling-field PDE backward from ``v(T) = h_n`` to ``t = 0``."""
    if any(u >= spec.T for u in grid.delta_list):
        raise ValueError(f"every delta must be < T={spec.T}: {grid.delta_list}")
    d, l, sigma = spec.d, spec.l, spec.sigma
    Nx, Nt = grid.Nx, grid.Nt
    dx, dt = grid.dx, spec.T / Nt
    nodes = grid.nodes(d)
    P = nodes.shape[0]
    times = np.linspace(0.0, spec.T, Nt + 1)

    lu = splu((sp.identity(P, format="csc") - dt * diffusion_matrix(grid, sigma)).tocsc())

    v = np.empty((Nt + 1, P, l))
    w = np.empty((Nt + 1, P, l, d))
    v[Nt] = np.asarray(mc.h(nodes), dtype=float).reshape(P, l)
    w[Nt] = _central(v[Nt], d, Nx, dx)
    cfl_max = 0.0
    for k in range(Nt - 1, -1, -1):
        tt = np.full(P, times[k + 1])
        z = w[k + 1] @ sigma
        bval = np.asarray(mc.b(tt, nodes, v[k + 1], z), dtype=float).reshape(P, d)
        gval = np.asarray(mc.g(tt, nodes, v[k + 1], z), dtype=float).reshape(P, l)
        cfl_max = max(cfl_max, float(dt * np.max(np.sum(np.abs(bval), axis=1)) / dx))
        rhs = v[k + 1] + dt * (_upwind_transport(v[k + 1], bval, d, Nx, dx) + gval)
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise FloatingPointError(f"non-finite values in decoupling field at layer {k}")
        v[k] = sol
        w[k] = _central(sol, d, Nx, dx)
    if cfl_max > 1.0:
        warnings.warn(
            f"transport CFL number {cfl_max:.3g} > 1; the discrete maximum principle may fail",
            RuntimeWarning,
        )
    log.debug("solved decoupling field n=%s: CFL %.3g", mc.n, cfl_max)
    return DecouplingField(grid, spec.T, sigma, v, w, n=mc.n, meta={"cfl": cfl_max})


def gradient(field: DecouplingField) -> np.ndarray:
    """Recompute and store ``w`` from ``v`` on every layer."""
    g = field.grid
    for k in range(g.Nt + 1):
        field.w[k] = _central(field.v[k], field.d, g.Nx, g.dx)
    return field.w


def hessian_norm(layer: np.ndarray, d: int, Nx: int, dx: float) -> np.ndarray:
    """Frobenius norm of the second differences of one layer, shape ``(Nx^d,)``."""
    grad = _central(layer, d, Nx, dx)  # (P, l, d)
    l = layer.shape[-1]
    total = np.zeros(layer.shape[0])
    for j in range(d):
        hj = _central(grad[:, :, j], d, Nx, dx)
        total += np.sum(hj.reshape(-1, l * d) ** 2, axis=1)
    return np.sqrt(total)


def _holder_fit(field: DecouplingField, grid: GridSpec, n_pairs: int, seed: int, bins: int = 12):
    """Fit ``osc(r) ~ C r^alpha`` to the binned maximum of ``|v(P) - v(P')|``.

    Pairs are drawn around uniformly random nodes with a log-uniform
    parabolic distance in ``[dx, L/2]``, split between space and time.
    """
    rng = np.random.default_rng(seed)
    d, Nx, dx = field.d, grid.Nx, grid.dx
    K = field.v.shape[0]
    r = np.exp(rng.uniform(np.log(dx), np.log(grid.L / 2), n_pairs))
    share = rng.uniform(0.0, 1.0, n_pairs)
    k1 = rng.integers(0, K, n_pairs)
    dk = np.rint(((1 - share) * r) ** 2 / field.dt).astype(int) * rng.choice([-1, 1], n_pairs)
    k2 = np.clip(k1 + dk, 0, K - 1)
    j1 = rng.integers(0, Nx, (n_pairs, d))
    step = np.rint(share * r / dx / np.sqrt(d)).astype(int)[:, None] * rng.choice([-1, 1], (n_pairs, d))
    j2 = np.clip(j1 + step, 0, Nx - 1)
    flat = lambda j: np.ravel_multi_index(tuple(j.T), (Nx,) * d)  # noqa: E731
    p1, p2 = flat(j1), flat(j2)
    times, axis = field.times, grid.axis
    dist = np.linalg.norm(axis[j1] - axis[j2], axis=1) + np.sqrt(np.abs(times[k1] - times[k2]))
    dv = np.linalg.norm(field.v[k1, p1] - field.v[k2, p2], axis=1)
    keep = (dist >= dx * (1 - 1e-9)) & (dist <= grid.L / 2)
    dist, dv = dist[keep], dv[keep]
    edges = np.geomspace(dx, grid.L / 2, bins + 1)
    which = np.clip(np.searchsorted(edges, dist, side="right") - 1, 0, bins - 1)
    xs, ys = [], []
    for b in range(bins):
        sel = which == b
        if np.any(sel) and dv[sel].max() > 1e-14:
            xs.append(np.mean(np.log(dist[sel])))
            ys.append(np.log(dv[sel].max()))
    if len(xs) < 3:
        return (1.0, 0.0)
    slope, intercept = np.polyfit(xs, ys, 1)
    return (float(slope), float(np.exp(intercept)))


@dataclass
class AprioriReport:
    sup_v: float
    R: float
    grad_bound_per_delta: dict
    holder_fit: tuple
    sobolev_local: dict
    p: float
    box: tuple

    @property
    def bound_ok(self) -> bool:
        return self.sup_v <= self.R * (1 + 1e-6)

    def to_dict(self) -> dict:
        return {
            "sup_v": self.sup_v,
            "R": self.R,
            "grad_bound_per_delta": {repr(k): v for k, v in self.grad_bound_per_delta.items()},
            "holder_fit": {"alpha": self.holder_fit[0], "C": self.holder_fit[1]},
            "sobolev_local": {repr(k): v for k, v in self.sobolev_local.items()},
            "p": self.p,
            "box": list(self.box),
        }


def check_apriori(
    field: DecouplingField,
    spec: GrowthSpec,
    grid: Optional[GridSpec] = None,
    p: float = 2.0,
    box: Sequence[float] = (-1.0, 1.0),
    n_pairs: int = 1000,
    seed: int = 0,
) -> AprioriReport:
    """Empirical a-priori estimates of a solved field.

    Reports ``sup |v|``; the sup of ``|D_x v|`` over ``[0, T - delta]`` for
    ``delta = 0`` and every configured offset; a Hoelder fit ``(alpha, C)``
    of ``|v(t,x) - v(t',x')|`` against the parabolic distance
    ``|x - x'| + |t - t'|^(1/2)`` (pairs with distance in ``[dx, L/2]``);
    and the local Sobolev integral of ``|D_x v|^p + |D_xx v|^p`` over
    ``[0, T - delta] x box^d``.

    A field with no variation gets the fit ``(1.0, 0.0)``.
    """
    if p < 2:
        raise ValueError("Sobolev exponent p must be >= 2")
    grid = grid or field.grid
    d, Nx, dx = field.d, grid.Nx, grid.dx
    times = field.times
    sup_v = float(np.max(np.linalg.norm(field.v, axis=-1)))
    wnorm = np.linalg.norm(field.w.reshape(field.w.shape[0], field.w.shape[1], -1), axis=-1)

    deltas = (0.0,) + tuple(grid.delta_list)
    grad_bounds = {}
    for delta in deltas:
        upto = times <= spec.T - delta + 1e-12
        grad_bounds[delta] = float(np.max(wnorm[upto]))

    holder = _holder_fit(field, grid, n_pairs, seed)

    nodes = field.nodes
    lo, hi = box
    inside = np.all((nodes >= lo - 1e-12) & (nodes <= hi + 1e-12), axis=1)
    cell = dx**d
    dt = field.dt
    per_layer = np.array(
        [
            np.sum(
                wnorm[k][inside] ** p
                + hessian_norm(field.v[k], d, Nx, dx)[inside] ** p
            )
            * cell
            for k in range(field.v.shape[0])
        ]
    )
    sob = {}
    for delta in deltas:
        ks = np.nonzero(times[:-1] < spec.T - delta - 1e-12)[0]
        sob[delta] = float(np.sum(per_layer[ks]) * dt)
    return AprioriReport(
        sup_v=sup_v,
        R=spec.R,
        grad_bound_per_delta=grad_bounds,
        holder_fit=holder,
        sobolev_local=sob,
        p=float(p),
        box=(float(lo), float(hi)),
    )
