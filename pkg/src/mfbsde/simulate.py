"""Forward paths of the decoupled SDE, ``(Y, Z)`` reconstruction and Malliavin derivatives."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from mfbsde.coefficients import GrowthSpec
from mfbsde.mollifier import MollifiedCoefficients
from mfbsde.pde import DecouplingField

log = logging.getLogger(__name__)

EXIT_WARN_FRACTION = 0.01


def path_generator(seed: int, path: int) -> np.random.Generator:
    """Philox stream for one path, keyed by ``(seed, path)``.

    Streams are derived independently per path index, so enlarging the
    ensemble never reshuffles the increments of earlier paths.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(path,))))


def brownian_increments(seed: int, M: int, N: int, d: int, dt: float) -> np.ndarray:
    """Brownian increments of shape ``(M, N, d)``; step ``i`` of path ``m`` is
    the ``i``-th draw of stream ``(seed, m)``."""
    out = np.empty((M, N, d))
    scale = np.sqrt(dt)
    for m in range(M):
        out[m] = path_generator(seed, m).standard_normal((N, d)) * scale
    return out


@dataclass
class PathEnsemble:
    M: int
    N: int
    times: np.ndarray
    dW: np.ndarray
    X: np.ndarray
    x0: np.ndarray
    s: float
    seed: int
    Y: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    exit_fraction: float = 0.0
    drift_sup: float = 0.0
    drift_bound: Optional[float] = None
    n: Optional[int] = None

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def index_of(self, t: float) -> int:
        i = int(round((t - self.s) / self.dt))
        if not 0 <= i <= self.N:
            raise ValueError(f"time {t} outside the ensemble grid [{self.s}, {self.times[-1]}]")
        return i

    def summary(self) -> dict:
        """Per-time mean and variance of each component of ``X``, ``Y`` and ``Z``."""
        cols = {"t": self.times}
        for name, arr in (("X", self.X), ("Y", self.Y), ("Z", self.Z)):
            if arr is None:
                continue
            flat = arr.reshape(self.M, self.N + 1, -1)
            for c in range(flat.shape[-1]):
                cols[f"{name}{c + 1}_mean"] = flat[:, :, c].mean(axis=0)
                cols[f"{name}{c + 1}_var"] = flat[:, :, c].var(axis=0)
        cols["exit_fraction"] = np.full(self.N + 1, self.exit_fraction)
        return cols

    def to_csv(self, path) -> None:
        cols = self.summary()
        data = np.column_stack(list(cols.values()))
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")


def drift_bound(spec: GrowthSpec, field: DecouplingField, coeffs) -> Optional[float]:
    """Uniform bound on the decoupled drift implied by (B1) or (B2)."""
    if coeffs.flag_b1:
        return spec.k1 * (1.0 + spec.R)
    if coeffs.flag_b2:
        wmax = float(np.max(np.linalg.norm(field.w.reshape(*field.w.shape[:2], -1), axis=-1)))
        return spec.k1 * (1.0 + spec.R + wmax * np.linalg.norm(spec.sigma, 2))
    return None


def simulate_forward(
    field: DecouplingField,
    mc: MollifiedCoefficients,
    spec: GrowthSpec,
    x0,
    s: float = 0.0,
    N: int = 256,
    M: int = 1000,
    seed: int = 0,
    dW: Optional[np.ndarray] = None,
) -> PathEnsemble:
    """Euler-Maruyama for ``dX = b_n(t, X, v_n, D_x v_n sigma) dt + sigma dW`` on ``[s, T]``.

    Passing ``dW`` couples several runs to the same Brownian increments.
    Paths leaving the PDE box see constant extrapolation of ``v`` and
    ``w``; the fraction of such path-steps is recorded and a warning is
    issued above 1%.
    """
    if M < 1 or N < 1:
        raise ValueError("need M >= 1 and N >= 1")
    if field.d != spec.d or abs(field.T - spec.T) > 1e-12:
        raise ValueError("decoupling field does not match the problem dimensions/horizon")
    if not 0.0 <= s < spec.T:
        raise ValueError(f"start time must lie in [0, T), got {s}")
    d = spec.d
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (d,)).copy()
    dt = (spec.T - s) / N
    if dW is None:
        dW = brownian_increments(seed, M, N, d, dt)
    elif dW.shape != (M, N, d):
        raise ValueError(f"dW has shape {dW.shape}, expected {(M, N, d)}")
    times = s + dt * np.arange(N + 1)
    noise = dW @ spec.sigma.T
    X = np.empty((M, N + 1, d))
    X[:, 0] = x0
    L = field.grid.L
    exits = 0
    sup = 0.0
    for i in range(N):
        xi = X[:, i]
        drift = field.drift(mc, times[i], xi)
        if not np.all(np.isfinite(drift)):
            raise FloatingPointError(f"non-finite drift at step {i}")
        sup = max(sup, float(np.max(np.linalg.norm(drift, axis=1))))
        exits += int(np.count_nonzero(np.any(np.abs(xi) > L, axis=1)))
        X[:, i + 1] = xi + drift * dt + noise[:, i]
    exit_fraction = exits / (M * N)
    if exit_fraction > EXIT_WARN_FRACTION:
        warnings.warn(
            f"{100 * exit_fraction:.2f}% of path-steps left the PDE box [-{L}, {L}]^{d}",
            RuntimeWarning,
        )
    bound = drift_bound(spec, field, mc.source)
    if bound is not None and sup > bound * (1 + 1e-9) + 1e-12:
        raise AssertionError(f"decoupled drift reached {sup:.6g} above its bound {bound:.6g}")
    return PathEnsemble(
        M=M,
        N=N,
        times=times,
        dW=dW,
        X=X,
        x0=x0,
        s=float(s),
        seed=int(seed),
        exit_fraction=exit_fraction,
        drift_sup=sup,
        drift_bound=bound,
        n=mc.n,
    )


def reconstruct_yz(ens: PathEnsemble, field: DecouplingField) -> PathEnsemble:
    """Fill ``Y_i = v(t_i, X_i)`` and ``Z_i = w(t_i, X_i) sigma`` along every path."""
    M, N = ens.M, ens.N
    Y = np.empty((M, N + 1, field.l))
    Z = np.empty((M, N + 1, field.l, field.d))
    for i, t in enumerate(ens.times):
        vv, ww = field.interpolate(t, ens.X[:, i])
        Y[:, i] = vv
        Z[:, i] = ww @ field.sigma
    return replace(ens, Y=Y, Z=Z)


def drift_jacobian(
    field: DecouplingField, mc: MollifiedCoefficients, t: float, x: np.ndarray, h: Optional[float] = None
) -> np.ndarray:
    """Central-difference Jacobian of the decoupled drift, shape ``(P, d, d)``."""
    h = field.grid.dx if h is None else h
    d = field.d
    J = np.empty((x.shape[0], d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, :, j] = (field.drift(mc, t, x + e) - field.drift(mc, t, x - e)) / (2 * h)
    return J


@dataclass
class MalliavinEnsemble:
    """``D[m, j, i] = D_{s_j} X_{t_i}`` on path ``m``; zero for ``t_i < s_j``."""

    D: np.ndarray
    s_grid: np.ndarray
    s_index: np.ndarray
    times: np.ndarray
    n: Optional[int] = None

    def second_moment(self) -> np.ndarray:
        """``E ||D_{s_j} X_{t_i}||^2`` as an ``(Ns, N+1)`` table."""
        return np.mean(np.sum(self.D.reshape(*self.D.shape[:3], -1) ** 2, axis=-1), axis=0)

    def sup_second_moment(self) -> float:
        return float(np.max(self.second_moment()))


def simulate_malliavin(
    ens: PathEnsemble,
    mc: MollifiedCoefficients,
    field: DecouplingField,
    s_grid: Sequence[float],
) -> MalliavinEnsemble:
    """Integrate ``D_s X_{i+1} = D_s X_i + J_i D_s X_i dt`` from ``D_s X_s = sigma``.

    ``J_i`` is the central-difference Jacobian of the decoupled drift at
    ``(t_i, X_i)`` with step equal to the PDE grid spacing.  Each ``s`` is
    snapped to the nearest ensemble time.
    """
    s_index = np.array([ens.index_of(s) for s in s_grid], dtype=int)
    d = field.d
    M, N, Ns = ens.M, ens.N, len(s_index)
    D = np.zeros((M, Ns, N + 1, d, d))
    cur = np.zeros((M, Ns, d, d))
    dt = ens.dt
    for i in range(N + 1):
        starting = s_index == i
        if np.any(starting):
            cur[:, starting] = field.sigma
        D[:, :, i] = cur
        if i == N:
            break
        J = drift_jacobian(field, mc, ens.times[i], ens.X[:, i])
        cur = cur + dt * np.einsum("mab,mjbc->mjac", J, cur)
    return MalliavinEnsemble(D=D, s_grid=ens.times[s_index], s_index=s_index, times=ens.times, n=mc.n)


@dataclass
class CompactnessReport:
    per_level: dict
    max_alpha: float
    max_intercept: float
    lags: list

    def to_dict(self) -> dict:
        return {
            "per_level": {str(k): v for k, v in self.per_level.items()},
            "max_alpha": self.max_alpha,
            "max_intercept": self.max_intercept,
            "lags": self.lags,
        }


def compactness_statistics(
    malls: Mapping[int, MalliavinEnsemble], r_index: int = -1
) -> CompactnessReport:
    """Fit ``E||D_{t'} X_r - D_t X_r||^2 ~ C |t - t'|^alpha`` per level.

    Moduli are averaged over pairs sharing a lag and regressed on log-log
    axes.  An identically zero modulus is flagged ``degenerate`` and gets
    no fit.
    """
    per_level = {}
    lags_out = []
    for n, mall in malls.items():
        r = mall.D.shape[2] + r_index if r_index < 0 else r_index
        t_r = mall.times[r]
        active = np.nonzero(mall.s_grid <= t_r + 1e-12)[0]
        Dr = mall.D[:, active, r].reshape(mall.D.shape[0], len(active), -1)
        svals = mall.s_grid[active]
        by_lag: dict = {}
        for a in range(len(active)):
            for b in range(a + 1, len(active)):
                lag = round(float(abs(svals[b] - svals[a])), 12)
                if lag <= 0:
                    continue
                mod = float(np.mean(np.sum((Dr[:, b] - Dr[:, a]) ** 2, axis=-1)))
                by_lag.setdefault(lag, []).append(mod)
        if len(by_lag) < 3:
            raise ValueError(f"level {n}: need at least 3 distinct lags, got {len(by_lag)}")
        lags = np.array(sorted(by_lag))
        mods = np.array([np.mean(by_lag[u]) for u in lags])
        lags_out = lags.tolist()
        if np.all(mods <= 1e-30):
            per_level[n] = {"alpha": None, "intercept": None, "degenerate": "degenerate (zero modulus)",
                            "moduli": mods.tolist()}
            continue
        keep = mods > 1e-30
        slope, icpt = np.polyfit(np.log(lags[keep]), np.log(mods[keep]), 1)
        per_level[n] = {"alpha": float(slope), "intercept": float(np.exp(icpt)), "degenerate": None,
                        "moduli": mods.tolist()}
    fitted = [v for v in per_level.values() if v["alpha"] is not None]
    return CompactnessReport(
        per_level=per_level,
        max_alpha=max((v["alpha"] for v in fitted), default=float("nan")),
        max_intercept=max((v["intercept"] for v in fitted), default=float("nan")),
        lags=lags_out,
    )
