"""Mollification of measurable coefficients by a compactly supported bump kernel."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special

from mfbsde.coefficients import ARG_NAMES, CoefficientSet, GrowthSpec

DEFAULT_ORDER = 16
# cap on batch * nodes per evaluation chunk
_CHUNK = 2_000_000


def _bump(r2: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def _bump_mass(dim: int) -> float:
    surface = 2.0 * math.pi ** (dim / 2) / special.gamma(dim / 2)
    radial = integrate.quad(
        lambda r: r ** (dim - 1) * math.exp(-1.0 / (1.0 - r * r)), 0.0, 1.0, epsabs=1e-15
    )[0]
    return surface * radial


@dataclass(frozen=True)
class MollifierKernel:
    """Quadrature rule for the bump kernel of radius ``1/n`` in ``dim`` dimensions.

    ``weights`` already include the kernel density and sum to one, so
    ``sum(weights * f(u - nodes))`` approximates the convolution at ``u``.
    ``mass_error`` is the relative error of the raw tensor rule against the
    exact mass of the bump, kept as a diagnostic of the quadrature order.
    """

    n: int
    dim: int
    order: int
    nodes: np.ndarray
    weights: np.ndarray
    mass_error: float

    @property
    def radius(self) -> float:
        return 1.0 / self.n


def make_kernel(n: int, dim: int, order: int = DEFAULT_ORDER) -> MollifierKernel:
    """Tensor Gauss-Legendre rule on the support cube, masked to the unit ball.

    The density is ``exp(-1 / (1 - |u|^2))`` on ``|u| < 1``, rescaled to
    radius ``1/n``.  Nodes are symmetrised so odd moments vanish to
    rounding.
    """
    if n < 1 or dim < 1 or order < 2:
        raise ValueError("need n >= 1, dim >= 1 and order >= 2")
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    nodes = np.stack(grids, axis=-1).reshape(-1, dim)
    wts = np.prod(np.stack(np.meshgrid(*([w] * dim), indexing="ij"), -1).reshape(-1, dim), axis=1)
    dens = wts * _bump(np.sum(nodes**2, axis=1))
    keep = dens > 0
    nodes, dens = nodes[keep], dens[keep]
    raw = float(dens.sum())
    mass_error = raw / _bump_mass(dim) - 1.0
    return MollifierKernel(
        n=int(n),
        dim=int(dim),
        order=int(order),
        nodes=nodes / n,
        weights=dens / raw,
        mass_error=float(mass_error),
    )


def _flat(a: np.ndarray, P: int) -> np.ndarray:
    return a.reshape(P, -1)


def mollify(
    f: Callable,
    kernel: MollifierKernel,
    smoothed_args: Optional[Sequence] = None,
    arg_names: Sequence[str] = ARG_NAMES,
    T: Optional[float] = None,
) -> Callable:
    """Return ``u -> sum_k w_k f(u - alpha_k)`` for the kernel's quadrature rule.

    Parameters
    ----------
    f : callable
        Vectorised function of the positional arguments named in
        ``arg_names``; a ``"t"`` argument is a ``(P,)`` array, every other
        argument carries the batch on its leading axis.
    kernel : MollifierKernel
        Its dimension must equal the total flattened size of the smoothed
        arguments.
    smoothed_args : sequence of str or bool mask, optional
        Which arguments are convolved.  Defaults to all of them.
    T : float, optional
        Horizon; when given, shifted times are clamped to ``[0, T]``.
    """
    names = tuple(arg_names)
    if smoothed_args is None:
        mask = (True,) * len(names)
    elif all(isinstance(s, (bool, np.bool_)) for s in smoothed_args) and len(smoothed_args) == len(names):
        mask = tuple(bool(s) for s in smoothed_args)
    else:
        unknown = set(smoothed_args) - set(names)
        if unknown:
            raise ValueError(f"cannot smooth unknown arguments {sorted(unknown)}")
        mask = tuple(nm in smoothed_args for nm in names)
    if not any(mask):
        return f
    nodes, weights = kernel.nodes, kernel.weights
    K = len(weights)

    def mollified(*args):
        if len(args) != len(names):
            raise TypeError(f"expected {len(names)} arguments {names}, got {len(args)}")
        arrs = [np.asarray(a, dtype=float) for a in args]
        P = next(a.shape[0] for nm, a in zip(names, arrs) if nm != "t")
        arrs = [np.broadcast_to(a, (P,)) if nm == "t" else a for nm, a in zip(names, arrs)]
        sizes = [int(np.prod(a.shape[1:], dtype=int)) if a.ndim > 1 else 1 for a in arrs]
        width = sum(s for s, m in zip(sizes, mask) if m)
        if width != kernel.dim:
            raise ValueError(f"kernel dimension {kernel.dim} != smoothed width {width}")
        offsets, pos = [], 0
        for s, m in zip(sizes, mask):
            offsets.append(pos)
            pos += s if m else 0

        out = None
        step = max(1, _CHUNK // K)
        for lo in range(0, P, step):
            hi = min(P, lo + step)
            p = hi - lo
            shifted = []
            for nm, a, s, m, off in zip(names, arrs, sizes, mask, offsets):
                a = a[lo:hi]
                if m:
                    shift = nodes[:, off : off + s]
                    base = _flat(a, p)[:, None, :] - shift[None, :, :]
                    base = base.reshape((p * K,) + a.shape[1:])
                    if nm == "t":
                        base = base.reshape(p * K)
                        if T is not None:
                            base = np.clip(base, 0.0, T)
                else:
                    base = np.repeat(a, K, axis=0)
                shifted.append(base)
            vals = np.asarray(f(*shifted), dtype=float)
            vals = vals.reshape((p, K) + vals.shape[1:])
            chunk = np.tensordot(weights, vals, axes=([0], [1]))
            if out is None:
                out = np.empty((P,) + chunk.shape[1:])
            out[lo:hi] = chunk
        return out

    return mollified


def smooth_cutoff(x: np.ndarray, L: float) -> np.ndarray:
    """Smooth factor equal to 1 on ``[-L, L]^d`` and 0 outside ``[-2L, 2L]^d``."""
    r = np.abs(np.asarray(x, dtype=float))
    up = np.where(2 * L - r > 0, np.exp(-1.0 / np.maximum(2 * L - r, 1e-300)), 0.0)
    down = np.where(r - L > 0, np.exp(-1.0 / np.maximum(r - L, 1e-300)), 0.0)
    s = np.where(r <= L, 1.0, up / np.maximum(up + down, 1e-300))
    return np.prod(s.reshape(s.shape[0], -1), axis=1)


def uniform_gap(f: Callable, f_n: Callable, box: Sequence, grid=101) -> float:
    """Sup over a tensor sample grid of ``|f_n - f|``.

    ``f`` and ``f_n`` take a ``(P, D)`` array of points.  ``box`` is a
    sequence of ``(lo, hi)`` pairs and ``grid`` is either a point count per
    axis or an explicit ``(P, D)`` array of sample points.
    """
    if isinstance(grid, (int, np.integer)):
        axes = [np.linspace(lo, hi, int(grid)) for lo, hi in box]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(axes))
    else:
        pts = np.asarray(grid, dtype=float)
    diff = np.asarray(f_n(pts), dtype=float) - np.asarray(f(pts), dtype=float)
    return float(np.max(np.abs(diff)))


@dataclass(frozen=True)
class MollifiedCoefficients:
    """Smoothed coefficients ``b_n, g_n, h_n`` at level ``n``."""

    n: int
    b: Callable
    g: Callable
    h: Callable
    source: CoefficientSet
    smoothed: dict = field(default_factory=dict)
    order: int = DEFAULT_ORDER
    cutoff: Optional[float] = None


def _arg_sizes(spec: GrowthSpec) -> dict:
    return {"t": 1, "x": spec.d, "y": spec.l, "z": spec.l * spec.d}


def mollify_coefficients(
    coeffs: CoefficientSet,
    spec: GrowthSpec,
    n: int,
    args="rough",
    order: int = DEFAULT_ORDER,
    box_half_width: Optional[float] = None,
) -> MollifiedCoefficients:
    """Mollify ``b``, ``g`` and ``h`` at bandwidth ``1/n``.

    ``args`` selects the convolved arguments: ``"rough"`` uses the
    coefficient set's declared non-smooth arguments, ``"all"`` convolves
    jointly in every argument, and a mapping gives them per coefficient.
    With ``box_half_width`` the results are multiplied by a smooth cutoff in
    ``x`` that equals one on the computational box.
    """
    if n < 1:
        raise ValueError("mollification level must be >= 1")
    sizes = _arg_sizes(spec)
    signatures = {"b": ARG_NAMES, "g": ARG_NAMES, "h": ("x",)}
    out, smoothed = {}, {}
    for name, names in signatures.items():
        if args == "rough":
            chosen = tuple(coeffs.rough_args.get(name, ()))
        elif args == "all":
            chosen = names
        else:
            chosen = tuple(args.get(name, ()))
        chosen = tuple(a for a in names if a in chosen)
        fn = getattr(coeffs, name)
        if chosen:
            kernel = make_kernel(n, sum(sizes[a] for a in chosen), order)
            fn = mollify(fn, kernel, chosen, names, T=spec.T)
        smoothed[name] = chosen
        out[name] = fn

    if box_half_width is not None:
        L = float(box_half_width)
        b0, g0, h0 = out["b"], out["g"], out["h"]
        out["b"] = lambda t, x, y, z: b0(t, x, y, z) * smooth_cutoff(x, L)[:, None]
        out["g"] = lambda t, x, y, z: g0(t, x, y, z) * smooth_cutoff(x, L)[:, None]
        out["h"] = lambda x: h0(x) * smooth_cutoff(x, L)[:, None]

    return MollifiedCoefficients(
        n=int(n),
        b=out["b"],
        g=out["g"],
        h=out["h"],
        source=coeffs,
        smoothed=smoothed,
        order=order,
        cutoff=box_half_width,
    )
