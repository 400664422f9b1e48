"""FBSDE problem instances: coefficients, growth constants and the built-in catalog.

Coefficients are plain vectorised callables over a batch of ``P`` points:

* ``b(t, x, y, z) -> (P, d)``
* ``g(t, x, y, z) -> (P, l)``
* ``h(x) -> (P, l)``

with ``t`` of shape ``(P,)``, ``x`` of shape ``(P, d)``, ``y`` of shape
``(P, l)`` and ``z`` of shape ``(P, l, d)``.  Callables must be pure so they
can be evaluated from several threads at once.

Pointwise conventions for the measurable catalog members: ``sign(0) = 0``
and indicators are right-continuous, ``1_{x >= 0}``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml
from scipy import integrate
from scipy.stats import qmc

ARG_NAMES = ("t", "x", "y", "z")
MAX_DIM = 2

Coefficient = Callable[..., np.ndarray]


def bound_R(spec: "GrowthSpec") -> float:
    """Uniform bound ``k3 * exp(T * k2)`` on the decoupling field."""
    return float(spec.k3 * math.exp(spec.T * spec.k2))


@dataclass(frozen=True)
class GrowthSpec:
    """Dimensions, horizon, diffusion matrix and growth constants of a problem."""

    d: int
    l: int
    T: float
    sigma: np.ndarray
    lam: float
    k1: float
    k2: float
    k3: float

    def __post_init__(self):
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "sigma", sigma)
        if not (isinstance(self.d, (int, np.integer)) and self.d >= 1):
            raise ValueError(f"d must be a positive integer, got {self.d!r}")
        if self.d > MAX_DIM:
            raise ValueError(
                f"forward dimension d={self.d} is not supported; "
                f"grid-based solves are limited to d <= {MAX_DIM}"
            )
        if not (isinstance(self.l, (int, np.integer)) and self.l >= 1):
            raise ValueError(f"l must be a positive integer, got {self.l!r}")
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if sigma.shape != (self.d, self.d):
            raise ValueError(f"sigma must be {self.d}x{self.d}, got shape {sigma.shape}")
        if not self.lam > 0:
            raise ValueError(f"ellipticity constant must be positive, got {self.lam}")
        for name in ("k1", "k2", "k3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.min_eig < self.lam - 1e-10:
            raise ValueError(
                f"sigma sigma^T has smallest eigenvalue {self.min_eig:.6g} < lambda={self.lam}"
            )

    @property
    def a(self) -> np.ndarray:
        """Diffusion matrix ``sigma sigma^T``."""
        return self.sigma @ self.sigma.T

    @property
    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.a).min())

    @property
    def R(self) -> float:
        return bound_R(self)


@dataclass(frozen=True)
class CoefficientSet:
    """Evaluable coefficients plus the structural flags they satisfy.

    ``rough_args`` records, per coefficient, the arguments in which it fails
    to be smooth; mollification defaults to smoothing exactly those.
    """

    b: Coefficient
    g: Coefficient
    h: Coefficient
    flag_b1: bool = False
    flag_b2: bool = False
    flag_g_no_z: bool = False
    flag_g_no_x: bool = False
    lipschitz_h_const: Optional[float] = None
    rough_args: dict = field(default_factory=dict)
    name: str = "custom"

    @property
    def admissible(self) -> bool:
        return bool(self.flag_b1 or self.flag_b2)

    def flags(self) -> dict:
        return {
            "B1": bool(self.flag_b1),
            "B2": bool(self.flag_b2),
            "A5": bool(self.flag_g_no_z),
            "A6": bool(self.flag_g_no_x),
        }


@dataclass(frozen=True)
class ClosedFormOracle:
    """Reference decoupling field, when one is known."""

    v_exact: Optional[Callable[[float, np.ndarray], np.ndarray]]
    description: str
    grad_exact: Optional[Callable[[float, np.ndarray], np.ndarray]] = None


@dataclass
class ValidationReport:
    passed: bool
    ratios: dict
    witnesses: dict
    budget: int
    box_half_width: float

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "ratios": dict(self.ratios),
            "witnesses": {k: [float(u) for u in v] for k, v in self.witnesses.items()},
            "budget": self.budget,
            "box_half_width": self.box_half_width,
        }


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    pos = den > 0
    out[pos] = num[pos] / den[pos]
    out[~pos & (num > 0)] = np.inf
    return out


def validate_growth(
    coeffs: CoefficientSet,
    spec: GrowthSpec,
    budget: int = 4096,
    seed: int = 0,
    box_half_width: float = 10.0,
) -> ValidationReport:
    """Check the growth bounds on ``b``, ``g``, ``h`` over a scrambled Sobol sample.

    The sample covers ``[0, T] x [-L, L]^(d + l + l*d)``.  Ratios are
    ``|b| / (k1 (1 + |y| + |z|))``, ``|g| / (k2 (1 + |y| + |z|))`` and
    ``|h| / k3``; under (B2) the Lipschitz quotient of ``h`` against its
    declared constant is checked too.  Violations are reported, never raised.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    d, l = spec.d, spec.l
    L = float(box_half_width)
    dim = 1 + d + l + l * d
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        u = qmc.Sobol(dim, scramble=True, seed=seed).random(budget)
    t = u[:, 0] * spec.T
    x = (2 * u[:, 1 : 1 + d] - 1) * L
    y = (2 * u[:, 1 + d : 1 + d + l] - 1) * L
    z = ((2 * u[:, 1 + d + l :] - 1) * L).reshape(budget, l, d)

    growth = 1.0 + np.linalg.norm(y, axis=1) + np.linalg.norm(z.reshape(budget, -1), axis=1)
    bv = np.asarray(coeffs.b(t, x, y, z), dtype=float).reshape(budget, d)
    gv = np.asarray(coeffs.g(t, x, y, z), dtype=float).reshape(budget, l)
    hv = np.asarray(coeffs.h(x), dtype=float).reshape(budget, l)

    ratios = {
        "b": _ratio(np.linalg.norm(bv, axis=1), spec.k1 * growth),
        "g": _ratio(np.linalg.norm(gv, axis=1), spec.k2 * growth),
        "h": _ratio(np.linalg.norm(hv, axis=1), np.full(budget, spec.k3)),
    }
    points = {
        "b": np.column_stack([t, x, y, z.reshape(budget, -1)]),
        "g": np.column_stack([t, x, y, z.reshape(budget, -1)]),
        "h": x,
    }
    if coeffs.flag_b2 and budget >= 2:
        lip = spec.k3 if coeffs.lipschitz_h_const is None else coeffs.lipschitz_h_const
        x2 = np.roll(x, 1, axis=0)
        dist = np.linalg.norm(x - x2, axis=1)
        dh = np.linalg.norm(hv - np.roll(hv, 1, axis=0), axis=1)
        ratios["h_lipschitz"] = _ratio(dh, lip * dist)
        points["h_lipschitz"] = np.column_stack([x, x2])

    worst = {k: float(np.max(r)) for k, r in ratios.items()}
    witnesses = {k: points[k][int(np.argmax(r))] for k, r in ratios.items()}
    passed = all(w <= 1.0 + 1e-9 for w in worst.values())
    return ValidationReport(passed, worst, witnesses, budget, L)


# ---------------------------------------------------------------------------
# Catalog


def _heat_value(tau: float, x: np.ndarray, fn) -> np.ndarray:
    if tau <= 0:
        return fn(x)
    s = math.sqrt(tau)
    pdf = lambda u: math.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)  # noqa: E731
    out = np.empty_like(x)
    for i, xi in enumerate(x):
        out[i] = integrate.quad(
            lambda u: fn(xi + s * u) * pdf(u), -12.0, 12.0, epsabs=1e-13, epsrel=1e-12, limit=200
        )[0]
    return out


def _heat_oracle(T: float) -> ClosedFormOracle:
    def v_exact(t, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return _heat_value(T - t, x, np.tanh).reshape(-1, 1)

    def grad_exact(t, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        sech2 = lambda u: 1.0 / np.cosh(u) ** 2  # noqa: E731
        return _heat_value(T - t, x, sech2).reshape(-1, 1, 1)

    return ClosedFormOracle(
        v_exact,
        "Gaussian convolution of tanh with variance T - t (adaptive quadrature)",
        grad_exact,
    )


def _zeros(dim: int):
    def f(t, x, y, z):
        return np.zeros((np.shape(x)[0], dim))

    return f


def _heat(T: float = 1.0):
    spec = GrowthSpec(d=1, l=1, T=T, sigma=[[1.0]], lam=1.0, k1=0.0, k2=0.0, k3=1.0)
    coeffs = CoefficientSet(
        b=_zeros(1),
        g=_zeros(1),
        h=lambda x: np.tanh(x[:, :1]),
        flag_b1=True,
        flag_b2=True,
        flag_g_no_z=True,
        flag_g_no_x=True,
        lipschitz_h_const=1.0,
        rough_args={"h": ("x",)},
        name="heat",
    )
    return coeffs, spec, _heat_oracle(T)


def _sign_drift(T: float = 1.0):
    spec = GrowthSpec(d=1, l=1, T=T, sigma=[[1.0]], lam=1.0, k1=1.0, k2=0.0, k3=1.0)

    def b(t, x, y, z):
        # |b| <= 1 + |y| and saturates at 2 so the drift stays bounded off B_R(0)
        return np.sign(x[:, :1]) * np.minimum(1.0 + np.abs(y[:, :1]), 2.0)

    coeffs = CoefficientSet(
        b=b,
        g=_zeros(1),
        h=lambda x: (x[:, :1] >= 0).astype(float),
        flag_b1=True,
        flag_b2=False,
        flag_g_no_z=True,
        flag_g_no_x=True,
        rough_args={"b": ("x",), "h": ("x",)},
        name="sign-drift",
    )
    return coeffs, spec, None


def _linear_ode(T: float = 1.0, lam: float = 1.0, c: float = 1.0):
    spec = GrowthSpec(d=1, l=1, T=T, sigma=[[1.0]], lam=1.0, k1=0.0, k2=abs(lam), k3=abs(c))

    def g(t, x, y, z):
        return -lam * y

    def h(x):
        return np.full((x.shape[0], 1), float(c))

    def v_exact(t, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return np.full((x.size, 1), c * math.exp(-lam * (T - t)))

    oracle = ClosedFormOracle(v_exact, "c * exp(-lambda (T - t))")
    coeffs = CoefficientSet(
        b=_zeros(1),
        g=g,
        h=h,
        flag_b1=True,
        flag_b2=True,
        flag_g_no_z=True,
        flag_g_no_x=True,
        lipschitz_h_const=0.0,
        name="linear-ode",
    )
    return coeffs, spec, oracle


def _coupled_lip(T: float = 1.0):
    spec = GrowthSpec(d=1, l=1, T=T, sigma=[[1.0]], lam=1.0, k1=1.0, k2=1.0, k3=1.0)

    def b(t, x, y, z):
        return np.arctan(y[:, :1])

    def g(t, x, y, z):
        return np.cos(z[:, 0, :1])

    coeffs = CoefficientSet(
        b=b,
        g=g,
        h=lambda x: np.clip(x[:, :1], -1.0, 1.0),
        flag_b1=True,
        flag_b2=True,
        flag_g_no_z=False,
        flag_g_no_x=True,
        lipschitz_h_const=1.0,
        rough_args={"h": ("x",)},
        name="coupled-lip",
    )
    return coeffs, spec, None


_CATALOG = {
    "heat": _heat,
    "sign-drift": _sign_drift,
    "linear-ode": _linear_ode,
    "coupled-lip": _coupled_lip,
}


def catalog_names() -> list[str]:
    return sorted(_CATALOG)


def builtin_problem(name: str, **params):
    """Return ``(coeffs, spec, oracle)`` for a catalog problem.

    ``params`` are forwarded to the problem constructor (``T`` for all,
    ``lam`` and ``c`` for ``linear-ode``).  The instance is checked with
    :func:`validate_growth` before it is returned.
    """
    try:
        factory = _CATALOG[name]
    except KeyError:
        raise KeyError(
            f"unknown problem {name!r}; available: {', '.join(catalog_names())}"
        ) from None
    coeffs, spec, oracle = factory(**params)
    report = validate_growth(coeffs, spec, budget=1024, seed=0)
    if not report.passed:
        raise ValueError(f"catalog problem {name!r} violates its growth constants: {report.ratios}")
    return coeffs, spec, oracle


# ---------------------------------------------------------------------------
# Structured-config problems (piecewise-constant and polynomial families)


def _scalar_arg(variable: str, t, x, y, z) -> np.ndarray:
    if variable == "t":
        return np.broadcast_to(np.asarray(t, dtype=float), (np.shape(x)[0],))
    if variable == "x":
        return x[:, 0]
    if variable == "y":
        return y[:, 0]
    if variable == "z":
        return z[:, 0, 0]
    raise ValueError(f"unknown variable {variable!r}; expected one of {ARG_NAMES}")


def _family(entry: Optional[dict], out_dim: int, key: str):
    """Build a coefficient callable and its rough-argument tuple from a config entry."""
    if entry is None:
        return _zeros(out_dim), ()
    family = entry.get("family")
    variable = entry.get("variable", "x")
    if key == "h" and variable != "x":
        raise ValueError("terminal condition h may only depend on x")
    if family == "piecewise-constant":
        bps = np.asarray(entry["breakpoints"], dtype=float)
        vals = np.asarray(entry["values"], dtype=float).reshape(len(bps) + 1, -1)
        if vals.shape[1] != out_dim:
            raise ValueError(f"{key}: each piece needs {out_dim} value(s)")

        def f(t, x, y, z):
            s = _scalar_arg(variable, t, x, y, z)
            # right-continuous at the breakpoints
            return vals[np.searchsorted(bps, s, side="right")]

        return f, (variable,)
    if family == "polynomial":
        coefs = np.asarray(entry["coefficients"], dtype=float)
        coefs = np.atleast_2d(coefs)
        if coefs.shape[0] == 1 and out_dim > 1:
            coefs = np.repeat(coefs, out_dim, axis=0)
        if coefs.shape[0] != out_dim:
            raise ValueError(f"{key}: need one coefficient list per output component")

        def f(t, x, y, z):
            s = _scalar_arg(variable, t, x, y, z)
            return np.column_stack([np.polynomial.polynomial.polyval(s, c) for c in coefs])

        return f, ()
    raise ValueError(f"{key}: unknown family {family!r} (piecewise-constant | polynomial)")


def problem_from_dict(cfg: dict):
    """Construct and validate a problem from a parsed config mapping."""
    for key in ("d", "l", "T", "sigma", "k1", "k2", "k3"):
        if key not in cfg:
            raise KeyError(f"problem config is missing required key {key!r}")
    spec = GrowthSpec(
        d=int(cfg["d"]),
        l=int(cfg["l"]),
        T=float(cfg["T"]),
        sigma=np.asarray(cfg["sigma"], dtype=float),
        lam=float(cfg.get("lambda", 1.0)),
        k1=float(cfg["k1"]),
        k2=float(cfg["k2"]),
        k3=float(cfg["k3"]),
    )
    b, rb = _family(cfg.get("b"), spec.d, "b")
    g, rg = _family(cfg.get("g"), spec.l, "g")
    h_raw, rh = _family(cfg.get("h"), spec.l, "h")
    flags = cfg.get("flags", {})
    coeffs = CoefficientSet(
        b=b,
        g=g,
        h=lambda x: h_raw(None, x, None, None),
        flag_b1=bool(flags.get("b1", False)),
        flag_b2=bool(flags.get("b2", False)),
        flag_g_no_z=bool(flags.get("a5", False)),
        flag_g_no_x=bool(flags.get("a6", False)),
        lipschitz_h_const=cfg.get("lipschitz_h"),
        rough_args={k: v for k, v in (("b", rb), ("g", rg), ("h", rh)) if v},
        name=str(cfg.get("name", "custom")),
    )
    report = validate_growth(coeffs, spec, budget=1024, seed=0)
    if not report.passed:
        raise ValueError(f"custom problem violates its growth constants: {report.ratios}")
    return coeffs, spec, None


def load_problem(path) -> tuple:
    """Load a custom problem from a YAML file with a top-level ``problem`` mapping."""
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict) or "problem" not in data:
        raise KeyError("config file must contain a top-level 'problem' mapping")
    return problem_from_dict(data["problem"])
