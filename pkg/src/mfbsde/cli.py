"""Command line entry point and the end-to-end pipeline.

Subcommands: ``describe``, ``solve``, ``simulate``, ``verify``, ``pipeline``.
Exit status is 0 on success, 1 when a hard invariant fails (decoupling-field
bound, terminal exactness, Girsanov weight martingale), 2 for configuration
errors and 3 for I/O errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from mfbsde.coefficients import (
    bound_R,
    builtin_problem,
    catalog_names,
    problem_from_dict,
)
from mfbsde.mollifier import DEFAULT_ORDER, mollify_coefficients
from mfbsde.pde import DEFAULT_DELTAS, GridSpec, check_apriori, solve_decoupling_field
from mfbsde.simulate import (
    brownian_increments,
    compactness_statistics,
    reconstruct_yz,
    simulate_forward,
    simulate_malliavin,
)
from mfbsde.verify import (
    applicable_claims,
    bsde_residual,
    cauchy_convergence,
    girsanov_law_check,
    malliavin_regularity_summary,
    sobolev_flow_check,
    terminal_match,
    _jsonable,
)

log = logging.getLogger("mfbsde")

OUTPUT_ROOT_ENV = "MFBSDE_OUTPUT_ROOT"
CHECKS = ("girsanov", "residual", "cauchy", "sobolev", "malliavin")
EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: object
    levels: list
    grid: GridSpec = field(default_factory=GridSpec)
    paths: int = 10_000
    steps: int = 256
    seed: int = 0
    x0: list = field(default_factory=lambda: [0.0])
    s: float = 0.0
    checks: list = field(default_factory=lambda: ["residual"])
    output: str = "out"
    moll_args: object = "rough"
    quad_order: int = DEFAULT_ORDER
    jobs: int = 1
    field_stride: int = 10

    def __post_init__(self):
        if not self.levels:
            raise ConfigError("levels must be a nonempty list")
        if any(int(a) < 1 for a in self.levels) or any(
            int(a) >= int(b) for a, b in zip(self.levels, self.levels[1:])
        ):
            raise ConfigError(f"levels must be positive and strictly increasing: {self.levels}")
        self.levels = [int(a) for a in self.levels]
        checks = []
        for c in self.checks:
            if c == "all":
                checks.extend(CHECKS)
            elif c in CHECKS:
                checks.append(c)
            else:
                raise ConfigError(f"unknown check {c!r}; choose from {', '.join(CHECKS + ('all',))}")
        self.checks = list(dict.fromkeys(checks))
        if isinstance(self.problem, str) and self.problem not in catalog_names():
            raise ConfigError(f"unknown problem {self.problem!r}; available: {', '.join(catalog_names())}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = {
            "L": self.grid.L,
            "Nx": self.grid.Nx,
            "Nt": self.grid.Nt,
            "delta_list": list(self.grid.delta_list),
        }
        return out

    def digest(self) -> str:
        """Hash of every setting that can change the numbers (not ``output`` or ``jobs``)."""
        payload = {k: v for k, v in self.to_dict().items() if k not in ("output", "jobs")}
        blob = json.dumps(_jsonable(payload), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def output_dir(self) -> Path:
        out = Path(self.output)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def config_from_mapping(data: dict) -> RunConfig:
    """Build a :class:`RunConfig` from a parsed YAML mapping."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    if "problem" not in data:
        raise ConfigError("config is missing required key 'problem'")
    if "levels" not in data:
        raise ConfigError("config is missing required key 'levels'")
    grid = data.get("grid", {}) or {}
    sim = data.get("simulation", {}) or {}
    moll = data.get("mollifier", {}) or {}
    try:
        gspec = GridSpec(
            L=float(grid.get("L", 6.0)),
            Nx=int(grid.get("Nx", 401)),
            Nt=int(grid.get("Nt", 200)),
            delta_list=tuple(data.get("delta_list", DEFAULT_DELTAS)),
        )
        x0 = sim.get("x0", 0.0)
        return RunConfig(
            problem=data["problem"],
            levels=list(data["levels"]),
            grid=gspec,
            paths=int(sim.get("paths", 10_000)),
            steps=int(sim.get("steps", 256)),
            seed=int(sim.get("seed", 0)),
            x0=[float(u) for u in np.atleast_1d(x0)],
            s=float(sim.get("s", 0.0)),
            checks=list(data.get("checks", ["residual"])),
            output=str(data.get("output", "out")),
            moll_args=moll.get("args", "rough"),
            quad_order=int(moll.get("quad_order", DEFAULT_ORDER)),
            jobs=int(data.get("jobs", 1)),
            field_stride=int(data.get("field_stride", 10)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_mapping(data)


def resolve_problem(problem):
    if isinstance(problem, dict):
        try:
            return problem_from_dict(problem)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid custom problem: {exc}") from exc
    try:
        return builtin_problem(problem)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc


def describe_problem(name: str) -> str:
    """Human-readable summary of a catalog problem."""
    coeffs, spec, oracle = builtin_problem(name)
    flags = coeffs.flags()
    claims = applicable_claims(coeffs)
    lines = [
        f"problem      {name}",
        f"dimensions   d={spec.d}  l={spec.l}  T={spec.T:g}",
        f"sigma        {np.array2string(spec.sigma, separator=', ')}",
        f"lambda       {spec.lam:g}",
        f"constants    k1={spec.k1:g}  k2={spec.k2:g}  k3={spec.k3:g}",
        f"R            {bound_R(spec):.12g}  (k3 * exp(T * k2))",
        "flags        " + "  ".join(f"{k}={'yes' if v else 'no'}" for k, v in flags.items()),
        f"existence    {'applies' if coeffs.admissible else 'not covered (neither B1 nor B2)'}",
        "malliavin    " + ", ".join(f"{k}: {v or 'not claimed'}" for k, v in claims.items()),
    ]
    if flags["B2"] and spec.l == 1:
        sob = "X and Y on [0, T]"
    elif flags["B1"]:
        sob = "X on [0, T]" + (", Y on [0, T - delta]" if spec.l == 1 else "")
    else:
        sob = "not claimed"
    lines.append(f"sobolev flow {sob}")
    lines.append(f"oracle       {oracle.description if oracle else 'none'}")
    return "\n".join(lines)


def _subset(ens, m: int):
    m = min(m, ens.M)
    return replace(
        ens,
        M=m,
        dW=ens.dW[:m],
        X=ens.X[:m],
        Y=None if ens.Y is None else ens.Y[:m],
        Z=None if ens.Z is None else ens.Z[:m],
    )


def _run_level(cfg: RunConfig, n: int, dW: np.ndarray, problem) -> dict:
    coeffs, spec, _ = problem
    grid = cfg.grid
    mc = mollify_coefficients(coeffs, spec, n, cfg.moll_args, cfg.quad_order, box_half_width=grid.L)
    fld = solve_decoupling_field(mc, spec, grid)
    apr = check_apriori(fld, spec, grid)
    terminal_exact = bool(np.array_equal(fld.v[-1], np.asarray(mc.h(fld.nodes), dtype=float).reshape(fld.v[-1].shape)))
    ens = simulate_forward(fld, mc, spec, cfg.x0, cfg.s, cfg.steps, cfg.paths, cfg.seed, dW=dW)
    ens = reconstruct_yz(ens, fld)
    checks: dict = {"terminal_match": terminal_match(ens, coeffs.h)}
    invariants = {"R_bound": apr.bound_ok, "terminal_exact": terminal_exact}
    if "residual" in cfg.checks:
        checks["residual"] = {
            repr(dl): bsde_residual(ens, mc, dl) for dl in (0.0,) + tuple(grid.delta_list)
        }
    if "girsanov" in cfg.checks:
        t_mid = cfg.s + 0.5 * (spec.T - cfg.s)
        g = girsanov_law_check(mc, fld, spec, cfg.x0, t_mid, cfg.paths, cfg.seed, N=cfg.steps)
        checks["girsanov"] = g.to_dict()
        invariants["weight_martingale"] = g.martingale_ok
    mall = None
    if "malliavin" in cfg.checks:
        sub = _subset(ens, 2000)
        s_grid = np.linspace(cfg.s, spec.T, 9)
        mall = simulate_malliavin(sub, mc, fld, s_grid)
        checks["malliavin"] = {"sup_second_moment": mall.sup_second_moment()}
    if "sobolev" in cfg.checks:
        lim = min(3.0, grid.L / 2)
        bump = max(2 * grid.dx, 0.1)
        reg = sobolev_flow_check(
            mc, fld, spec, cfg.s, spec.T, np.linspace(-lim, lim, 31), bump,
            min(cfg.paths, 2000), cfg.seed, check_y=spec.l == 1,
        )
        checks["sobolev"] = {"weighted_norm": reg.weighted_norm, "y_norm": reg.y_norm, "bump": bump}
    return {
        "n": n,
        "coeffs": coeffs,
        "field": fld,
        "ensemble": ens,
        "malliavin": mall,
        "report": {
            "level": n,
            "apriori": apr.to_dict(),
            "invariants": invariants,
            "ensemble": {
                "M": ens.M,
                "N": ens.N,
                "exit_fraction": ens.exit_fraction,
                "drift_sup": ens.drift_sup,
                "drift_bound": ens.drift_bound,
            },
            "checks": checks,
        },
    }


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def run_pipeline(cfg: RunConfig) -> int:
    """Run every level and write ``field_n.csv``, ``ensemble_n.csv``, ``report_n.json``
    and ``convergence.json``.  Returns the process exit status."""
    problem = resolve_problem(cfg.problem)
    coeffs, spec, _ = problem
    if len(cfg.x0) not in (1, spec.d):
        raise ConfigError(f"x0 needs {spec.d} component(s)")
    out = cfg.output_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create output directory %s: %s", out, exc)
        return EXIT_IO

    digest = cfg.digest()
    name = cfg.problem if isinstance(cfg.problem, str) else cfg.problem.get("name", "custom")
    dW = brownian_increments(cfg.seed, cfg.paths, cfg.steps, spec.d, (spec.T - cfg.s) / cfg.steps)
    with ThreadPoolExecutor(max_workers=max(1, cfg.jobs)) as pool:
        results = list(pool.map(lambda n: _run_level(cfg, n, dW, problem), cfg.levels))

    failed = []
    try:
        for res in results:
            n = res["n"]
            res["field"].to_csv(out / f"field_{n}.csv", stride=cfg.field_stride)
            res["ensemble"].to_csv(out / f"ensemble_{n}.csv")
            report = dict(res["report"], problem=name, config_hash=digest)
            _dump_json(out / f"report_{n}.json", report)
            failed += [f"n={n}:{k}" for k, ok in report["invariants"].items() if not ok]

        conv: dict = {
            "problem": name,
            "config_hash": digest,
            "levels": cfg.levels,
            "terminal_match": {str(r["n"]): r["report"]["checks"]["terminal_match"] for r in results},
        }
        if len(results) >= 2:
            delta = cfg.grid.delta_list[min(2, len(cfg.grid.delta_list) - 1)]
            rep = cauchy_convergence(
                [(r["n"], r["field"], r["ensemble"]) for r in results],
                delta,
                [cfg.s + 0.5 * (spec.T - cfg.s)],
            )
            conv["cauchy"] = rep.to_dict()
        if "malliavin" in cfg.checks:
            malls = {r["n"]: r["malliavin"] for r in results}
            summary = malliavin_regularity_summary(
                malls,
                coeffs,
                {r["n"]: r["field"] for r in results},
                {r["n"]: _subset(r["ensemble"], 2000) for r in results},
                delta=cfg.grid.delta_list[min(1, len(cfg.grid.delta_list) - 1)],
            )
            conv["malliavin"] = summary.to_dict()
            try:
                conv["compactness"] = compactness_statistics(malls).to_dict()
            except ValueError as exc:
                conv["compactness"] = {"error": str(exc)}
        _dump_json(out / "convergence.json", conv)
    except OSError as exc:
        log.error("I/O error writing results: %s", exc)
        return EXIT_IO

    if failed:
        log.error("hard invariants failed: %s", ", ".join(failed))
        return EXIT_INVARIANT
    return EXIT_OK


def format_report(payload, indent: int = 0) -> str:
    """Aligned ``key  value`` text rendering of a nested report mapping."""
    lines = []
    pad = " " * indent
    width = max((len(str(k)) for k in payload), default=0)
    for k, v in payload.items():
        if isinstance(v, dict):
            lines.append(f"{pad}{k}")
            lines.append(format_report(v, indent + 2))
        elif isinstance(v, float):
            lines.append(f"{pad}{str(k):<{width}}  {v:.6g}")
        else:
            lines.append(f"{pad}{str(k):<{width}}  {v}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argparse


def _grid_arg(text: str) -> tuple:
    try:
        L, Nx, Nt = text.split(",")
        return float(L), int(Nx), int(Nt)
    except ValueError:
        raise argparse.ArgumentTypeError("--grid expects L,Nx,Nt (e.g. 6,401,200)") from None


def _int_list(text: str) -> list:
    try:
        return [int(u) for u in text.split(",") if u]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(u) for u in text.split(",") if u]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--problem", help="catalog problem name")
    p.add_argument("--problem-file", help="YAML file describing a custom problem")
    p.add_argument("--grid", type=_grid_arg, default=(6.0, 401, 200), metavar="L,Nx,Nt")
    p.add_argument("--deltas", type=_float_list, default=list(DEFAULT_DELTAS))
    p.add_argument("--moll-level", type=int, default=8)
    p.add_argument("--moll-quad-order", type=int, default=DEFAULT_ORDER)
    p.add_argument("--moll-args", choices=("rough", "all"), default="rough")
    p.add_argument("--out", default="out")


def _sim(p: argparse.ArgumentParser) -> None:
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--steps", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--x0", type=_float_list, default=[0.0])
    p.add_argument("--s", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfbsde", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("describe", help="summarise a catalog problem")
    d.add_argument("name", nargs="?", help="problem name (omit to list the catalog)")

    s = sub.add_parser("solve", help="solve the decoupling-field PDE at one level")
    _common(s)

    m = sub.add_parser("simulate", help="simulate forward paths and reconstruct Y, Z")
    _common(m)
    _sim(m)

    v = sub.add_parser("verify", help="run verification checks at one or more levels")
    _common(v)
    _sim(v)
    v.add_argument("--levels", type=_int_list, help="levels for cross-level checks")
    v.add_argument("--check", default="all", choices=CHECKS + ("all",))
    v.add_argument("--json", action="store_true", help="print JSON instead of text")

    pl = sub.add_parser("pipeline", help="full mollify/solve/simulate/verify run")
    pl.add_argument("--config", help="YAML run configuration")
    _common(pl)
    _sim(pl)
    pl.add_argument("--levels", type=_int_list, default=None)
    pl.add_argument("--checks", type=lambda t: t.split(","), default=None)
    pl.add_argument("--jobs", type=int, default=1)
    return parser


def _args_problem(args):
    if args.problem_file:
        return yaml.safe_load(Path(args.problem_file).read_text())["problem"]
    if args.problem:
        return args.problem
    raise ConfigError("missing required key 'problem' (use --problem or --problem-file)")


def _args_config(args, levels, checks) -> RunConfig:
    L, Nx, Nt = args.grid
    try:
        grid = GridSpec(L=L, Nx=Nx, Nt=Nt, delta_list=tuple(args.deltas))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        problem=_args_problem(args),
        levels=levels,
        grid=grid,
        paths=getattr(args, "paths", 10_000),
        steps=getattr(args, "steps", 256),
        seed=getattr(args, "seed", 0),
        x0=getattr(args, "x0", [0.0]),
        s=getattr(args, "s", 0.0),
        checks=checks,
        output=args.out,
        moll_args=args.moll_args,
        quad_order=args.moll_quad_order,
        jobs=getattr(args, "jobs", 1),
    )


def _cmd_solve(args) -> int:
    cfg = _args_config(args, [args.moll_level], [])
    coeffs, spec, _ = resolve_problem(cfg.problem)
    mc = mollify_coefficients(coeffs, spec, args.moll_level, cfg.moll_args, cfg.quad_order, cfg.grid.L)
    fld = solve_decoupling_field(mc, spec, cfg.grid)
    apr = check_apriori(fld, spec)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    fld.to_csv(out / f"field_{args.moll_level}.csv")
    _dump_json(out / f"apriori_{args.moll_level}.json", apr.to_dict())
    print(format_report(_jsonable(apr.to_dict())))
    return EXIT_OK if apr.bound_ok else EXIT_INVARIANT


def _cmd_simulate(args) -> int:
    cfg = _args_config(args, [args.moll_level], [])
    coeffs, spec, _ = resolve_problem(cfg.problem)
    mc = mollify_coefficients(coeffs, spec, args.moll_level, cfg.moll_args, cfg.quad_order, cfg.grid.L)
    fld = solve_decoupling_field(mc, spec, cfg.grid)
    ens = reconstruct_yz(simulate_forward(fld, mc, spec, cfg.x0, cfg.s, cfg.steps, cfg.paths, cfg.seed), fld)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    ens.to_csv(out / f"ensemble_{args.moll_level}.csv")
    print(format_report({"paths": ens.M, "steps": ens.N, "exit_fraction": ens.exit_fraction,
                         "drift_sup": ens.drift_sup, "terminal_match": terminal_match(ens, coeffs.h)}))
    return EXIT_OK


def _cmd_verify(args) -> int:
    levels = args.levels or [args.moll_level]
    cfg = _args_config(args, levels, [args.check])
    code = run_pipeline(cfg)
    out = cfg.output_dir()
    payload = {f"level {n}": json.loads((out / f"report_{n}.json").read_text())["checks"] for n in cfg.levels}
    payload["convergence"] = json.loads((out / "convergence.json").read_text())
    print(json.dumps(payload, indent=2) if args.json else format_report(payload))
    return code


def _cmd_pipeline(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        if args.levels is None:
            raise ConfigError("missing required key 'levels' (use --levels or --config)")
        cfg = _args_config(args, args.levels, args.checks or ["residual"])
    return run_pipeline(cfg)


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "describe":
            if not args.name:
                print("\n".join(catalog_names()))
                return EXIT_OK
            try:
                print(describe_problem(args.name))
            except KeyError as exc:
                print(f"error: {exc.args[0]}", file=sys.stderr)
                return EXIT_CONFIG
            return EXIT_OK
        handler = {
            "solve": _cmd_solve,
            "simulate": _cmd_simulate,
            "verify": _cmd_verify,
            "pipeline": _cmd_pipeline,
        }[args.command]
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO



def load_schema(kind: str) -> dict:
    """Published JSON schema for ``"report"`` or ``"convergence"`` outputs."""
    from importlib import resources

    return json.loads(resources.files("mfbsde").joinpath("schemas", f"{kind}.schema.json").read_text())


if __name__ == "__main__":
    sys.exit(main())
