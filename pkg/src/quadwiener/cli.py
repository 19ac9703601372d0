"""Command-line front end.

Every subcommand evaluates one job, prints (or writes) a JSON envelope

    {schema, command, inputs, results[], diagnostics, pass, timestamp}

and exits with 0 on success, 2 on a bad job specification, 3 when routes
disagree beyond tolerance and 4 on a numeric failure.  Options come from
flags or a flat key=value file given with --config; flags win.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import kernel as K
from . import laplace as L
from . import montecarlo as mc
from . import pinned as P
from . import special as S
from .errors import BadParams, NotIntegrable, NumericFailure, QuadWienerError, SpecError
from .feynmankac import (fk_normalization_check, fk_setup, g2_area_marginal, g2_heat_kernel, g2_total_mass,
                         gaussian_density, mehler_density, mehler_density_oscillatory)
from .sigma import constant, levy_area_sigma

SCHEMA = 1
EXIT_OK, EXIT_SPEC, EXIT_TOL, EXIT_NUMERIC = 0, 2, 3, 4

# single source for every default tolerance; --tol-route and --tol override
TOLERANCES: dict[str, float] = {
    "route": 5e-3,          # relative gap between Laplace routes
    "pinned": 1e-4,         # relative gap between pinned routes
    "poly": 1e-8,           # |stochastic - classical| / max(1, |classical|)
    "soliton": 1e-8,        # max |v - analytic 1-soliton|
    "kdv_residual": 1e-3,   # max |v_t - 3/2 v v_x - 1/4 v_xxx|
    "fk_pointwise": 1e-5,   # relative gap to the closed-form density
    "fk_norm": 1e-4,        # relative gap of int p_T(x, y) dy to the Laplace route
    "heat_marginal": 1e-4,  # |int p_T(x, a) da - g_T(x)|
    "heat_mass": 1e-3,      # |total mass - 1|
    "mc_sigmas": 3.0,       # MC agreement in standard errors
}

COMMANDS = ("laplace", "fk", "heatkernel", "kdv", "poly", "pinned", "mc")
LAPLACE_FAMILIES = ("zero", "kac", "levy-area", "const-sigma", "sample-variance", "custom-csv")
PINNED_FAMILIES = ("const-sigma", "sample-variance", "levy-area")


# ---------------------------------------------------------------- value parsers


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise BadParams(f"not a boolean: {text!r}")


def _floats(text) -> list[float]:
    """Comma list `a,b,c` or linspace `lo:hi:count`."""
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise BadParams(f"grid must be lo:hi:count, got {text!r}")
        lo, hi, cnt = float(parts[0]), float(parts[1]), int(parts[2])
        if cnt < 1:
            raise BadParams("grid count must be positive")
        return [float(v) for v in np.linspace(lo, hi, cnt)]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise BadParams(f"bad number list {text!r}") from exc


def _tol_pair(text) -> tuple[str, float]:
    if "=" not in str(text):
        raise BadParams(f"tolerance override must be key=value, got {text!r}")
    k, v = str(text).split("=", 1)
    k = k.strip()
    if k not in TOLERANCES:
        raise BadParams(f"unknown tolerance {k!r}")
    return k, float(v)


# (flag, dest, parser, default, help, commands); commands None means all
OPTIONS: list[tuple[str, str, Callable, Any, str, tuple[str, ...] | None]] = [
    ("--family", "family", str, None, "functional family", ("laplace", "pinned", "mc", "fk")),
    ("--T", "T", float, 1.0, "horizon", None),
    ("--d", "d", int, None, "path dimension (family default if omitted)", None),
    ("--grid-n", "grid_n", int, 256, "grid size of the discretised operator", None),
    ("--ode-steps", "ode_steps", int, 1024, "RK4 steps", None),
    ("--seed", "seed", int, 0, "Monte Carlo seed", None),
    ("--paths", "paths", int, None, "Monte Carlo paths (0 disables MC)", None),
    ("--steps", "steps", int, None, "Monte Carlo time steps", None),
    ("--out", "out", str, None, "CSV output path", None),
    ("--tol-route", "tol_route", float, None, "override the route tolerance", None),
    ("--lambda", "lam", float, None, "Kac / Mehler parameter", ("laplace", "mc", "fk")),
    ("--beta", "beta", float, 1.0, "Levy area multiplier", ("laplace", "mc")),
    ("--fourier", "fourier", _bool, False, "characteristic function instead of Laplace", ("laplace", "mc")),
    ("--c", "c", float, None, "constant sigma = c I", ("laplace", "mc", "pinned")),
    ("--D", "D", float, 1.0, "sample-variance weight D I", ("laplace", "mc", "pinned")),
    ("--path", "path", str, None, "kernel CSV for custom-csv", ("laplace", "mc")),
    ("--mc", "mc", _bool, False, "add a Monte Carlo route", ("laplace",)),
    ("--a", "a", float, None, "drift phi = a (fk) or area frequency (pinned levy-area)", ("fk", "pinned")),
    ("--oscillatory", "oscillatory", _bool, False, "psi = +lambda^2 instead of -lambda^2", ("fk",)),
    ("--x", "x", _floats, None, "x grid (lo:hi:count or list)", ("fk", "heatkernel", "kdv", "mc")),
    ("--y", "y", _floats, None, "y grid", ("fk",)),
    ("--area", "area", _floats, None, "area grid", ("heatkernel",)),
    ("--mass", "mass", _bool, False, "also check the total mass", ("heatkernel",)),
    ("--n", "n", int, None, "number of solitons", ("kdv",)),
    ("--eta", "eta", _floats, None, "soliton eigenvalues", ("kdv",)),
    ("--m", "m", _floats, None, "norming constants", ("kdv",)),
    ("--t", "t", _floats, None, "time grid", ("kdv",)),
    ("--bernoulli", "bernoulli", int, None, "Bernoulli polynomial order", ("poly",)),
    ("--euler", "euler", int, None, "Euler polynomial order", ("poly",)),
    ("--eulerian-a", "eulerian_a", int, None, "Eulerian polynomial (type A) order", ("poly",)),
    ("--eulerian-b", "eulerian_b", int, None, "Eulerian polynomial (type B) order", ("poly",)),
    ("--xi", "xi", _floats, None, "evaluation points", ("poly",)),
    ("--N", "N", int, None, "number of pinned coordinates", ("pinned",)),
    ("--eps", "eps", float, 0.1, "pinning bandwidth", ("pinned",)),
    ("--p", "p", _floats, None, "OU drift diagonal (mc family ou-psi)", ("mc",)),
    ("--weights", "weights", _floats, None, "OU weights c (mc family ou-psi)", ("mc",)),
    ("--figures", "figures", _bool, False, "also render a PNG next to --out (needs matplotlib)", None),
]

BOOL_DESTS = {dest for _, dest, kind, *_ in OPTIONS if kind is _bool}
# config and sweep keys are flag names without dashes, e.g. grid_n=128 or lambda=0.5
KEY_TO_DEST = {flag.lstrip("-").replace("-", "_"): dest for flag, dest, *_ in OPTIONS}
# alias -> (command, flag)
ALIASES = {"--grid": ("kdv", "--x")}


@dataclass
class JobSpec:
    command: str
    options: dict
    tolerances: dict
    sweep: tuple[str, list] | None = None
    json_path: str | None = None

    def get(self, key, default=None):
        v = self.options.get(key)
        return default if v is None else v

    def to_json(self) -> dict:
        opts = {k: v for k, v in sorted(self.options.items()) if v is not None}
        out = {"command": self.command, "options": opts, "tolerances": dict(sorted(self.tolerances.items()))}
        if self.sweep:
            out["sweep"] = {"key": self.sweep[0], "values": self.sweep[1]}
        return out


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quadwiener", description="Quadratic Wiener functionals by several routes.")
    parser.add_argument("--show-tolerances", action="store_true", help="print the default tolerance table")
    sub = parser.add_subparsers(dest="command")
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="flat key=value file; flags win")
        p.add_argument("--json", help="write the JSON envelope here instead of stdout")
        p.add_argument("--tol", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                       help="override any tolerance")
        p.add_argument("--sweep", default=argparse.SUPPRESS, metavar="KEY=V1,V2",
                       help="run the job once per value of one option")
        for flag, dest, kind, _, help_, cmds in OPTIONS:
            if cmds is not None and cmd not in cmds:
                continue
            names = [flag] + [a for a, (c, target) in ALIASES.items() if c == cmd and target == flag]
            if kind is _bool:
                p.add_argument(*names, dest=dest, action="store_true", default=argparse.SUPPRESS, help=help_)
            else:
                p.add_argument(*names, dest=dest, type=str, default=argparse.SUPPRESS, help=help_)
    return parser


def _convert(dest: str, raw) -> Any:
    for _, d, kind, *_ in OPTIONS:
        if d == dest:
            try:
                return kind(raw)
            except (TypeError, ValueError) as exc:
                raise BadParams(f"bad value for {dest}: {raw!r}") from exc
    raise BadParams(f"unknown option {dest!r}")


def _allowed(cmd: str) -> set[str]:
    return {dest for _, dest, _, _, _, cmds in OPTIONS if cmds is None or cmd in cmds}


def make_job(ns: argparse.Namespace) -> JobSpec:
    cmd = ns.command
    given = dict(vars(ns))
    for k in ("command", "config", "json", "show_tolerances"):
        given.pop(k, None)
    merged: dict[str, Any] = {}
    allowed = _allowed(cmd)
    tol_items: list[str] = []
    sweep_raw = None
    if ns.config:
        from .kernel import read_keyvalue

        for key, raw in read_keyvalue(ns.config).items():
            dest = KEY_TO_DEST.get(key.replace("-", "_"), key.replace("-", "_"))
            if dest == "tol":
                tol_items.extend(r for r in raw.split(";") if r.strip())
                continue
            if dest == "sweep":
                sweep_raw = raw
                continue
            if dest not in allowed:
                raise BadParams(f"unknown config key {key!r} for {cmd}")
            merged[dest] = _convert(dest, raw)
    tol_items.extend(given.pop("tol", []))
    sweep_raw = given.pop("sweep", sweep_raw)
    for dest, raw in given.items():
        merged[dest] = True if dest in BOOL_DESTS else _convert(dest, raw)
    opts = {dest: default for _, dest, _, default, _, cmds in OPTIONS if cmds is None or cmd in cmds}
    opts.update(merged)
    tols = dict(TOLERANCES)
    if opts.get("tol_route") is not None:
        tols["route"] = opts["tol_route"]
    for item in tol_items:
        k, v = _tol_pair(item)
        tols[k] = v
    sweep = None
    if sweep_raw is not None:
        if "=" not in sweep_raw:
            raise BadParams("sweep must be key=v1,v2,...")
        key, vals = sweep_raw.split("=", 1)
        key = key.strip().replace("-", "_")
        key = KEY_TO_DEST.get(key, key)
        if key not in allowed:
            raise BadParams(f"cannot sweep unknown option {key!r}")
        sweep = (key, [_convert(key, v) for v in vals.split(",") if v.strip()])
    return JobSpec(cmd, opts, tols, sweep, ns.json)


# ---------------------------------------------------------------- helpers


def _rel(a, b) -> float:
    scale = max(abs(b), 1e-300)
    return abs(a - b) / scale


def _pairwise(values: dict[str, float]) -> dict[str, float]:
    names = list(values)
    out = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            out[f"{a}~{b}"] = _rel(values[a], values[b])
    return out


def _batch(job: JobSpec, d: int, default_paths: int = mc.DEFAULT_PATHS,
           default_steps: int = mc.DEFAULT_STEPS) -> mc.PathBatch | None:
    paths = job.get("paths", default_paths)
    if paths == 0:
        return None
    return mc.PathBatch(paths, job.get("steps", default_steps), job.get("T"), d, job.get("seed"))


def _dim(job: JobSpec, default: int, fixed: int | None = None) -> int:
    d = job.get("d", default)
    if fixed is not None and d != fixed:
        raise BadParams(f"this family needs d = {fixed}")
    if d < 1:
        raise BadParams("need d >= 1")
    return d


def _write_csv(path, header: list[str], rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(float(v)) for v in r])


def _figure(job: JobSpec, draw: Callable) -> str | None:
    if not job.get("figures"):
        return None
    out = job.get("out")
    if out is None:
        raise BadParams("--figures needs --out")
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise BadParams("--figures needs matplotlib (install the 'plot' extra)") from exc
    fig, ax = plt.subplots(figsize=(6, 4))
    draw(ax)
    png = str(Path(out).with_suffix(".png"))
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return png


@dataclass
class Outcome:
    results: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    passed: bool = True
    files: list = field(default_factory=list)


# ---------------------------------------------------------------- laplace


@dataclass
class Case:
    """Deterministic routes plus an optional MC sampler for one family."""

    routes: dict
    details: dict
    sampler: Callable[[mc.PathBatch], mc.MCEstimate] | None
    d: int


def _laplace_case(job: JobSpec, with_ode: bool = True) -> Case:
    fam = job.get("family")
    if fam is None:
        raise BadParams(f"--family is required ({', '.join(LAPLACE_FAMILIES)})")
    T, n, steps = job.get("T"), job.get("grid_n"), job.get("ode_steps")
    routes: dict[str, float] = {}
    details: dict[str, dict] = {}

    def add(res: L.LaplaceResult, name: str | None = None):
        name = name or res.route
        routes[name] = float(res.value.real) if isinstance(res.value, complex) else float(res.value)
        details[name] = res.to_json()["diagnostics"]

    if fam == "zero":
        d = _dim(job, 1)
        add(L.laplace_spectral(K.builtin_kernel("zero", d=d, n=n, T=T)))
        if with_ode:
            for r in L.laplace_ode(constant(np.zeros((d, d)), T), steps=steps).values():
                add(r)
        routes["closed_form"] = 1.0
        sampler = lambda b: mc.estimate_exp(constant(np.zeros((d, d)), T), batch=b)
    elif fam == "kac":
        d = _dim(job, 1, 1)
        lam = job.get("lam", 0.5)
        if lam < 0:
            raise BadParams("Kac needs lambda >= 0")
        add(L.kac_laplace(lam, n, T))
        ind = K.builtin_kernel("indicator", {"scale": math.sqrt(2 * lam)}, 1, n, T)
        add(L.harmonic_laplace(ind), "harmonic")
        routes["product"] = L.kac_product(lam, T=T)

        def sampler(b):
            sq = mc.simulate(b, {"sq": mc.SquareIntegral()})["sq"]
            return mc.estimate_functional(np.exp(-lam * sq), b)
    elif fam == "levy-area":
        d = _dim(job, 2, 2)
        beta = job.get("beta")
        kern = K.builtin_kernel("levy_area", d=2, n=n, T=T)
        sigma = levy_area_sigma(T)
        if job.get("fourier"):
            routes["closed_form"] = L.closed_form_levy_area(beta * T)
            routes["spectral"] = float(np.exp(L.log_charfn_eigen(K.spectrum(kern), beta)).real)
            if with_ode:
                routes["charfn_ode"] = float(L.charfn_ode(sigma, beta, steps).real)
            sampler = lambda b: _real(mc.estimate_exp(sigma, batch=b, scale=1j * beta))
        else:
            if abs(beta * T) >= math.pi:
                raise NotIntegrable("the area Laplace transform needs |beta T| < pi")
            routes["closed_form"] = float(L.levy_area_joint(beta * T, 0.0).real)
            add(L.laplace_spectral(kern.scaled(beta)))
            if with_ode:
                scaled = constant(beta * sigma(0.0), T)
                for r in L.laplace_ode(scaled, steps=steps).values():
                    add(r)
            sampler = lambda b: mc.estimate_exp(constant(beta * sigma(0.0), T), batch=b)
    elif fam == "const-sigma":
        d = _dim(job, 1)
        c = job.get("c", 0.3)
        if c * T >= 1:
            raise NotIntegrable("const-sigma needs c T < 1")
        sig = constant(c * np.eye(d), T)
        routes["closed_form"] = (math.exp(-0.5 * c * T) / math.sqrt(1 - c * T)) ** d
        add(L.laplace_spectral(K.builtin_kernel("rho_sigma", {"sigma": sig}, d, n, T)))
        if with_ode:
            for r in L.laplace_ode(sig, steps=steps).values():
                add(r)
        sampler = lambda b: mc.estimate_exp(sig, batch=b)
    elif fam == "sample-variance":
        d = _dim(job, 1)
        D = job.get("D")
        kern = K.builtin_kernel("sample_variance", {"D": D}, d, n, T).scaled(-1.0)
        routes["closed_form"] = _bridge_oracle(D, T) ** d
        add(L.laplace_spectral(kern))
        sampler = lambda b: mc.estimate_exp(K.builtin_kernel("sample_variance", {"D": D}, d, b.n_steps, T)
                                            .scaled(-1.0), batch=b)
    elif fam == "custom-csv":
        if job.get("path") is None:
            raise BadParams("custom-csv needs --path")
        kern = K.builtin_kernel("custom_csv", {"path": job.get("path")}, n=n)
        d = kern.d
        add(L.laplace_spectral(kern))
        sampler = lambda b: mc.estimate_exp(K.builtin_kernel("custom_csv", {"path": job.get("path")}, n=b.n_steps),
                                            batch=b)
    else:
        raise BadParams(f"unknown family {fam!r} ({', '.join(LAPLACE_FAMILIES)})")
    return Case(routes, details, sampler, d)


def _real(est: mc.MCEstimate) -> mc.MCEstimate:
    return mc.MCEstimate(float(complex(est.mean).real), est.stderr, est.n_paths, est.seed)


def _bridge_oracle(D: float, T: float) -> float:
    """E[exp(q)] for q = -q_{D(min(t,s) - ts/T)}: (x / sinh x)^{1/2} e^{D T^2/12}, x = T sqrt(D)."""
    if D > 0:
        x = T * math.sqrt(D)
        ratio = x / math.sinh(x)
    elif D < 0:
        x = T * math.sqrt(-D)
        if x >= math.pi:
            raise NotIntegrable("need T sqrt(-D) < pi")
        ratio = x / math.sin(x)
    else:
        ratio = 1.0
    return math.sqrt(ratio) * math.exp(D * T**2 / 12.0)


def cmd_laplace(job: JobSpec) -> Outcome:
    case = _laplace_case(job)
    deltas = _pairwise(case.routes)
    tol = job.tolerances["route"]
    ok = all(v <= tol for v in deltas.values())
    res = {"family": job.get("family"), "routes": case.routes, "deltas": deltas, "tolerance": tol, "pass": ok}
    if job.get("mc"):
        batch = _batch(job, case.d)
        if batch is not None:
            est = case.sampler(batch)
            ref = next(iter(case.routes.values()))
            k = job.tolerances["mc_sigmas"]
            res["mc"] = {**est.to_json(), "reference": ref, "within": est.within(ref, k), "sigmas": k}
            ok = ok and res["mc"]["within"]
            res["pass"] = ok
    return Outcome([res], {"route_details": case.details, "grid_n": job.get("grid_n"),
                           "ode_steps": job.get("ode_steps")}, ok)


# ---------------------------------------------------------------- mc


def cmd_mc(job: JobSpec) -> Outcome:
    k = job.tolerances["mc_sigmas"]
    if job.get("family") == "ou-psi":
        p = job.get("p", [1.0])
        c = job.get("weights", [1.0] * len(p))
        if len(c) != len(p):
            raise BadParams("--p and --weights need equal lengths")
        measure = S.DiscreteMeasure.from_points(p, c)
        xs = job.get("x", [1.0])
        results, ok = [], True
        for x in xs:
            exact = S.psi_via_ode(measure, x)
            est = mc.estimate_psi(measure.p, measure.c, x, job.get("paths", mc.DEFAULT_PATHS),
                                  job.get("steps", mc.DEFAULT_STEPS), job.get("seed"))
            w = est.within(exact, k)
            ok = ok and w
            results.append({"x": x, "psi_ode": exact, "mc": est.to_json(), "within": w})
        return Outcome(results, {"sigmas": k, "steps": job.get("steps", mc.DEFAULT_STEPS)}, ok)
    case = _laplace_case(job, with_ode=False)
    batch = _batch(job, case.d)
    if batch is None:
        raise BadParams("mc needs --paths > 0")
    est = case.sampler(batch)
    ref_name, ref = next(iter(case.routes.items()))
    w = est.within(ref, k)
    res = {"family": job.get("family"), "mc": est.to_json(), "reference": {ref_name: ref}, "within": w,
           "sigmas": k}
    return Outcome([res], {"steps": batch.n_steps, "paths": batch.n_paths, "seed": batch.seed,
                           "grid_n": job.get("grid_n")}, w)


# ---------------------------------------------------------------- fk


def cmd_fk(job: JobSpec) -> Outcome:
    fam = job.get("family", "mehler")
    if fam != "mehler":
        raise BadParams("fk supports --family mehler (phi = a, psi = -/+ lambda^2, d = 1)")
    _dim(job, 1, 1)
    T = job.get("T")
    a = job.get("a", 0.0)
    lam = job.get("lam", 1.0)
    osc = job.get("oscillatory")
    phi = constant(a, T)
    psi = constant((1.0 if osc else -1.0) * lam**2, T)
    steps = job.get("ode_steps")
    dens = fk_setup(phi, psi, steps)
    oracle = mehler_density_oscillatory if osc else mehler_density
    xs = job.get("x", [-1.0, 0.0, 1.0])
    ys = job.get("y", [-1.0, 0.0, 1.0])
    rows, worst = [], 0.0
    for x in xs:
        for y in ys:
            v = dens(x, y)
            worst = max(worst, _rel(v, oracle(lam, a, x, y, T)))
            rows.append((x, y, v))
    norms = [fk_normalization_check(phi, psi, x, steps=steps)["rel_diff"] for x in xs]
    ok_pt = worst <= job.tolerances["fk_pointwise"]
    ok_norm = max(norms) <= job.tolerances["fk_norm"]
    out = Outcome([{"family": fam, "points": len(rows), "max_rel_vs_closed_form": worst, "pass_pointwise": ok_pt,
                    "normalization_rel": dict(zip(map(repr, xs), norms)), "pass_normalization": ok_norm}],
                  {"ode_steps": steps, "a": a, "lambda": lam, "oscillatory": osc}, ok_pt and ok_norm)
    if job.get("out"):
        _write_csv(job.get("out"), ["x", "y", "value"], rows)
        out.files.append(job.get("out"))
        png = _figure(job, lambda ax: _scatter(ax, rows, "x", "y"))
        if png:
            out.files.append(png)
    else:
        out.results[0]["values"] = [list(r) for r in rows]
    return out


def _scatter(ax, rows, xl, yl):
    arr = np.array(rows)
    sc = ax.scatter(arr[:, 0], arr[:, 1], c=arr[:, -1])
    ax.set_xlabel(xl)
    ax.set_ylabel(yl)
    ax.figure.colorbar(sc, ax=ax)


# ---------------------------------------------------------------- heat kernel


def cmd_heatkernel(job: JobSpec) -> Outcome:
    _dim(job, 2, 2)
    T = job.get("T")
    xs = job.get("x", [-1.0, 0.0, 1.0])
    areas = job.get("area", [-0.5, 0.0, 0.5])
    rows = []
    for x1 in xs:
        for x2 in xs:
            vals = np.atleast_1d(g2_heat_kernel(np.array([x1, x2]), np.array(areas), T))
            rows.extend((x1, x2, av, v) for av, v in zip(areas, vals))
    gaps = [abs(g2_area_marginal([x1, x2], T) - gaussian_density(T * np.eye(2), [x1, x2])) for x1 in xs for x2 in xs]
    ok = max(gaps) <= job.tolerances["heat_marginal"]
    res = {"points": len(rows), "max_marginal_gap": max(gaps), "pass_marginal": ok}
    if job.get("mass"):
        mass = g2_total_mass(T)
        res.update({"total_mass": mass, "pass_mass": abs(mass - 1) <= job.tolerances["heat_mass"]})
        ok = ok and res["pass_mass"]
    out = Outcome([res], {"T": T}, ok)
    if job.get("out"):
        _write_csv(job.get("out"), ["x1", "x2", "a", "value"], rows)
        out.files.append(job.get("out"))
        png = _figure(job, lambda ax: _scatter(ax, [(r[0], r[2], r[3]) for r in rows if r[1] == xs[0]], "x1", "a"))
        if png:
            out.files.append(png)
    else:
        res["values"] = [list(r) for r in rows]
    return out


# ---------------------------------------------------------------- kdv


def cmd_kdv(job: JobSpec) -> Outcome:
    eta = job.get("eta", [1.0])
    m = job.get("m", [2.0] * len(eta))
    if job.get("n") is not None and job.get("n") != len(eta):
        raise BadParams(f"--n {job.get('n')} but {len(eta)} eigenvalues given")
    s = S.ScatteringData(np.array(eta), np.array(m))
    xs = np.array(job.get("x", _floats("-5:5:41")))
    ts = np.array(job.get("t", [0.0]))
    surf = S.soliton_surface(s, xs, ts)
    resid = float(np.max(np.abs(S.kdv_residual(s, xs, ts))))
    ok = resid <= job.tolerances["kdv_residual"]
    res = {"n": s.n, "eta": eta, "m": m, "kdv_residual": resid, "pass_residual": ok}
    if s.n == 1:
        analytic = np.array([-S.one_soliton_potential(eta[0], m[0] * math.exp(-2 * eta[0] ** 3 * t), xs) for t in ts])
        err = float(np.max(np.abs(surf - analytic)))
        res.update({"max_vs_analytic": err, "pass_analytic": err <= job.tolerances["soliton"]})
        ok = ok and res["pass_analytic"]
    if len(ts) == 1:
        res["peaks"] = S.peak_positions(s, xs, float(ts[0]), s.n).tolist()
    rows = [(x, t, surf[i, j]) for i, t in enumerate(ts) for j, x in enumerate(xs)]
    out = Outcome([res], {"x_nodes": xs.size, "t_nodes": ts.size, "stencil_step": S.KDV_STEP}, ok)
    if job.get("out"):
        _write_csv(job.get("out"), ["x", "t", "value"], rows)
        out.files.append(job.get("out"))

        def draw(ax):
            for i, t in enumerate(ts):
                ax.plot(xs, surf[i], label=f"t = {t:g}")
            ax.set_xlabel("x")
            ax.legend()
        png = _figure(job, draw)
        if png:
            out.files.append(png)
    else:
        res["values"] = [list(r) for r in rows]
    return out


# ---------------------------------------------------------------- poly


POLY_KINDS = {
    "bernoulli": (S.bernoulli_poly, S.classical_bernoulli),
    "euler": (S.euler_poly, S.classical_euler),
    "eulerian_a": (S.eulerian_poly_A, S.classical_eulerian_A),
    "eulerian_b": (S.eulerian_poly_B, S.classical_eulerian_B),
}


def cmd_poly(job: JobSpec) -> Outcome:
    chosen = [(k, job.get(k)) for k in POLY_KINDS if job.get(k) is not None]
    if len(chosen) != 1:
        raise BadParams("give exactly one of --bernoulli, --euler, --eulerian-a, --eulerian-b")
    kind, n = chosen[0]
    stochastic, classical = POLY_KINDS[kind]
    tol = job.tolerances["poly"]
    results, ok = [], True
    for xi in job.get("xi", [0.0]):
        v = stochastic(n, xi)
        ref = float(classical(n, xi))
        delta = abs(v - ref) / max(1.0, abs(ref))
        results.append({"kind": kind, "n": n, "xi": xi, "stochastic": v, "classical": ref, "delta": delta,
                        "pass": delta <= tol})
        ok = ok and delta <= tol
    return Outcome(results, {"tolerance": tol}, ok)


# ---------------------------------------------------------------- pinned


def cmd_pinned(job: JobSpec) -> Outcome:
    fam = job.get("family")
    T, n, steps = job.get("T"), job.get("grid_n"), job.get("ode_steps")
    tol = job.tolerances["pinned"]
    routes: dict[str, float] = {}
    details: dict[str, dict] = {}
    if fam == "levy-area":
        d = _dim(job, 2, 2)
        a = job.get("a", 1.0)
        N = job.get("N", 2)
        if N != 2:
            raise BadParams("levy-area pins both coordinates (N = 2)")
        routes["closed_form"] = L.levy_area_conditional(a * T) / (2 * math.pi * T)
        mc_eta, scale = levy_area_sigma(T), 1j * a
    elif fam in ("const-sigma", "sample-variance"):
        d = _dim(job, 1)
        N = job.get("N", d)
        if not 0 <= N <= d:
            raise BadParams("need 0 <= N <= d")
        if fam == "const-sigma":
            c = job.get("c", 0.5)
            sig = constant(c * np.eye(d), T)
            family = P.rho_sigma_family(sig, n)
            free = (math.exp(-0.5 * c * T) / math.sqrt(1 - c * T)) if c * T < 1 else math.nan
            routes["closed_form"] = ((2 * math.pi * T) ** -0.5 * math.exp(-0.5 * c * T)) ** N * free ** (d - N)
            mc_eta, scale = sig, 1.0
        else:
            D = job.get("D")
            family = P.sample_variance_family(D, d, T, n)
            mc_eta, scale = None, 1.0
        for route in ("ode", "discrete"):
            r = P.plucker_pinned(family, N, route=route, steps=steps)
            routes[r.route] = float(r.value)
            details[r.route] = {k: v for k, v in r.to_json()["diagnostics"].items() if k != "Phi"}
        g = P.pinned_general(family, family.pins(), N=N)
        routes["pinned_general"] = float(g.value)
        details["pinned_general"] = g.to_json()["diagnostics"]
        if N == 0:
            spec_val = L.laplace_spectral(family.operator()).value * math.exp(family.discrete_constant())
            routes["spectral"] = float(spec_val)
    else:
        raise BadParams(f"unknown pinned family {fam!r} ({', '.join(PINNED_FAMILIES)})")
    deltas = _pairwise(routes)
    ok = all(v <= tol for v in deltas.values())
    res = {"family": fam, "N": N, "routes": routes, "deltas": deltas, "tolerance": tol, "pass_routes": ok}
    batch = _batch(job, d, mc.DEFAULT_PINNED_PATHS, 128)
    if batch is not None:
        k = job.tolerances["mc_sigmas"]
        if fam == "sample-variance":
            mc_eta = K.builtin_kernel("sample_variance", {"D": job.get("D")}, d, batch.n_steps, T).scaled(-1.0)
        pe = mc.pinned_estimate(mc_eta, N, job.get("eps"), batch, scale=scale)
        ref = next(iter(routes.values()))
        if fam == "sample-variance":
            shift = math.exp(-T**2 / 12.0 * d * job.get("D"))
            pe = _scaled_pinned(pe, shift)
        ext = pe.extrapolated
        if isinstance(ext.mean, complex):
            pe = _scaled_pinned(pe, 1.0, real=True)
        w = pe.within(ref, k)
        res["mc"] = {**pe.to_json(), "reference": ref, "within": w, "sigmas": k}
        ok = ok and w
    res["pass"] = ok
    return Outcome([res], {"route_details": details, "grid_n": n, "ode_steps": steps}, ok)


def _scaled_pinned(pe: mc.PinnedEstimate, factor: float, real: bool = False) -> mc.PinnedEstimate:
    def f(e: mc.MCEstimate) -> mc.MCEstimate:
        m = complex(e.mean).real if real else e.mean
        return mc.MCEstimate(m * factor, e.stderr * factor, e.n_paths, e.seed)
    return mc.PinnedEstimate(pe.eps, f(pe.at_eps), f(pe.at_2eps), f(pe.extrapolated), pe.ess)


HANDLERS: dict[str, Callable[[JobSpec], Outcome]] = {
    "laplace": cmd_laplace, "fk": cmd_fk, "heatkernel": cmd_heatkernel, "kdv": cmd_kdv,
    "poly": cmd_poly, "pinned": cmd_pinned, "mc": cmd_mc,
}


# ---------------------------------------------------------------- driver


def run_job(job: JobSpec) -> tuple[dict, int]:
    """Evaluate a job and return (envelope, exit code)."""
    handler = HANDLERS[job.command]
    env = {"schema": SCHEMA, "command": job.command, "inputs": job.to_json(), "results": [],
           "diagnostics": {}, "pass": False}
    code = EXIT_OK
    try:
        if job.sweep:
            key, values = job.sweep
            passed, diags = True, []
            for v in values:
                sub = JobSpec(job.command, {**job.options, key: v}, job.tolerances)
                o = handler(sub)
                env["results"].extend({"sweep": {key: v}, **r} for r in o.results)
                diags.append({key: v, **o.diagnostics})
                passed = passed and o.passed
            env["diagnostics"] = {"sweep": diags}
        else:
            o = handler(job)
            env["results"] = o.results
            env["diagnostics"] = o.diagnostics
            passed = o.passed
            if o.files:
                env["files"] = o.files
        env["pass"] = passed
        if not passed:
            code = EXIT_TOL
    except SpecError as exc:
        env["error"] = {"type": type(exc).__name__, "message": str(exc)}
        code = EXIT_SPEC
    except NumericFailure as exc:
        env["error"] = {"type": type(exc).__name__, "message": str(exc)}
        code = EXIT_NUMERIC
    env["diagnostics"] = L.jsonable(env["diagnostics"])
    env["results"] = L.jsonable(env["results"])
    env["exit_code"] = code
    env["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return env, code


def dumps(env: dict) -> str:
    return json.dumps(env, indent=2, sort_keys=True, allow_nan=True)


def show_tolerances() -> str:
    width = max(map(len, TOLERANCES))
    return "\n".join(f"{k:<{width}}  {v:g}" for k, v in TOLERANCES.items())


def _join_negative(argv: list[str]) -> list[str]:
    """Rewrite `--x -1:1:3` as `--x=-1:1:3` so argparse does not read the value as a flag."""
    out: list[str] = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if (tok.startswith("--") and "=" not in tok and i + 1 < len(argv)
                and re.match(r"^-[\d.]", argv[i + 1])):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = _join_negative(list(sys.argv[1:] if argv is None else argv))
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.show_tolerances:
        print(show_tolerances())
        return EXIT_OK
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_SPEC
    try:
        job = make_job(ns)
    except (QuadWienerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    env, code = run_job(job)
    text = dumps(env)
    if job.json_path:
        Path(job.json_path).parent.mkdir(parents=True, exist_ok=True)
        Path(job.json_path).write_text(text + "\n")
        status = "PASS" if env["pass"] else ("FAIL" if code == EXIT_TOL else "ERROR")
        print(f"{status} {job.command} -> {job.json_path}")
    else:
        print(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
