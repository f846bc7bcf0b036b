"""Run configuration: INI-style text, field expressions, presets and validation.

Grammar (``key = value`` lines, ``#`` or ``;`` comments)::

    [model]     kind = small | large
                material = quadratic | neo-hookean | mooney-rivlin | barotropic | referential-neo-hookean
                regularization = full-prox | simplified-cap
    [grid]      n = 32, 32          length = 1.0          topology = periodic
    [material]  K_E, G_E, G_MR, epsilon_reg, a, gamma, rho_ref, yosida_eps
    [scheme]    tau, final_time | steps, eps, delta, mu, p_exp, q_exp, r_exp, rho_max,
                K_V, G_V, G_M (or R), nu, tol_rel, tol_abs, max_iter, max_halvings
    [initial]   preset = equilibrium | smooth | uniaxial | random, amplitude, seed,
                rho, v_x, v_y, v_z, E_xx ... E_xy, F_11 ... F_33  (expressions in x, y, z)
    [gravity]   g_x, g_y, g_z  (expressions in t)
    [output]    snapshot_every = 0, csv = audit.csv, seed = 0

Expressions use numbers, ``x y z t pi``, ``+ - * / **`` and ``sin cos exp``.
"""
from __future__ import annotations

import ast
import configparser
import math
import operator
from dataclasses import dataclass, field, replace

import numpy as np

from .fields import Grid
from .materials import (BarotropicFluid, IsotropicQuadraticEnergy, MooneyRivlin, NeoHookean, ReferentialNeoHookean,
                        YosidaRegularizedEnergy)
from .stepper_large import make_initial_large
from .stepper_small import SchemeParams, make_initial_small
from .tensor import SYM_INDEX, det

__all__ = [
    "ConfigParseError", "ConfigValidationError", "Violation", "RunConfig", "parse_config", "evaluate_expression",
    "compile_expression", "build_material", "build_initial", "build_gravity", "PRESETS", "MATERIALS",
]

PRESETS = ("equilibrium", "smooth", "uniaxial", "random")
MATERIALS = {
    "small": ("quadratic",),
    "large": ("neo-hookean", "mooney-rivlin", "barotropic", "referential-neo-hookean"),
}
_CALIBRATION = {"neo-hookean": "none", "mooney-rivlin": "mooney_rivlin", "barotropic": "none",
                "referential-neo-hookean": "jalpha"}
_SECTIONS = {
    "model": {"kind", "material", "regularization"},
    "grid": {"n", "length", "topology"},
    "material": {"k_e", "g_e", "g_mr", "epsilon_reg", "a", "gamma", "rho_ref", "yosida_eps"},
    "scheme": {"tau", "final_time", "steps", "eps", "delta", "mu", "p_exp", "q_exp", "r_exp", "rho_max", "k_v",
               "g_v", "g_m", "r", "nu", "tol_rel", "tol_abs", "max_iter", "max_halvings"},
    "initial": {"preset", "amplitude", "seed", "rho", "v_x", "v_y", "v_z"}
    | {f"e_{'xyz'[i]}{'xyz'[j]}" for i, j in SYM_INDEX}
    | {f"f_{i}{j}" for i in range(1, 4) for j in range(1, 4)},
    "gravity": {"g_x", "g_y", "g_z"},
    "output": {"snapshot_every", "csv", "seed"},
}


class ConfigParseError(ValueError):
    """Malformed text; ``line`` and ``column`` are 1-based (0 when unknown)."""

    def __init__(self, message, line: int = 0, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}" if line else message)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Violation:
    key: str
    message: str
    hypothesis: str

    def __str__(self):
        return f"{self.key}: {self.message} [hypothesis: {self.hypothesis}]"


class ConfigValidationError(ValueError):
    """Every violated assumption, not just the first."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(str(v) for v in self.violations))


# --- expressions ----------------------------------------------------------------
_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
           ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_CONSTS = {"pi": math.pi}


def compile_expression(text: str, variables=("x", "y", "z")):
    """Parse ``text`` into a callable of the named variables; rejects anything outside the grammar."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigParseError(f"bad expression {text!r}: {exc.msg}", 0, exc.offset or 0) from None

    def check(node):
        if isinstance(node, ast.Expression):
            return check(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return
        if isinstance(node, ast.Name):
            if node.id not in variables and node.id not in _CONSTS:
                raise ConfigParseError(f"unknown name {node.id!r} in {text!r}", 0, node.col_offset + 1)
            return
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            return check(node.operand)
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            if node.func.id not in _FUNCS:
                raise ConfigParseError(f"unknown function {node.func.id!r} in {text!r}", 0, node.col_offset + 1)
            if len(node.args) == 1 and not node.keywords:
                return check(node.args[0])
        raise ConfigParseError(f"unsupported syntax in {text!r}", 0, getattr(node, "col_offset", 0) + 1)

    check(tree)

    def ev(node, env):
        if isinstance(node, ast.Expression):
            return ev(node.body, env)
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else _CONSTS[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](ev(node.left, env), ev(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](ev(node.operand, env))
        return _FUNCS[node.func.id](ev(node.args[0], env))

    def fn(**env):
        with np.errstate(all="ignore"):
            return ev(tree, env)

    return fn


def evaluate_expression(text: str, **env):
    return compile_expression(text, tuple(env))(**env)


# --- the config object ------------------------------------------------------------
@dataclass
class RunConfig:
    model: str
    material_name: str
    regularization: str
    grid: Grid
    material: dict
    params: SchemeParams
    steps: int
    initial: dict
    gravity: dict = field(default_factory=dict)
    snapshot_every: int = 0
    csv_name: str = "audit.csv"
    seed: int = 0
    override_unsafe: bool = False
    flags: list = field(default_factory=list)
    text: str = ""

    @property
    def final_time(self) -> float:
        return self.steps * self.params.tau

    def with_tau(self, tau: float) -> "RunConfig":
        steps = self.final_time / tau
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError(f"tau={tau} does not divide the final time {self.final_time}")
        return replace(self, params=replace(self.params, tau=tau), steps=int(round(steps)))


def _read(text):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigParseError("text before the first [section] header", exc.lineno, 1) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigParseError(f"duplicate section [{exc.section}]", exc.lineno or 0, 1) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigParseError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno or 0, 1) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0]
        bad = text.splitlines()[lineno - 1].strip()
        raise ConfigParseError(f"cannot parse {bad!r} (expected key = value)", lineno, 1) from None
    lines = text.splitlines()

    def locate(section, key):
        sec = None
        for i, raw in enumerate(lines, 1):
            s = raw.strip()
            if s.startswith("[") and s.endswith("]"):
                sec = s[1:-1].strip().lower()
            elif sec == section and s.split("=", 1)[0].strip().lower() == key:
                return i, raw.index("=") + 2 if "=" in raw else 1
        return 0, 0

    return cp, locate


def parse_config(text: str, override_unsafe: bool = False) -> RunConfig:
    """Parse and validate a run configuration.

    Raises :class:`ConfigParseError` for malformed text (with line/column) and
    :class:`ConfigValidationError` listing every violated assumption.  With
    ``override_unsafe`` the exponent and regularization hypotheses become
    flags instead of errors; positivity of the initial data is always required.
    """
    cp, locate = _read(text)
    errors: list = []
    unsafe: list = []

    for sec in cp.sections():
        if sec.lower() not in _SECTIONS:
            line, _ = locate(sec.lower(), "")
            raise ConfigParseError(f"unknown section [{sec}]", line, 1)
        for key in cp[sec]:
            if key not in _SECTIONS[sec.lower()]:
                line, col = locate(sec.lower(), key)
                raise ConfigParseError(f"unknown key {key!r} in [{sec}]", line, 1)

    def get(sec, key, default=None, conv=float):
        if not cp.has_option(sec, key):
            return default
        raw = cp.get(sec, key)
        try:
            if conv is float and raw.strip().lower() in ("inf", "infinity"):
                return math.inf
            return conv(raw)
        except ValueError:
            line, col = locate(sec, key)
            raise ConfigParseError(f"[{sec}] {key} = {raw!r} is not a valid {conv.__name__}", line, col) from None

    model = get("model", "kind", None, str)
    if model is None:
        raise ConfigValidationError([Violation("model.kind", "missing", "model kind is small or large")])
    model = model.strip().lower()
    if model not in MATERIALS:
        raise ConfigValidationError([Violation("model.kind", f"{model!r} unknown", "model kind is small or large")])
    material_name = get("model", "material", MATERIALS[model][0], str).strip().lower()
    if material_name not in MATERIALS[model]:
        errors.append(Violation("model.material", f"{material_name!r} is not a {model}-model material",
                                f"material in {MATERIALS[model]}"))
    regularization = get("model", "regularization", "full-prox", str).strip().lower()
    if regularization not in ("full-prox", "simplified-cap"):
        errors.append(Violation("model.regularization", f"{regularization!r} unknown",
                                "regularization is full-prox or simplified-cap"))

    n_raw = get("grid", "n", "32, 32", str)
    try:
        n = tuple(int(k) for k in n_raw.replace(",", " ").split())
    except ValueError:
        line, col = locate("grid", "n")
        raise ConfigParseError(f"grid n = {n_raw!r} is not a list of integers", line, col) from None
    length = get("grid", "length", 1.0)
    topology = get("grid", "topology", "periodic", str).strip().lower()
    grid = None
    if topology != "periodic":
        errors.append(Violation("grid.topology", f"{topology!r} not supported by the steppers",
                                "periodic domain"))
    else:
        try:
            grid = Grid.uniform(n, length, topology)
        except ValueError as exc:
            errors.append(Violation("grid.n", str(exc), "resolvable grid (1-3 dims, >= 4 cells each)"))

    mat = {"K_E": get("material", "k_e", 1.0), "G_E": get("material", "g_e", 1.0),
           "G_MR": get("material", "g_mr", 0.0), "epsilon_reg": get("material", "epsilon_reg", None),
           "a": get("material", "a", 1.0), "gamma": get("material", "gamma", 1.4),
           "rho_ref": get("material", "rho_ref", 1.0), "yosida_eps": get("material", "yosida_eps", None)}
    for key in ("K_E", "G_E"):
        if not mat[key] > 0:
            errors.append(Violation(f"material.{key}", f"{mat[key]} <= 0", "positive elastic moduli"))

    G_M = get("scheme", "g_m", None)
    R = get("scheme", "r", None)
    if G_M is not None and R is not None:
        errors.append(Violation("scheme.G_M", "give G_M or R, not both", "R = 1/G_M"))
    if R is not None:
        G_M = math.inf if R == 0 else 1.0 / R if R > 0 else -1.0
    G_M = math.inf if G_M is None else G_M
    tau = get("scheme", "tau", 1e-3)
    sp = dict(tau=tau, eps=get("scheme", "eps", 1e-6), delta=get("scheme", "delta", 1e-4),
              mu=get("scheme", "mu", 1e-6), p_exp=get("scheme", "p_exp", 4.0), q_exp=get("scheme", "q_exp", 4.0),
              r_exp=get("scheme", "r_exp", 4.0), rho_max=get("scheme", "rho_max", None),
              K_V=get("scheme", "k_v", 0.0), G_V=get("scheme", "g_v", 0.0), G_M=G_M, nu=get("scheme", "nu", 0.0),
              tol_rel=get("scheme", "tol_rel", 1e-10), tol_abs=get("scheme", "tol_abs", 1e-12),
              max_iter=get("scheme", "max_iter", 50, int), max_halvings=get("scheme", "max_halvings", 4, int))

    hard = [("tau", "time step tau > 0", sp["tau"] > 0), ("G_M", "Maxwell modulus G_M > 0 (R >= 0)", sp["G_M"] > 0),
            ("K_V", "Stokes viscosity K_V >= 0", sp["K_V"] >= 0), ("G_V", "Stokes viscosity G_V >= 0", sp["G_V"] >= 0),
            ("nu", "plastic-gradient viscosity nu >= 0", sp["nu"] >= 0), ("mu", "hyperviscosity mu >= 0", sp["mu"] >= 0),
            ("rho_max", "cut-off threshold rho_max > 0", sp["rho_max"] is None or sp["rho_max"] > 0)]
    for key, hyp, ok in hard:
        if not ok:
            errors.append(Violation(f"scheme.{key}", f"{sp[key]} violates the bound", hyp))
    soft = [("p_exp", "hyperviscosity exponent p > 3", sp["p_exp"] > 3),
            ("r_exp", "density-diffusion exponent r > 3", sp["r_exp"] > 3),
            ("q_exp", "plastic-gradient exponent q > 3", model != "large" or sp["nu"] == 0 or sp["q_exp"] > 3),
            ("eps", "regularization eps >= 0", sp["eps"] >= 0),
            ("delta", "regularization delta >= 0", sp["delta"] >= 0)]
    for key, hyp, ok in soft:
        if not ok:
            v = Violation(f"scheme.{key}", f"{sp[key]} outside the analysed regime", hyp)
            (unsafe if override_unsafe else errors).append(v)
    if model == "large" and regularization == "full-prox":
        yeps = mat["yosida_eps"] if mat["yosida_eps"] is not None else sp["eps"]
        if not yeps > 0:
            errors.append(Violation("material.yosida_eps", f"{yeps} <= 0", "Yosida parameter eps > 0 (full-prox)"))

    final_time = get("scheme", "final_time", None)
    steps = get("scheme", "steps", None, int)
    if steps is None:
        if final_time is None:
            steps = 10
        elif tau > 0:
            steps = int(round(final_time / tau))
            if abs(steps * tau - final_time) > 1e-9 * max(1.0, final_time):
                errors.append(Violation("scheme.final_time", "not a multiple of tau", "tau divides final_time"))
    if steps is not None and steps < 0:
        errors.append(Violation("scheme.steps", "negative", "steps >= 0"))

    initial = {"preset": get("initial", "preset", "smooth", str).strip().lower(),
               "amplitude": get("initial", "amplitude", 1.0), "seed": get("initial", "seed", 0, int), "exprs": {}}
    if initial["preset"] not in PRESETS:
        errors.append(Violation("initial.preset", f"{initial['preset']!r} unknown", f"preset in {PRESETS}"))
    if cp.has_section("initial"):
        for key in cp["initial"]:
            if key in ("preset", "amplitude", "seed"):
                continue
            try:
                compile_expression(cp["initial"][key], ("x", "y", "z"))
            except ConfigParseError as exc:
                line, col = locate("initial", key)
                raise ConfigParseError(str(exc), line, col + max(exc.column - 1, 0)) from None
            initial["exprs"][key] = cp["initial"][key]
    gravity = {}
    if cp.has_section("gravity"):
        for key in cp["gravity"]:
            try:
                compile_expression(cp["gravity"][key], ("t",))
            except ConfigParseError as exc:
                line, col = locate("gravity", key)
                raise ConfigParseError(str(exc), line, col + max(exc.column - 1, 0)) from None
            gravity[key] = cp["gravity"][key]

    snapshot_every = get("output", "snapshot_every", 0, int)
    csv_name = get("output", "csv", "audit.csv", str).strip()
    seed = get("output", "seed", 0, int)

    params = None
    if not any(v.key.startswith("scheme.") for v in errors):
        try:
            params = SchemeParams(**sp, allow_unsafe=True)
        except ValueError as exc:
            errors.append(Violation("scheme", str(exc), "scheme parameter bounds"))
        else:
            params = replace(params, allow_unsafe=bool(unsafe))
    elif grid is not None:
        # still check the initial data so every violation is reported at once
        probe = RunConfig(model, material_name, regularization, grid, mat, None, 0, initial)
        errors.extend(v for v in _validate_initial(probe) if v.key.startswith("initial."))
    cfg = None
    if params is not None and grid is not None:
        cfg = RunConfig(model, material_name, regularization, grid, mat, params, steps, initial, gravity,
                        snapshot_every, csv_name, seed, override_unsafe, [v.hypothesis for v in unsafe]
                        + [f"{w} = 0 (outside the analysed regime)" for w in params.outside_regime()], text)
        errors.extend(_validate_initial(cfg))
    if errors:
        raise ConfigValidationError(errors)
    return cfg


# --- builders ---------------------------------------------------------------------
def build_material(cfg: RunConfig):
    m = cfg.material
    if cfg.model == "small":
        return IsotropicQuadraticEnergy(m["K_E"], m["G_E"])
    name = cfg.material_name
    if name == "neo-hookean":
        base = NeoHookean(m["K_E"], m["G_E"], m["epsilon_reg"])
    elif name == "mooney-rivlin":
        base = MooneyRivlin(m["K_E"], m["G_E"], m["epsilon_reg"], G_MR=m["G_MR"])
    elif name == "barotropic":
        base = BarotropicFluid(m["a"], m["gamma"], m["rho_ref"])
    else:
        base = ReferentialNeoHookean(m["K_E"], m["G_E"])
    eps = m["yosida_eps"] if m["yosida_eps"] is not None else cfg.params.eps
    if cfg.regularization == "simplified-cap":
        eps = max(eps, 0.0)
    return YosidaRegularizedEnergy(base, eps=eps, delta=cfg.params.delta, mode=cfg.regularization)


def _coords3(grid):
    c = grid.coords()
    z = np.zeros(grid.shape)
    return [c[k] if k < grid.dims else z for k in range(3)]


def _smooth_random(rng, grid, modes: int = 3):
    """Zero-mean smooth periodic field with unit max-norm built from low Fourier modes."""
    x = _coords3(grid)
    L = [k * h for k, h in zip(grid.n, grid.h)] + [1.0] * (3 - grid.dims)
    out = np.zeros(grid.shape)
    for _ in range(modes * grid.dims):
        k = rng.integers(0, 3, size=3)
        k[grid.dims:] = 0
        if not np.any(k):
            k[0] = 1
        phase = rng.uniform(0, 2 * np.pi)
        arg = sum(2 * np.pi * k[d] * x[d] / L[d] for d in range(3))
        out += rng.standard_normal() * np.cos(arg + phase)
    out -= out.mean()
    return out / max(np.max(np.abs(out)), 1e-300)


def _preset(cfg: RunConfig):
    grid = cfg.grid
    a = cfg.initial["amplitude"]
    x, y, z = _coords3(grid)
    L = [k * h for k, h in zip(grid.n, grid.h)] + [1.0] * (3 - grid.dims)
    kx, ky = 2 * np.pi * x / L[0], 2 * np.pi * y / L[1]
    rho = np.ones(grid.shape)
    v = np.zeros(grid.shape + (3,))
    E = np.zeros(grid.shape + (6,))
    F = np.broadcast_to(np.eye(3), grid.shape + (3, 3)).copy()
    preset = cfg.initial["preset"]
    if preset == "smooth":
        rho = 1.0 + 0.2 * a * np.sin(kx) * np.cos(ky)
        v[..., 0] = 0.1 * a * np.sin(ky)
        v[..., 1] = 0.1 * a * np.sin(kx)
        E[..., 0] = 0.01 * a * np.cos(kx)
        E[..., 5] = 0.01 * a * np.sin(ky)
        F[..., 0, 0] += 0.05 * a * np.cos(kx)
        F[..., 0, 1] += 0.05 * a * np.sin(ky)
    elif preset == "uniaxial":
        E[..., 0] = 0.01 * a * np.sin(kx)
        F[..., 0, 0] += 0.05 * a * np.sin(kx)
    elif preset == "random":
        rng = np.random.default_rng(cfg.initial["seed"])
        rho = 1.0 + 0.5 * a * _smooth_random(rng, grid)
        for i in range(grid.dims):
            v[..., i] = 0.1 * a * _smooth_random(rng, grid)
        for k in range(6):
            E[..., k] = 0.01 * a * _smooth_random(rng, grid)
        for i in range(3):
            for j in range(3):
                F[..., i, j] += 0.05 * a * _smooth_random(rng, grid)
    return rho, v, E, F


def _initial_fields(cfg: RunConfig):
    rho, v, E, F = _preset(cfg)
    x, y, z = _coords3(cfg.grid)
    shp = cfg.grid.shape
    for key, text in cfg.initial["exprs"].items():
        val = np.broadcast_to(compile_expression(text)(x=x, y=y, z=z), shp)
        if key == "rho":
            rho = np.array(val, dtype=float)
        elif key.startswith("v_"):
            v[..., "xyz".index(key[2])] = val
        elif key.startswith("e_"):
            i, j = "xyz".index(key[2]), "xyz".index(key[3])
            k = [n for n, (a, b) in enumerate(SYM_INDEX) if {a, b} == {i, j}][0]
            E[..., k] = val
        elif key.startswith("f_"):
            F[..., int(key[2]) - 1, int(key[3]) - 1] = val
    return rho, v, E, F


def _validate_initial(cfg: RunConfig):
    out = []
    rho, v, E, F = _initial_fields(cfg)
    for name, arr in (("rho", rho), ("v", v), ("E", E), ("F", F)):
        if not np.all(np.isfinite(arr)):
            out.append(Violation(f"initial.{name}", "non-finite values", "finite initial data"))
    if np.all(np.isfinite(rho)) and not np.min(rho) > 0:
        out.append(Violation("initial.rho", f"min rho0 = {np.min(rho):.6g}", "positive initial density (min rho0 > 0)"))
    if cfg.model == "large" and np.all(np.isfinite(F)):
        j = det(F)
        if not np.min(j) > 0:
            out.append(Violation("initial.F", f"min det F0 = {np.min(j):.6g}",
                                 "positive initial Jacobian (min det F0 > 0)"))
    if cfg.params is not None and cfg.params.rho_max is not None and np.all(np.isfinite(rho)) and np.max(rho) > cfg.params.rho_max:
        out.append(Violation("scheme.rho_max", f"max rho0 = {np.max(rho):.6g} exceeds rho_max",
                             "initial density below the cut-off threshold"))
    return out


def build_initial(cfg: RunConfig):
    rho, v, E, F = _initial_fields(cfg)
    if cfg.model == "small":
        return make_initial_small(cfg.grid, rho, v, E)
    cal = _CALIBRATION[cfg.material_name]
    alpha = ReferentialNeoHookean.alpha if cal == "jalpha" else 0.0
    return make_initial_large(cfg.grid, rho, v, F, cal, alpha)


def build_gravity(cfg: RunConfig):
    """``None`` for no gravity, else ``g(t) -> 3-vector`` (spatially uniform)."""
    if not cfg.gravity:
        return None
    fns = [compile_expression(cfg.gravity.get(f"g_{c}", "0"), ("t",)) for c in "xyz"]
    return lambda t: np.array([float(f(t=t)) for f in fns])
