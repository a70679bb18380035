"""Run configuration: JSON schema, formula evaluation, object construction.

A config file describes the background (grid + base curvature + torsion),
the initial conformal factor, the stepper, and per-command parameters.
Analytic fields are given as formula strings over the coordinates x1..x{2n}
with sin/cos/exp, pi and arithmetic; this keeps runs reproducible without
code changes.
"""

from __future__ import annotations

import ast
import hashlib
import json
import math

import numpy as np

from .errors import ConfigError, SnapshotFormatError
from .fields import CovectorField, ScalarField, TorusGrid, read_snapshot
from .flow import SCHEMES, StepperConfig
from .geometry import Background, canonical_initial, normalize_conformal

_ALLOWED_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}

_ALLOWED_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def evaluate_formula(expr: str, grid: TorusGrid) -> np.ndarray:
    """Evaluate a whitelisted arithmetic expression at the grid points.

    Grammar: numbers, pi, coordinates x1..x{2n}, sin/cos/exp, + - * / **
    and unary minus.  Anything else is rejected.
    """
    names = {f"x{i + 1}": coord for i, coord in enumerate(grid.coordinates())}
    names["pi"] = math.pi
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as err:
        raise ConfigError(f"formula {expr!r}: {err}") from None

    def ev(node):
        if isinstance(node, ast.Constant):
            if isinstance(node.value, (int, float)):
                return float(node.value)
            raise ConfigError(f"formula {expr!r}: literal {node.value!r} "
                              "not allowed")
        if isinstance(node, ast.Name):
            if node.id in names:
                return names[node.id]
            raise ConfigError(f"formula {expr!r}: unknown name {node.id!r}")
        if isinstance(node, ast.BinOp) and type(node.op) in _ALLOWED_BINOPS:
            return _ALLOWED_BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub,
                                                                  ast.UAdd)):
            val = ev(node.operand)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Call):
            if (isinstance(node.func, ast.Name)
                    and node.func.id in _ALLOWED_FUNCS
                    and not node.keywords and len(node.args) == 1):
                return _ALLOWED_FUNCS[node.func.id](ev(node.args[0]))
            raise ConfigError(f"formula {expr!r}: only sin/cos/exp calls "
                              "with one argument are allowed")
        raise ConfigError(f"formula {expr!r}: disallowed syntax "
                          f"({type(node).__name__})")

    values = ev(tree.body)
    out = np.empty(grid.shape)
    out[...] = values
    return out


def _require(mapping, key, kind, where):
    if key not in mapping:
        raise ConfigError(f"{where}: missing required key {key!r}")
    value = mapping[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{where}: key {key!r} must be {kind}, "
                          f"got {type(value).__name__}")
    return value


def _scalar_from_spec(spec, grid, where):
    if not isinstance(spec, dict):
        raise ConfigError(f"{where}: expected an object with one of "
                          "'formula' | 'constant' | 'snapshot'")
    if "formula" in spec:
        return ScalarField(grid, evaluate_formula(spec["formula"], grid))
    if "constant" in spec:
        return ScalarField(grid, np.full(grid.shape, float(spec["constant"])))
    if "snapshot" in spec:
        try:
            return read_snapshot(spec["snapshot"], grid=grid)
        except (OSError, SnapshotFormatError) as err:
            raise ConfigError(f"{where}: {err}") from None
    raise ConfigError(f"{where}: need one of 'formula' | 'constant' "
                      "| 'snapshot'")


def background_from_descriptor(desc: dict) -> Background:
    where = "background"
    n = _require(desc, "complex_dim", int, where)
    periods = _require(desc, "periods", list, where)
    resolution = _require(desc, "resolution", list, where)
    try:
        grid = TorusGrid(n, periods, resolution)
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None
    s_base = _scalar_from_spec(_require(desc, "s_base", dict, where),
                               grid, f"{where}.s_base")
    torsion = None
    tspec = desc.get("torsion")
    if tspec is not None:
        if "formulas" in tspec:
            formulas = tspec["formulas"]
            if len(formulas) != grid.real_dim:
                raise ConfigError(f"{where}.torsion: need {grid.real_dim} "
                                  "component formulas")
            comps = tuple(evaluate_formula(s, grid) for s in formulas)
        elif "snapshots" in tspec:
            paths = tspec["snapshots"]
            if len(paths) != grid.real_dim:
                raise ConfigError(f"{where}.torsion: need {grid.real_dim} "
                                  "component snapshots")
            comps = tuple(
                _scalar_from_spec({"snapshot": p}, grid,
                                  f"{where}.torsion").values
                for p in paths)
        else:
            raise ConfigError(f"{where}.torsion: need 'formulas' or "
                              "'snapshots'")
        torsion = CovectorField(grid, comps)
    try:
        return Background(grid, s_base, torsion)
    except Exception as err:
        raise ConfigError(f"{where}: {err}") from None


def initial_from_spec(spec, bg: Background) -> ScalarField:
    where = "initial"
    if not isinstance(spec, dict):
        raise ConfigError(f"{where}: expected an object with a 'kind'")
    kind = _require(spec, "kind", str, where)
    grid = bg.grid
    if kind == "zero":
        return normalize_conformal(ScalarField(grid, np.zeros(grid.shape)))
    if kind == "canonical":
        return canonical_initial(bg)
    if kind == "snapshot":
        path = _require(spec, "path", str, where)
        try:
            f = read_snapshot(path, grid=grid)
        except (OSError, SnapshotFormatError) as err:
            raise ConfigError(f"{where}: {err}") from None
        return normalize_conformal(f)
    if kind == "mode":
        amplitude = float(spec.get("amplitude", 0.1))
        axis = int(spec.get("axis", 0))
        wavenumber = int(spec.get("wavenumber", 1))
        waveform = spec.get("waveform", "sin")
        if not (0 <= axis < grid.real_dim):
            raise ConfigError(f"{where}: axis {axis} out of range")
        if waveform not in ("sin", "cos"):
            raise ConfigError(f"{where}: waveform must be 'sin' or 'cos'")
        coord = grid.coordinates()[axis]
        wave = 2.0 * np.pi * wavenumber * coord / grid.periods[axis]
        vals = amplitude * (np.sin(wave) if waveform == "sin"
                            else np.cos(wave))
        field = ScalarField(grid, np.broadcast_to(vals, grid.shape).copy())
        return normalize_conformal(field)
    raise ConfigError(f"{where}: unknown kind {kind!r}")


def stepper_from_dict(d) -> StepperConfig:
    d = dict(d or {})
    unknown = set(d) - {"scheme", "dt_init", "cfl_safety", "renormalize_mass",
                        "t_end", "snapshot_every", "divergence_threshold",
                        "dealias"}
    if unknown:
        raise ConfigError(f"stepper: unknown keys {sorted(unknown)}")
    if "scheme" in d and d["scheme"] not in SCHEMES:
        raise ConfigError(f"stepper: scheme must be one of {SCHEMES}")
    try:
        return StepperConfig(**d)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"stepper: {err}") from None


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    if "background" not in cfg:
        raise ConfigError("config: missing 'background'")
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=True)


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(canonical_json(resolved).encode()).hexdigest()[:12]
