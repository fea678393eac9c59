"""
Problem instances: mode dynamics, transition rates, boundary data, controls.

A problem is read from a JSON document::

    {
      "model": {"d": 1, "n": 2, "rate_scaling": "unit",
                "modes": [{"drift": ["-x1 + 0.6"], "sigma": {"kind": "constant", "entries": "1"}},
                          {"drift": ["-x1 - 1"],   "sigma": {"kind": "constant", "entries": "1"}}],
                "rates": [[null, "1"], ["2", null]]},
      "domain": {"kind": "interval", "params": {"lo": -1, "hi": 1}},
      "boundary": {"g": ["1 + x1", "5"]},
      "controls": {...},          # optional
      "experiment": {...}         # optional
    }

Controls, when present, are folded into the effective drifts of the modes
only through :func:`exitlab.pde.policy_iteration_eigen`; the ``modes[].drift``
entries are always the effective drifts.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np

from . import fieldlang as fl
from .domain import DomainError, DomainGeometry

__all__ = [
    "ConfigError", "ModeDynamics", "SwitchingModel", "ControlFamily",
    "BoundaryData", "EpsilonLadder", "ExperimentSettings", "Problem",
    "load_problem", "dump_problem", "problem_to_config", "validate_model",
    "ValidationReport", "state_names",
]

RATE_SCALINGS = ("unit", "inverse_eps")


class ConfigError(ValueError):
    """Schema violation, bad expression or inconsistent dimensions in a config."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def state_names(d: int) -> list[str]:
    return [f"x{i + 1}" for i in range(d)]


def _text(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError(f"expected an expression string or number, got {type(v).__name__}")
    return repr(float(v))


def _parse_field(value, names: Sequence[str], key: str) -> fl.Expr:
    try:
        return fl.parse(_text(value), names)
    except fl.FieldSyntaxError as exc:
        raise ConfigError(key, f"expression error: {exc}") from None
    except TypeError as exc:
        raise ConfigError(key, str(exc)) from None


class _Field:
    """A parsed expression plus its vectorized evaluator over ``x1..xd`` (and extras)."""

    __slots__ = ("expr", "names", "fn")

    def __init__(self, expr: fl.Expr, names: Sequence[str]):
        self.expr = expr
        self.names = list(names)
        self.fn = fl.compile_numpy(expr, self.names)

    def __call__(self, x: np.ndarray, *extra) -> np.ndarray:
        cols = [x[..., i] for i in range(x.shape[-1])]
        return self.fn(*cols, *extra)

    @property
    def text(self) -> str:
        return fl.to_source(self.expr)

    @property
    def is_constant(self) -> bool:
        return not fl.variables_of(self.expr)


@dataclass(frozen=True, eq=False)
class ModeDynamics:
    """Effective drift and diffusion of one mode; ``a = sigma sigma^T``."""

    drift_fields: tuple
    sigma_fields: tuple  # d x d tuple of _Field
    sigma_kind: str = "full"
    sigma_entries: Any = None

    @property
    def d(self) -> int:
        return len(self.drift_fields)

    def drift(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.stack([f(x) for f in self.drift_fields], axis=-1)

    def sigma(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        rows = [np.stack([f(x) for f in row], axis=-1) for row in self.sigma_fields]
        return np.stack(rows, axis=-2)

    def a(self, x) -> np.ndarray:
        s = self.sigma(x)
        return s @ np.swapaxes(s, -1, -2)

    def to_config(self) -> dict:
        return {"drift": [f.text for f in self.drift_fields],
                "sigma": {"kind": self.sigma_kind, "entries": self.sigma_entries}}

    @classmethod
    def from_config(cls, cfg: dict, d: int, key: str) -> "ModeDynamics":
        names = state_names(d)
        drift = cfg.get("drift")
        if isinstance(drift, (str, int, float)):
            drift = [drift]
        if not isinstance(drift, list):
            raise ConfigError(f"{key}.drift", "must be a list of d expressions")
        if len(drift) != d:
            raise ConfigError(f"{key}.drift", f"dimension mismatch: {len(drift)} components for d = {d}")
        drift_fields = tuple(_Field(_parse_field(e, names, f"{key}.drift[{i}]"), names)
                             for i, e in enumerate(drift))
        sig = cfg.get("sigma", {"kind": "constant", "entries": "1"})
        if not isinstance(sig, dict):
            raise ConfigError(f"{key}.sigma", "must be an object with kind and entries")
        kind = sig.get("kind")
        entries = sig.get("entries")
        skey = f"{key}.sigma.entries"
        zero = fl.Num(0.0)
        if kind == "constant":
            if isinstance(entries, list):
                raise ConfigError(skey, "constant sigma takes a single expression")
            e = _parse_field(entries, names, skey)
            mat = [[e if i == j else zero for j in range(d)] for i in range(d)]
            text_entries = fl.to_source(e)
        elif kind == "diagonal":
            if not isinstance(entries, list) or len(entries) != d:
                raise ConfigError(skey, f"dimension mismatch: diagonal sigma needs {d} entries")
            diag = [_parse_field(v, names, f"{skey}[{i}]") for i, v in enumerate(entries)]
            mat = [[diag[i] if i == j else zero for j in range(d)] for i in range(d)]
            text_entries = [fl.to_source(v) for v in diag]
        elif kind == "full":
            if (not isinstance(entries, list) or len(entries) != d
                    or any(not isinstance(r, list) or len(r) != d for r in entries)):
                raise ConfigError(skey, f"dimension mismatch: full sigma needs a {d}x{d} list")
            mat = [[_parse_field(v, names, f"{skey}[{i}][{j}]") for j, v in enumerate(r)]
                   for i, r in enumerate(entries)]
            text_entries = [[fl.to_source(v) for v in r] for r in mat]
        else:
            raise ConfigError(f"{key}.sigma.kind", f"must be constant, diagonal or full, got {kind!r}")
        sigma_fields = tuple(tuple(_Field(e, names) for e in row) for row in mat)
        return cls(drift_fields, sigma_fields, kind, text_entries)


@dataclass(frozen=True, eq=False)
class ControlFamily:
    """Raw controlled drifts ``f_k(x, u)`` with finite control sets ``U_k``."""

    values: tuple  # per mode: tuple of floats
    drift_fields: tuple  # per mode: tuple of d _Field over (x1..xd, u)

    def drift(self, k: int, x, u) -> np.ndarray:
        """Controlled drift of mode ``k`` (1-based) at states ``x`` with controls ``u``."""
        x = np.asarray(x, dtype=float)
        u = np.broadcast_to(np.asarray(u, dtype=float), x.shape[:-1])
        return np.stack([f(x, u) for f in self.drift_fields[k - 1]], axis=-1)

    def to_config(self) -> dict:
        return {"modes": [{"values": list(v), "drift": [f.text for f in fs]}
                          for v, fs in zip(self.values, self.drift_fields)]}

    @classmethod
    def from_config(cls, cfg: dict, d: int, n: int) -> "ControlFamily":
        modes = cfg.get("modes")
        if not isinstance(modes, list) or len(modes) != n:
            raise ConfigError("controls.modes", f"needs one entry per mode (n = {n})")
        names = state_names(d) + ["u"]
        values, drifts = [], []
        for k, m in enumerate(modes):
            vals = m.get("values")
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"controls.modes[{k}].values", "must be a non-empty list of numbers")
            values.append(tuple(float(v) for v in vals))
            dr = m.get("drift")
            if isinstance(dr, str):
                dr = [dr]
            if not isinstance(dr, list) or len(dr) != d:
                raise ConfigError(f"controls.modes[{k}].drift", f"dimension mismatch: needs {d} expressions")
            drifts.append(tuple(_Field(_parse_field(e, names, f"controls.modes[{k}].drift[{i}]"), names)
                                for i, e in enumerate(dr)))
        return cls(tuple(values), tuple(drifts))


@dataclass(frozen=True, eq=False)
class SwitchingModel:
    """``n`` modes of (drift, diffusion) on R^d with state-dependent switching rates.

    ``rate_scaling`` selects how rates enter the process at noise level eps:
    ``"unit"`` uses ``gamma_km(x)`` as given, ``"inverse_eps"`` uses
    ``gamma_km(x) / eps`` (fast switching).  The large-deviations Hamiltonian
    always uses the unscaled ``gamma``.
    """

    d: int
    n: int
    modes: tuple
    rate_fields: tuple  # n x n, None on the diagonal
    rate_scaling: str = "unit"
    controls: ControlFamily | None = None

    def drift(self, k: int, x) -> np.ndarray:
        """Effective drift of mode ``k`` (1-based)."""
        return self.modes[k - 1].drift(x)

    def drifts(self, x) -> np.ndarray:
        """All effective drifts, shape ``(..., n, d)``."""
        return np.stack([m.drift(x) for m in self.modes], axis=-2)

    def sigma(self, k: int, x) -> np.ndarray:
        return self.modes[k - 1].sigma(x)

    def diffusions(self, x) -> np.ndarray:
        """All ``a_k(x)``, shape ``(..., n, d, d)``."""
        return np.stack([m.a(x) for m in self.modes], axis=-3)

    def rates(self, x) -> np.ndarray:
        """Raw ``gamma_km(x)``, shape ``(..., n, n)`` with zero diagonal."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.n, self.n))
        for k in range(self.n):
            for m in range(self.n):
                if k != m:
                    out[..., k, m] = self.rate_fields[k][m](x)
        return out

    def rate_factor(self, eps: float) -> float:
        if self.rate_scaling == "unit":
            return 1.0
        if eps <= 0:
            raise ValueError("inverse_eps rate scaling is undefined at eps = 0")
        return 1.0 / eps

    def single_mode(self, k: int) -> "SwitchingModel":
        """The model restricted to mode ``k`` (1-based), with n = 1."""
        return SwitchingModel(self.d, 1, (self.modes[k - 1],), ((None,),), self.rate_scaling)

    def to_config(self) -> dict:
        rates = [[None if k == m else self.rate_fields[k][m].text for m in range(self.n)]
                 for k in range(self.n)]
        return {"d": self.d, "n": self.n, "rate_scaling": self.rate_scaling,
                "modes": [m.to_config() for m in self.modes], "rates": rates}

    @classmethod
    def from_config(cls, cfg: dict, controls_cfg: dict | None = None) -> "SwitchingModel":
        for key in ("d", "n", "modes"):
            if key not in cfg:
                raise ConfigError(f"model.{key}", "missing required key")
        extra = set(cfg) - {"d", "n", "modes", "rates", "rate_scaling"}
        if extra:
            raise ConfigError(f"model.{sorted(extra)[0]}", "unknown key")
        d, n = cfg["d"], cfg["n"]
        if not isinstance(d, int) or d < 1:
            raise ConfigError("model.d", "must be a positive integer")
        if not isinstance(n, int) or n < 1:
            raise ConfigError("model.n", "must be a positive integer")
        modes_cfg = cfg["modes"]
        if not isinstance(modes_cfg, list) or len(modes_cfg) != n:
            raise ConfigError("model.modes", f"needs exactly n = {n} entries")
        modes = tuple(ModeDynamics.from_config(m, d, f"model.modes[{k}]") for k, m in enumerate(modes_cfg))
        scaling = cfg.get("rate_scaling", "unit")
        if scaling not in RATE_SCALINGS:
            raise ConfigError("model.rate_scaling", f"must be one of {RATE_SCALINGS}")
        names = state_names(d)
        rates_cfg = cfg.get("rates", [])
        if n == 1:
            rate_fields = ((None,),)
        else:
            if not isinstance(rates_cfg, list) or len(rates_cfg) != n or any(
                    not isinstance(r, list) or len(r) != n for r in rates_cfg):
                raise ConfigError("model.rates", f"dimension mismatch: needs an {n}x{n} list")
            rows = []
            for k in range(n):
                row = []
                for m in range(n):
                    if k == m:
                        row.append(None)
                        continue
                    key = f"model.rates[{k}][{m}]"
                    f = _Field(_parse_field(rates_cfg[k][m], names, key), names)
                    if f.is_constant and not fl.evaluate(f.expr, {}) > 0:
                        raise ConfigError(key, "rates must be strictly positive")
                    row.append(f)
                rows.append(tuple(row))
            rate_fields = tuple(rows)
        controls = ControlFamily.from_config(controls_cfg, d, n) if controls_cfg else None
        return cls(d, n, modes, rate_fields, scaling, controls)


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Boundary values ``g_k`` for each mode."""

    g_fields: tuple

    @property
    def n(self) -> int:
        return len(self.g_fields)

    def g(self, k: int, y) -> np.ndarray:
        """Boundary data of mode ``k`` (1-based) at points ``y``."""
        return self.g_fields[k - 1](np.asarray(y, dtype=float))

    def values(self, y) -> np.ndarray:
        """All ``g_k(y)``, shape ``(..., n)``."""
        y = np.asarray(y, dtype=float)
        return np.stack([f(y) for f in self.g_fields], axis=-1)

    def to_config(self) -> dict:
        return {"g": [f.text for f in self.g_fields]}

    @classmethod
    def from_config(cls, cfg: dict | None, d: int, n: int) -> "BoundaryData":
        names = state_names(d)
        if cfg is None:
            return cls(tuple(_Field(fl.Num(0.0), names) for _ in range(n)))
        g = cfg.get("g")
        if isinstance(g, (str, int, float)):
            g = [g] * n
        if not isinstance(g, list) or len(g) != n:
            raise ConfigError("boundary.g", f"needs one expression per mode (n = {n})")
        return cls(tuple(_Field(_parse_field(e, names, f"boundary.g[{k}]"), names) for k, e in enumerate(g)))

    @classmethod
    def constant(cls, values: Sequence[float], d: int) -> "BoundaryData":
        names = state_names(d)
        return cls(tuple(_Field(fl.Num(float(v)), names) for v in values))


class EpsilonLadder(tuple):
    """Strictly decreasing sequence of positive noise levels."""

    def __new__(cls, values: Sequence[float]):
        vals = tuple(float(v) for v in values)
        if not vals:
            raise ValueError("epsilon ladder must not be empty")
        if any(not v > 0 for v in vals):
            raise ValueError("epsilon ladder entries must be positive")
        if any(b >= a for a, b in zip(vals, vals[1:])):
            raise ValueError("epsilon ladder must be strictly decreasing")
        return super().__new__(cls, vals)


@dataclass
class ExperimentSettings:
    """Run parameters shared by the CLI subcommands."""

    x0: Any = "equilibrium"
    y0: Any = None  # known exit point; computed from the quasipotential when absent
    k0_mode: int = 1
    eps: float = 0.2
    ladder: list = field(default_factory=lambda: [0.5, 0.3, 0.2, 0.12, 0.08])
    dt: float = 1e-3
    horizon: float | None = None
    trials: int = 1000
    delta: float = 0.1
    grid_h: float = 1.0 / 256
    probes: list = field(default_factory=list)
    T_grid: list = field(default_factory=lambda: list(np.geomspace(0.5, 32.0, 8)))
    path_nodes: int = 100
    mesh_count: int = 64
    as1_threshold: float = 1e-3
    seed: int = 0
    workers: int = 1
    validation: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: dict | None) -> "ExperimentSettings":
        cfg = dict(cfg or {})
        known = {f.name for f in fields(cls)}
        for key in cfg:
            if key not in known:
                raise ConfigError(f"experiment.{key}", "unknown key")
        out = cls(**cfg)
        if isinstance(out.trials, bool) or not isinstance(out.trials, int):
            raise ConfigError("experiment.trials", "must be an integer")
        return out

    def to_config(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = [float(t) for t in v] if f.name == "T_grid" else v
        return out


class Problem(NamedTuple):
    model: SwitchingModel
    domain: DomainGeometry
    boundary: BoundaryData
    experiment: ExperimentSettings


_TOP_KEYS = {"model", "domain", "boundary", "controls", "experiment"}


def load_problem(source) -> Problem:
    """Build a problem from a JSON document (text, path, or already-parsed dict).

    Raises
    ------
    ConfigError
        Names the offending key for schema violations, expression errors and
        dimension mismatches.
    """
    if isinstance(source, dict):
        cfg = source
    else:
        text = source
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            text = Path(source).read_text()
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("<document>", "top level must be an object")
    for key in cfg:
        if key not in _TOP_KEYS:
            raise ConfigError(key, "unknown top-level key")
    if "model" not in cfg:
        raise ConfigError("model", "missing required key")
    if "domain" not in cfg:
        raise ConfigError("domain", "missing required key")
    model = SwitchingModel.from_config(cfg["model"], cfg.get("controls"))
    try:
        domain = DomainGeometry.from_config(cfg["domain"], model.d)
    except (DomainError, KeyError, fl.FieldSyntaxError) as exc:
        raise ConfigError("domain", str(exc)) from None
    boundary = BoundaryData.from_config(cfg.get("boundary"), model.d, model.n)
    experiment = ExperimentSettings.from_config(cfg.get("experiment"))
    _check_evaluable(model, domain, boundary)
    return Problem(model, domain, boundary, experiment)


def _check_evaluable(model: SwitchingModel, domain: DomainGeometry, boundary: BoundaryData) -> None:
    c = domain.center
    checks = [("model.modes.drift", lambda: model.drifts(c)),
              ("model.modes.sigma", lambda: model.diffusions(c)),
              ("model.rates", lambda: model.rates(c)),
              ("boundary.g", lambda: boundary.values(c))]
    for key, fn in checks:
        try:
            vals = fn()
        except fl.FieldError as exc:
            raise ConfigError(key, f"not evaluable at the domain center: {exc}") from None
        if not np.all(np.isfinite(vals)):
            raise ConfigError(key, "not finite at the domain center")


def problem_to_config(problem: Problem) -> dict:
    cfg = {"model": problem.model.to_config(), "domain": problem.domain.to_config(),
           "boundary": problem.boundary.to_config(), "experiment": problem.experiment.to_config()}
    if problem.model.controls is not None:
        cfg["controls"] = problem.model.controls.to_config()
    return cfg


def dump_problem(problem: Problem) -> str:
    return json.dumps(problem_to_config(problem), indent=2, sort_keys=True)


# -- validation ---------------------------------------------------------------

@dataclass
class ValidationReport:
    a_min: float
    a_max: float
    worst_ellipticity_point: list
    worst_ellipticity_direction: list
    ellipticity_ok: bool
    min_rate: float | None
    worst_rate: dict | None
    rates_ok: bool
    drift_lipschitz: float
    rate_lipschitz: float | None
    lipschitz_ok: bool
    symmetric_ok: bool
    ok: bool
    samples: dict

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def validate_model(model: SwitchingModel, domain: DomainGeometry,
                   sample_counts: tuple[int, int] = (256, 256), seed: int = 0,
                   a_min_floor: float = 1e-10, a_bounds: tuple[float, float] | None = None,
                   lipschitz_bound: float | None = None) -> ValidationReport:
    """Check the standing hypotheses on a random sample of the domain.

    ``sample_counts`` is (points, point pairs).  Ellipticity bounds are the
    extreme eigenvalues of ``a_k(x)`` over the sampled points, which equal the
    extreme values of ``p.a p`` over unit directions.  Lipschitz constants are
    the largest difference quotients over the sampled pairs.
    """
    rng = np.random.default_rng(seed)
    n_pts, n_pairs = sample_counts
    pts = np.concatenate([domain.sample_interior(n_pts, rng), domain.boundary_mesh(16, rng)])

    a = model.diffusions(pts)  # (P, n, d, d)
    sym_err = float(np.max(np.abs(a - np.swapaxes(a, -1, -2)))) if a.size else 0.0
    w, v = np.linalg.eigh(a)
    lo_idx = np.unravel_index(np.argmin(w[..., 0]), w.shape[:-1])
    a_min = float(w[..., 0].min())
    a_max = float(w[..., -1].max())
    worst_pt = pts[lo_idx[0]].tolist()
    worst_dir = v[lo_idx][:, 0].tolist()
    ell_ok = a_min > a_min_floor
    if a_bounds is not None:
        ell_ok = ell_ok and a_bounds[0] <= a_min and a_max <= a_bounds[1]

    min_rate, worst_rate, rates_ok, rate_lip = None, None, True, None
    if model.n > 1:
        g = model.rates(pts)
        mask = ~np.eye(model.n, dtype=bool)
        off = np.where(mask, g, np.inf)
        i = np.unravel_index(np.argmin(off), off.shape)
        min_rate = float(off[i])
        rates_ok = min_rate > 0
        worst_rate = {"k": int(i[1]) + 1, "m": int(i[2]) + 1, "x": pts[i[0]].tolist(), "rate": min_rate}

    xa = domain.sample_interior(n_pairs, rng)
    xb = domain.sample_interior(n_pairs, rng)
    dist = np.linalg.norm(xa - xb, axis=-1)
    keep = dist > 1e-12
    xa, xb, dist = xa[keep], xb[keep], dist[keep]
    df = np.linalg.norm(model.drifts(xa) - model.drifts(xb), axis=-1)  # (P, n)
    drift_lip = float(np.max(df / dist[:, None])) if len(dist) else 0.0
    if model.n > 1:
        dg = np.abs(model.rates(xa) - model.rates(xb)).reshape(len(dist), -1)
        rate_lip = float(np.max(dg / dist[:, None]))
    lip_ok = True
    if lipschitz_bound is not None:
        lip_ok = drift_lip <= lipschitz_bound and (rate_lip is None or rate_lip <= lipschitz_bound)
    sym_ok = sym_err <= 1e-12
    ok = bool(ell_ok and rates_ok and lip_ok and sym_ok)
    return ValidationReport(a_min, a_max, worst_pt, worst_dir, bool(ell_ok), min_rate, worst_rate,
                            bool(rates_ok), drift_lip, rate_lip, bool(lip_ok), bool(sym_ok), ok,
                            {"points": int(len(pts)), "pairs": int(len(dist)), "seed": int(seed)})
