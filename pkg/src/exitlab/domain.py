"""Bounded domains: membership, level function, normals, projection and boundary meshes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import fieldlang as fl

KINDS = ("interval", "box", "ball", "implicit")


class DomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DomainGeometry:
    """A bounded open domain ``D = {phi < 0}``.

    Parameters by kind:

    * ``interval``: ``lo``, ``hi`` (d = 1)
    * ``box``: ``lo``, ``hi`` lists
    * ``ball``: ``center`` list, ``radius``
    * ``implicit``: ``phi`` expression in ``x1..xd`` plus ``lo``/``hi``
      of a bounding box
    """

    kind: str
    d: int
    params: dict[str, Any] = field(hash=False, compare=False)
    lo: np.ndarray = field(hash=False, compare=False, repr=False, default=None)
    hi: np.ndarray = field(hash=False, compare=False, repr=False, default=None)
    phi_expr: fl.Expr | None = field(default=None, compare=False, repr=False)

    @classmethod
    def from_config(cls, cfg: dict, d: int) -> "DomainGeometry":
        kind = cfg.get("kind")
        params = dict(cfg.get("params", {}))
        if kind not in KINDS:
            raise DomainError(f"domain.kind must be one of {KINDS}, got {kind!r}")
        phi_expr = None
        if kind == "interval":
            if d != 1:
                raise DomainError(f"interval domain needs d = 1, model has d = {d}")
            lo, hi = np.array([float(params["lo"])]), np.array([float(params["hi"])])
        elif kind == "box":
            lo = np.asarray(params["lo"], dtype=float).reshape(-1)
            hi = np.asarray(params["hi"], dtype=float).reshape(-1)
        elif kind == "ball":
            c = np.asarray(params["center"], dtype=float).reshape(-1)
            r = float(params["radius"])
            if not r > 0:
                raise DomainError("domain.params.radius must be positive")
            lo, hi = c - r, c + r
        else:
            names = [f"x{i + 1}" for i in range(d)]
            phi_expr = fl.parse(params["phi"], names)
            lo = np.asarray(params["lo"], dtype=float).reshape(-1)
            hi = np.asarray(params["hi"], dtype=float).reshape(-1)
        if lo.shape != (d,) or hi.shape != (d,):
            raise DomainError(f"domain bounds have dimension {lo.size}, model has d = {d}")
        if np.any(hi <= lo):
            raise DomainError("domain bounds must satisfy lo < hi")
        return cls(kind, d, params, lo, hi, phi_expr)

    def to_config(self) -> dict:
        params = {}
        for k, v in self.params.items():
            params[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return {"kind": self.kind, "params": params}

    # -- geometry -------------------------------------------------------------

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def center(self) -> np.ndarray:
        if self.kind == "ball":
            return np.asarray(self.params["center"], dtype=float)
        return 0.5 * (self.lo + self.hi)

    def phi(self, x) -> np.ndarray:
        """Level function, negative inside, zero on the boundary."""
        x = np.asarray(x, dtype=float)
        if self.kind in ("interval", "box"):
            return np.max(np.maximum(self.lo - x, x - self.hi), axis=-1)
        if self.kind == "ball":
            c = self.center
            return np.linalg.norm(x - c, axis=-1) - float(self.params["radius"])
        f = self._phi_numpy()
        return f(*[x[..., i] for i in range(self.d)])

    def _phi_numpy(self):
        cached = self.__dict__.get("_phi_fn")
        if cached is None:
            cached = fl.compile_numpy(self.phi_expr, [f"x{i + 1}" for i in range(self.d)])
            object.__setattr__(self, "_phi_fn", cached)
        return cached

    def contains(self, x) -> np.ndarray:
        return self.phi(x) < 0

    def normal(self, y) -> np.ndarray:
        """Outward unit normal at boundary point(s) ``y``."""
        y = np.asarray(y, dtype=float)
        if self.kind in ("interval", "box"):
            viol = np.stack([self.lo - y, y - self.hi], axis=-1)  # (..., d, 2)
            flat = viol.reshape(viol.shape[:-2] + (-1,))
            idx = np.argmax(flat, axis=-1)
            axis, side = np.divmod(idx, 2)
            n = np.zeros(y.shape)
            np.put_along_axis(n, axis[..., None], np.where(side == 0, -1.0, 1.0)[..., None], axis=-1)
            return n
        if self.kind == "ball":
            v = y - self.center
            return v / np.linalg.norm(v, axis=-1, keepdims=True)
        g = self._phi_grad(y)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def _phi_grad(self, y: np.ndarray) -> np.ndarray:
        h = 1e-7 * max(self.diameter, 1.0)
        g = np.zeros(y.shape)
        for i in range(self.d):
            e = np.zeros(self.d)
            e[i] = h
            g[..., i] = (self.phi(y + e) - self.phi(y - e)) / (2 * h)
        return g

    def project(self, y) -> np.ndarray:
        """Project point(s) onto the boundary."""
        y = np.array(y, dtype=float)
        if self.kind in ("interval", "box"):
            single = y.ndim == 1
            yy = np.atleast_2d(y)
            out = np.clip(yy, self.lo, self.hi)
            # snap the coordinate closest to a face onto that face
            dist = np.stack([out - self.lo, self.hi - out], axis=-1).reshape(len(out), -1)
            idx = np.argmin(dist, axis=-1)
            axis, side = np.divmod(idx, 2)
            rows = np.arange(len(out))
            out[rows, axis] = np.where(side == 0, self.lo[axis], self.hi[axis])
            return out[0] if single else out
        if self.kind == "ball":
            v = y - self.center
            return self.center + float(self.params["radius"]) * v / np.linalg.norm(v, axis=-1, keepdims=True)
        for _ in range(50):
            p = self.phi(y)
            if np.all(np.abs(p) < 1e-13):
                break
            g = self._phi_grad(y)
            y = y - (p / np.sum(g * g, axis=-1))[..., None] * g
        return y

    def boundary_distance(self, y) -> np.ndarray:
        return np.abs(self.phi(y))

    def sample_interior(self, count: int, rng: np.random.Generator) -> np.ndarray:
        out = []
        have = 0
        while have < count:
            pts = rng.uniform(self.lo, self.hi, size=(max(2 * (count - have), 16), self.d))
            pts = pts[self.contains(pts)]
            out.append(pts)
            have += len(pts)
        return np.concatenate(out)[:count]

    def boundary_mesh(self, count: int = 64, rng: np.random.Generator | None = None) -> np.ndarray:
        """Points on the boundary: endpoints in 1D, a closed curve in 2D."""
        if self.d == 1:
            ends = np.array([[self.lo[0]], [self.hi[0]]])
            return self.project(ends) if self.kind == "implicit" else ends
        if self.kind == "ball" and self.d == 2:
            th = 2 * np.pi * np.arange(count) / count
            r = float(self.params["radius"])
            return self.center + r * np.stack([np.cos(th), np.sin(th)], axis=-1)
        if self.kind == "box" and self.d == 2:
            per = 2 * np.sum(self.hi - self.lo)
            s = per * np.arange(count) / count
            (x0, y0), (x1, y1) = self.lo, self.hi
            w, h = x1 - x0, y1 - y0
            pts = []
            for si in s:
                if si < w:
                    pts.append((x0 + si, y0))
                elif si < w + h:
                    pts.append((x1, y0 + si - w))
                elif si < 2 * w + h:
                    pts.append((x1 - (si - w - h), y1))
                else:
                    pts.append((x0, y1 - (si - 2 * w - h)))
            return np.array(pts)
        if self.d == 2:
            return self._march_2d(count)
        # d >= 3: rejection sample near the boundary, then project
        rng = rng or np.random.default_rng(0)
        pts = self.sample_interior(count, rng)
        return self.project(pts)

    def _march_2d(self, count: int) -> np.ndarray:
        from skimage import measure

        m = 256
        xs = np.linspace(self.lo[0], self.hi[0], m)
        ys = np.linspace(self.lo[1], self.hi[1], m)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        vals = self.phi(np.stack([X, Y], axis=-1))
        contours = measure.find_contours(vals, 0.0)
        if not contours:
            raise DomainError("implicit domain has no zero level set inside its bounding box")
        c = max(contours, key=len)
        pts = np.stack([np.interp(c[:, 0], np.arange(m), xs), np.interp(c[:, 1], np.arange(m), ys)], axis=-1)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        target = np.linspace(0, arc[-1], count, endpoint=False)
        res = np.stack([np.interp(target, arc, pts[:, 0]), np.interp(target, arc, pts[:, 1])], axis=-1)
        return self.project(res)

    # -- code generation for kernels ------------------------------------------

    def phi_source(self) -> str:
        """Body of a numba function ``phi(x)`` returning the level value."""
        d = self.d
        lines = [f"    x{i + 1} = x[{i}]" for i in range(d)]
        if self.kind in ("interval", "box"):
            terms = []
            for i in range(d):
                terms.append(f"({self.lo[i]!r} - x{i + 1})")
                terms.append(f"(x{i + 1} - {self.hi[i]!r})")
            acc = terms[0]
            for t in terms[1:]:
                acc = f"max({acc}, {t})"
            lines.append(f"    return {acc}")
        elif self.kind == "ball":
            c = self.center
            s = " + ".join(f"(x{i + 1} - {c[i]!r})**2" for i in range(d))
            lines.append(f"    return math.sqrt({s}) - {float(self.params['radius'])!r}")
        else:
            lines.append(f"    return {fl.to_source(self.phi_expr, 'math')}")
        return "\n".join(lines)
