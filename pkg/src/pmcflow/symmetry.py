"""Reflection / discrete-rotation actions on S^2 and the existence-hypothesis checker.

An action is either a mirror reflection ``x -> x - 2 <x,e> e`` or a rotation
by ``pi/k`` about an axis ``a``.  Fixed sets: the great circle ``<x,e> = 0``
for a reflection, the pair ``{a, -a}`` for a rotation.

When the action maps the grid nodes onto themselves (coordinate-aligned
reflections, rotations about the polar axis on a grid with ``n_phi`` a
multiple of ``2k``) it acts on grid fields by an exact index permutation;
otherwise fields are resampled through their spectral interpolant.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import math

import numpy as np
from scipy import optimize
from scipy.spatial import cKDTree

from .conformal_ops import DIM
from .geometry import rotation_about, rotation_taking
from .spharm import (
    GridField,
    GridSpec,
    SpectralField,
    analyze,
    eval_at_point,
    eval_at_points,
    laplace_beltrami,
    tangent_basis,
)

PERMUTATION_TOL = 1e-12
DEFAULT_MARGIN = 1e-6


@dataclasses.dataclass(frozen=True)
class SymmetryAction:
    """``kind`` is ``"reflection"`` (``vector`` = unit normal) or ``"rotation"``
    (``vector`` = unit axis, angle ``pi/k``)."""

    kind: str
    vector: tuple[float, float, float]
    k: int = 2

    def __post_init__(self):
        if self.kind not in ("reflection", "rotation"):
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        v = np.asarray(self.vector, dtype=float)
        if v.shape != (3,) or not np.isfinite(v).all() or np.linalg.norm(v) == 0:
            raise ValueError(f"bad symmetry vector {self.vector}")
        v = v / np.linalg.norm(v)
        object.__setattr__(self, "vector", tuple(float(c) for c in v))
        if self.kind == "rotation" and (int(self.k) != self.k or self.k < 2):
            raise ValueError(f"rotation order k must be an integer >= 2, got {self.k}")
        object.__setattr__(self, "k", int(self.k))

    @classmethod
    def reflection(cls, normal) -> "SymmetryAction":
        return cls("reflection", tuple(normal))

    @classmethod
    def rotation(cls, axis, k: int) -> "SymmetryAction":
        return cls("rotation", tuple(axis), k)

    @classmethod
    def parse(cls, text: str) -> "SymmetryAction":
        """``reflection:ex,ey,ez`` or ``rotation:ax,ay,az,k``."""
        kind, _, rest = text.strip().partition(":")
        vals = [float(v) for v in rest.split(",")] if rest else []
        if kind == "reflection" and len(vals) == 3:
            return cls.reflection(vals)
        if kind == "rotation" and len(vals) == 4:
            return cls.rotation(vals[:3], vals[3])
        raise ValueError(f"cannot parse symmetry {text!r}; use reflection:ex,ey,ez or rotation:ax,ay,az,k")

    def format(self) -> str:
        v = ",".join(repr(c) for c in self.vector)
        return f"reflection:{v}" if self.kind == "reflection" else f"rotation:{v},{self.k}"

    @property
    def group_order(self) -> int:
        return 2 if self.kind == "reflection" else 2 * self.k

    @property
    def matrix(self) -> np.ndarray:
        v = np.asarray(self.vector)
        if self.kind == "reflection":
            return np.eye(3) - 2.0 * np.outer(v, v)
        return rotation_about(v, math.pi / self.k)

    def __call__(self, pts) -> np.ndarray:
        return np.asarray(pts, float) @ self.matrix.T

    def conjugate(self, R) -> "SymmetryAction":
        """The action ``R gamma R^{-1}``."""
        return SymmetryAction(self.kind, tuple(np.asarray(R, float) @ np.asarray(self.vector)), self.k)


@functools.lru_cache(maxsize=32)
def grid_permutation(spec: GridSpec, action: SymmetryAction) -> np.ndarray | None:
    """Flat node index of ``gamma(x_i)`` for every node, or ``None`` if the grid
    is not closed under ``gamma``."""
    P = spec.points.reshape(-1, 3)
    dist, idx = cKDTree(P).query(action(P))
    if dist.max() > PERMUTATION_TOL:
        return None
    return idx


def is_grid_closed(spec: GridSpec, action: SymmetryAction) -> bool:
    return grid_permutation(spec, action) is not None


def apply_action(g: GridField, action: SymmetryAction) -> GridField:
    """The field ``x -> g(gamma x)``.

    Exact index permutation on gamma-closed grids (see
    :func:`is_grid_closed`); spectral resampling at degree ``spec.L_max``
    otherwise, which is exact only for band-limited ``g``.
    """
    perm = grid_permutation(g.spec, action)
    if perm is not None:
        return g.with_values(g.values.reshape(-1)[perm].reshape(g.spec.shape))
    c = analyze(g)
    return g.with_values(eval_at_points(c, action(g.spec.points), check_unit=False))


def symmetry_defect(g: GridField, action: SymmetryAction) -> float:
    return float(np.abs(apply_action(g, action).values - g.values).max())


def symmetrize(g: GridField, action: SymmetryAction) -> GridField:
    """Average of ``g`` over the group generated by ``gamma``."""
    acc = np.zeros(g.spec.shape)
    h = g
    for _ in range(action.group_order):
        acc += h.values
        h = apply_action(h, action)
    return g.with_values(acc / action.group_order)


def fixed_set_sample(action: SymmetryAction, m: int = 64) -> np.ndarray:
    """Points of the fixed set: ``m`` equispaced points of the mirror circle, or
    the two axis points."""
    v = np.asarray(action.vector)
    if action.kind == "rotation":
        return np.array([v, -v])
    if m < 2:
        raise ValueError("need m >= 2 samples on the mirror circle")
    e1, e2 = tangent_basis(v)
    t = 2.0 * np.pi * np.arange(m) / m
    return np.cos(t)[:, None] * e1 + np.sin(t)[:, None] * e2


@dataclasses.dataclass
class HypothesisReport:
    symmetric: bool
    symmetry_defect: float
    fixed_set_max: float
    argmax_points: list
    laplacian_at_argmax: list
    condition8: bool
    global_max: float
    global_argmax: list
    ratio_bound_thm: float
    condition9: bool
    ratio_bound_lemma: float
    condition_sharp: bool
    margin: float

    @property
    def passed(self) -> bool:
        return self.symmetric and self.condition8 and self.condition9

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["passed"] = self.passed
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def table(self) -> str:
        def mark(b):
            return "PASS" if b else "FAIL"

        lines = [
            f"symmetry of f             {mark(self.symmetric)}  (defect {self.symmetry_defect:.3e})",
            f"max of f on fixed set     {self.fixed_set_max:.10g}",
            f"Laplacian at maximisers   {', '.join(f'{v:.10g}' for v in self.laplacian_at_argmax)}",
            f"Laplacian > 0 at maxima   {mark(self.condition8)}",
            f"global max of f           {self.global_max:.10g}",
            f"bound 2^(2/(n-1)) max_F f {self.ratio_bound_thm:.10g}",
            f"max f below bound         {mark(self.condition9)}",
            f"bound 2^(1/(n-1)) max_F f {self.ratio_bound_lemma:.10g}",
            f"max f below sharp bound   {mark(self.condition_sharp)}",
            f"verdict                   {mark(self.passed)}",
        ]
        return "\n".join(lines)


def _circle_maxima(c: SpectralField, e1, e2, n_samples: int, xtol: float) -> list[tuple[float, np.ndarray]]:
    """Local maxima of ``c`` on the great circle spanned by ``e1, e2``."""
    t = 2.0 * np.pi * np.arange(n_samples) / n_samples
    pts = np.cos(t)[:, None] * e1 + np.sin(t)[:, None] * e2
    vals = eval_at_points(c, pts, check_unit=False)
    h = 2.0 * np.pi / n_samples
    found = []
    for i in np.flatnonzero((vals >= np.roll(vals, 1)) & (vals >= np.roll(vals, -1))):

        def neg(s):
            return -float(eval_at_points(c, (math.cos(s) * e1 + math.sin(s) * e2)[None], check_unit=False)[0])

        try:
            res = optimize.minimize_scalar(neg, bracket=(t[i] - h, t[i], t[i] + h), method="golden", tol=xtol)
            s, v = float(res.x), -float(res.fun)
        except (ValueError, RuntimeError):
            s, v = float(t[i]), float(vals[i])
        if v < vals[i]:
            s, v = float(t[i]), float(vals[i])
        found.append((v, math.cos(s) * e1 + math.sin(s) * e2))
    return found


def local_maximum_near(c: SpectralField, p, radius: float, xtol: float = 1e-10) -> tuple[float, np.ndarray]:
    """Maximise the interpolant of ``c`` in the geodesic disc around ``p``."""
    p = np.asarray(p, float)
    e1, e2 = tangent_basis(p)

    def point(v):
        r = math.hypot(v[0], v[1])
        if r == 0:
            return p
        d = (v[0] * e1 + v[1] * e2) / r
        return math.cos(r) * p + math.sin(r) * d

    def neg(v):
        if math.hypot(v[0], v[1]) > radius:
            return math.inf
        return -float(eval_at_points(c, point(v)[None], check_unit=False)[0])

    step = radius / 4
    res = optimize.minimize(
        neg,
        np.zeros(2),
        method="Nelder-Mead",
        options={"xatol": xtol, "fatol": 1e-15, "initial_simplex": [[0, 0], [step, 0], [0, step]], "maxiter": 400},
    )
    v0 = -neg(np.zeros(2))
    if -res.fun < v0:
        return v0, p
    q = point(res.x)
    return -float(res.fun), q / np.linalg.norm(q)


def grid_local_maxima(g: GridField, percentile: float = 0.0, radius: float | None = None) -> np.ndarray:
    """Flat indices of nodes at least as large as every node within ``radius``
    (geodesic; default 2.5 grid spacings) and above the given percentile."""
    spec = g.spec
    if radius is None:
        radius = 2.5 * max(math.pi / spec.n_theta, 2 * math.pi / spec.n_phi)
    P = spec.points.reshape(-1, 3)
    v = g.values.reshape(-1)
    thresh = np.percentile(v, percentile) if percentile > 0 else -np.inf
    cand = np.flatnonzero(v >= thresh)
    tree = cKDTree(P)
    chord = 2.0 * math.sin(radius / 2)
    keep = [i for i in cand if v[i] >= v[tree.query_ball_point(P[i], chord)].max()]
    return np.array(sorted(keep, key=lambda i: -v[i]), dtype=int)


def check_hypotheses(
    f: GridField,
    action: SymmetryAction,
    tol: float = DEFAULT_MARGIN,
    lmax: int | None = None,
    n_global_starts: int = 6,
) -> HypothesisReport:
    """Evaluate the existence hypotheses for a prescribed ``f`` with symmetry ``action``.

    ``condition8``: every maximiser of ``f`` on the fixed set has
    ``Laplacian f > tol``; ``condition9``: ``max f < 2^{2/(n-1)} max_F f - tol``;
    ``condition_sharp``: same with ``2^{1/(n-1)}``.  An ``f`` whose symmetry defect
    exceeds ``tol`` fails outright (reported, not raised).
    """
    c = analyze(f, lmax)
    lap = laplace_beltrami(c)
    defect = symmetry_defect(f, action)
    symmetric = defect < tol

    if action.kind == "rotation":
        fixed = [(eval_at_point(c, p), p) for p in fixed_set_sample(action)]
    else:
        e1, e2 = tangent_basis(np.asarray(action.vector))
        fixed = _circle_maxima(c, e1, e2, 4 * f.spec.n_phi, 1e-8)
    fmax_F = max(v for v, _ in fixed)
    argmax = [p for v, p in fixed if v >= fmax_F - tol]
    argmax = _dedupe(argmax, 1e-6)
    lap_vals = [eval_at_point(lap, p) for p in argmax]
    cond8 = symmetric and bool(lap_vals) and all(v > tol for v in lap_vals)

    gmax, gpt = -math.inf, None
    spacing = max(math.pi / f.spec.n_theta, 2 * math.pi / f.spec.n_phi)
    for i in grid_local_maxima(f)[:n_global_starts]:
        p0 = f.spec.points.reshape(-1, 3)[i]
        v, p = local_maximum_near(c, p0, 3 * spacing)
        if v > gmax:
            gmax, gpt = v, p
    for v, p in fixed:
        if v > gmax:
            gmax, gpt = v, p

    bound9 = 2.0 ** (2.0 / (DIM.n - 1)) * fmax_F
    bound_sharp = 2.0 ** (1.0 / (DIM.n - 1)) * fmax_F
    return HypothesisReport(
        symmetric=bool(symmetric),
        symmetry_defect=defect,
        fixed_set_max=float(fmax_F),
        argmax_points=[np.asarray(p).tolist() for p in argmax],
        laplacian_at_argmax=[float(v) for v in lap_vals],
        condition8=bool(cond8),
        global_max=float(gmax),
        global_argmax=np.asarray(gpt).tolist(),
        ratio_bound_thm=float(bound9),
        condition9=bool(symmetric and gmax < bound9 - tol),
        ratio_bound_lemma=float(bound_sharp),
        condition_sharp=bool(symmetric and gmax < bound_sharp - tol),
        margin=tol,
    )


def _dedupe(points, tol):
    out = []
    for p in points:
        if all(np.linalg.norm(np.asarray(p) - np.asarray(q)) > tol for q in out):
            out.append(p)
    return out


__all__ = [
    "SymmetryAction",
    "HypothesisReport",
    "apply_action",
    "symmetry_defect",
    "symmetrize",
    "fixed_set_sample",
    "grid_permutation",
    "is_grid_closed",
    "check_hypotheses",
    "grid_local_maxima",
    "local_maximum_near",
    "rotation_taking",
]
