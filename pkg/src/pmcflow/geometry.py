"""Ball / half-space conformal maps and the bubble family of conformal factors.

``Sigma`` sends the punctured ball B^3 minus the south pole onto the closed
upper half-space, taking the boundary sphere to the plane ``z3 = 0``.  On the
boundary it is ordinary stereographic projection from the south pole with
``|zbar|^2 = 4 (1 - x3) / (1 + x3)``; its boundary conformal factor is
``(4 / (4 + |zbar|^2))^{(n-1)/2}``.

Bubbles are the pull-backs of the half-space solutions
``v0 = (2 lam / (|zbar|^2 + lam^2))^{(n-1)/2}``.  In closed form, for centre
``c``,

    u(x) = (4 lam / (4 (1 - <x,c>) + lam^2 (1 + <x,c>)))^{(n-1)/2}.

``lam = 2`` is the round metric ``u = 1``; ``lam -> 0`` concentrates at ``c``.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .conformal_ops import DIM
from .spharm import GridField, GridSpec, analyze, eval_at_points

SOUTH = np.array([0.0, 0.0, -1.0])
NORTH = np.array([0.0, 0.0, 1.0])
POINT_TOL = 1e-12


def _vec(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError("expected 3-vectors")
    return x


def sphere_point(p) -> np.ndarray:
    p = _vec(p)
    if np.any(np.abs(np.linalg.norm(p, axis=-1) - 1.0) > POINT_TOL):
        raise ValueError("not a unit vector")
    return p


def sigma(x) -> np.ndarray:
    """Ball -> upper half-space; accepts arrays of shape ``(..., 3)``."""
    x = _vec(x)
    xb = x[..., :2]
    x3 = x[..., 2]
    if np.any(np.linalg.norm(x, axis=-1) > 1.0 + POINT_TOL):
        raise ValueError("point lies outside the closed unit ball")
    if np.any(np.linalg.norm(x - SOUTH, axis=-1) < POINT_TOL):
        raise ValueError("the south pole is the pole of sigma")
    r2 = np.sum(xb * xb, axis=-1)
    den = r2 + (1.0 + x3) ** 2
    z3 = 2.0 * (1.0 - r2 - x3 * x3) / den
    return np.concatenate([4.0 * xb / den[..., None], np.maximum(z3, 0.0)[..., None]], axis=-1)


def sigma_inv(z) -> np.ndarray:
    """Upper half-space -> ball minus the south pole."""
    z = _vec(z)
    zb = z[..., :2]
    z3 = z[..., 2]
    if np.any(z3 < -POINT_TOL):
        raise ValueError("half-space points need z3 >= 0")
    r2 = np.sum(zb * zb, axis=-1)
    den = r2 + (2.0 + z3) ** 2
    return np.concatenate([4.0 * zb / den[..., None], ((4.0 - z3 * z3 - r2) / den)[..., None]], axis=-1)


def boundary_conformal_factor(zbar) -> np.ndarray | float:
    """``(4 / (4 + |zbar|^2))^{(n-1)/2}``; a field ``u`` pushes forward to ``v = factor * u``."""
    zbar = np.asarray(zbar, dtype=float)
    r2 = np.sum(zbar * zbar, axis=-1)
    out = (4.0 / (4.0 + r2)) ** ((DIM.n - 1) / 2)
    return float(out) if np.ndim(out) == 0 else out


@dataclasses.dataclass(frozen=True)
class BubbleParams:
    center: tuple[float, float, float]
    lam: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        if c.shape != (3,) or abs(np.linalg.norm(c) - 1.0) > POINT_TOL:
            raise ValueError(f"bubble centre must be a unit 3-vector, got {self.center}")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"bubble lambda must be positive, got {self.lam}")
        object.__setattr__(self, "center", tuple(float(v) for v in c))

    @classmethod
    def parse(cls, text: str) -> "BubbleParams":
        """Parse ``bubble:cx,cy,cz,lambda``; the centre is normalised."""
        text = text.strip()
        if not text.startswith("bubble:"):
            raise ValueError(f"expected 'bubble:cx,cy,cz,lambda', got {text!r}")
        parts = [float(v) for v in text[len("bubble:"):].split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected 4 numbers after 'bubble:', got {len(parts)}")
        c = np.array(parts[:3])
        nrm = np.linalg.norm(c)
        if nrm == 0:
            raise ValueError("bubble centre must be nonzero")
        return cls(tuple(c / nrm), parts[3])

    def format(self) -> str:
        return "bubble:" + ",".join(repr(v) for v in (*self.center, self.lam))


def bubble_values(params: BubbleParams, pts) -> np.ndarray:
    """Closed-form bubble at unit vectors ``pts``."""
    t = np.clip(np.asarray(pts, float) @ np.asarray(params.center), -1.0, 1.0)
    lam = params.lam
    return (4.0 * lam / (4.0 * (1.0 - t) + lam * lam * (1.0 + t))) ** ((DIM.n - 1) / 2)


def bubble(params: BubbleParams, spec: GridSpec) -> GridField:
    return GridField(spec, bubble_values(params, spec.points))


def bubble_by_pullback(lam: float, pts) -> np.ndarray:
    """Bubble centred at the north pole built through the half-space.

    ``u = v0(Sigma(x)) / factor(Sigma(x))``; kept as a cross-check of the
    closed form (fails at the south pole, the pole of ``Sigma``).
    """
    zb = sigma(pts)[..., :2]
    r2 = np.sum(zb * zb, axis=-1)
    v0 = (2.0 * lam / (r2 + lam * lam)) ** ((DIM.n - 1) / 2)
    return v0 / boundary_conformal_factor(zb)


def check_rotation(R, tol: float = 1e-12) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError("rotation must be a 3x3 matrix")
    if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")
    return R


def rotation_about(axis, angle: float) -> np.ndarray:
    """Right-handed rotation by ``angle`` about ``axis`` (Rodrigues)."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_taking(a, b) -> np.ndarray:
    """A rotation sending unit vector ``a`` to unit vector ``b``."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(np.dot(a, b))
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        perp = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        perp -= a * np.dot(perp, a)
        return rotation_about(perp, np.pi)
    return rotation_about(v / s, np.arctan2(s, c))


def rotate_field(g: GridField, R, lmax: int | None = None) -> GridField:
    """``x -> g(R^{-1} x)``, by evaluating the spectral interpolant of ``g``."""
    R = check_rotation(R)
    c = analyze(g, lmax)
    pts = g.spec.points @ R  # row-vector form of R^T x
    return g.with_values(eval_at_points(c, pts, check_unit=False))


def geodesic_distance(p, q) -> np.ndarray | float:
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    cross = np.linalg.norm(np.cross(p, q), axis=-1)
    out = np.arctan2(cross, np.sum(p * q, axis=-1))
    return float(out) if np.ndim(out) == 0 else out
