"""Dirichlet-to-Neumann map, boundary mean curvature and the flow functionals.

For a positive boundary function ``u`` on S^n = dB^{n+1}, extended
harmonically into the ball, the conformal metric ``u^{4/(n-1)} g_0`` has
boundary mean curvature

    H = u^{-p_H} (c_N du/dnu + u),

and the flow functionals are averages over the round sphere:

    E    = avg (c_N du/dnu + u) u  =  avg H u^{p_V}
    E_f  = E / avg(f u^{p_V})^{e_E}
    alpha = avg(H u^{p_V}) / avg(f u^{p_V})

Only ``n = 2`` is discretised (p_H = 3, p_V = 4, c_N = 2, c_F = 1/4).
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from .spharm import (
    GridField,
    SpectralField,
    analyze,
    average,
    eval_at_point,
    synthesize,
)

U_GUARD = 1e-10


class DomainError(ValueError):
    """Input violates the positivity required by a conformal factor."""


@dataclasses.dataclass(frozen=True)
class Dimension:
    """Boundary dimension ``n`` and the conformal exponents derived from it."""

    n: int = 2

    def __post_init__(self):
        if self.n != 2:
            raise ValueError(f"only n = 2 is implemented, got n = {self.n}")

    @property
    def p_H(self) -> float:
        return (self.n + 1) / (self.n - 1)

    @property
    def p_V(self) -> float:
        return 2 * self.n / (self.n - 1)

    @property
    def c_N(self) -> float:
        return 2 / (self.n - 1)

    @property
    def c_F(self) -> float:
        return (self.n - 1) / 4

    @property
    def e_E(self) -> float:
        return (self.n - 1) / self.n

    @property
    def omega(self) -> float:
        """Volume of the unit n-sphere."""
        return 2 * math.pi ** ((self.n + 1) / 2) / math.gamma((self.n + 1) / 2)


DIM = Dimension(2)


@dataclasses.dataclass(frozen=True)
class EnergyReport:
    E: float
    E_f: float
    alpha: float
    volume: float
    f_volume: float
    residual_sup: float
    residual_L2: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyReport":
        return cls(**{k: float(d[k]) for k in (f.name for f in dataclasses.fields(cls))})


# eigenvalue of the DtN map on degree-l harmonics; swappable for fault injection
def _dtn_eigenvalues(lmax: int) -> np.ndarray:
    return np.arange(lmax + 1, dtype=float)


def dtn(c: SpectralField) -> SpectralField:
    """Outward normal derivative of the harmonic extension: ``a_lm -> l a_lm``."""
    return c.scale_by_degree(_dtn_eigenvalues(c.L_max))


def harmonic_extend(c: SpectralField, p) -> float:
    """Value at ``p`` in the closed unit ball of the harmonic extension of ``c``."""
    p = np.asarray(p, dtype=float)
    r = float(np.linalg.norm(p))
    if r > 1.0 + 1e-12:
        raise ValueError(f"point lies outside the unit ball (|p| = {r})")
    if r == 0.0:
        return float(c.coeffs[0]) / math.sqrt(4.0 * math.pi)
    r = min(r, 1.0)
    ls = np.arange(c.L_max + 1, dtype=float)
    return eval_at_point(c.scale_by_degree(r ** ls), p / np.linalg.norm(p))


def _check_positive(u: GridField, name: str = "u") -> None:
    lo = u.min()
    if not np.all(np.isfinite(u.values)):
        raise DomainError(f"{name} has non-finite values")
    if lo < U_GUARD:
        idx = np.unravel_index(np.argmin(u.values), u.spec.shape)
        raise DomainError(
            f"{name} must be positive (min {lo:.3g} at node {idx}, point {u.spec.points[idx].round(6).tolist()})"
        )


def _check_same_grid(u: GridField, f: GridField) -> None:
    if not u.spec.same_as(f.spec):
        raise ValueError("u and f live on different grids")


def normal_derivative(u: GridField, lmax: int | None = None) -> GridField:
    """``du/dnu`` at the nodes.

    The field is projected onto degrees ``<= lmax`` first.  By default that is
    the largest degree the grid resolves, so an oversampled grid keeps the
    spectral tail of fields that are not band limited to ``spec.L_max``.
    The mean is removed before transforming (the map annihilates constants),
    so roundoff scales with the variation of ``u`` rather than its size.
    """
    L = u.spec.resolvable_lmax if lmax is None else lmax
    v = u.with_values(u.values - average(u))
    return synthesize(dtn(analyze(v, L)), u.spec)


def mean_curvature(u: GridField, lmax: int | None = None) -> GridField:
    _check_positive(u)
    du = normal_derivative(u, lmax).values
    v = u.values
    return u.with_values(v ** (-DIM.p_H) * (DIM.c_N * du + v))


def energy(u: GridField, lmax: int | None = None) -> float:
    """``E[u] = avg (c_N du/dnu + u) u``."""
    _check_positive(u)
    du = normal_derivative(u, lmax).values
    v = u.values
    return average(u.with_values((DIM.c_N * du + v) * v))


def energy_from_curvature(u: GridField, H: GridField) -> float:
    """Second form of the energy, ``avg H u^{p_V}``."""
    return average(u.with_values(H.values * u.values ** DIM.p_V))


def volume(u: GridField) -> float:
    _check_positive(u)
    return average(u.with_values(u.values ** DIM.p_V))


def f_weighted_volume(u: GridField, f: GridField) -> float:
    _check_positive(u)
    _check_positive(f, "f")
    _check_same_grid(u, f)
    return average(u.with_values(f.values * u.values ** DIM.p_V))


def alpha(u: GridField, f: GridField, lmax: int | None = None) -> float:
    H = mean_curvature(u, lmax)
    return energy_from_curvature(u, H) / f_weighted_volume(u, f)


def normalized_energy(u: GridField, f: GridField, lmax: int | None = None) -> float:
    return energy(u, lmax) / f_weighted_volume(u, f) ** DIM.e_E


def flow_rhs(u: GridField, f: GridField, lmax: int | None = None) -> GridField:
    """``u_t = c_F (alpha f - H) u`` with ``alpha`` from the current ``u``."""
    _check_same_grid(u, f)
    H = mean_curvature(u, lmax)
    a = energy_from_curvature(u, H) / f_weighted_volume(u, f)
    return u.with_values(DIM.c_F * (a * f.values - H.values) * u.values)


def energy_report(u: GridField, f: GridField, lmax: int | None = None) -> EnergyReport:
    H = mean_curvature(u, lmax)
    E = energy_from_curvature(u, H)
    vol = volume(u)
    fvol = f_weighted_volume(u, f)
    a = E / fvol
    res = a * f.values - H.values
    return EnergyReport(
        E=E,
        E_f=E / fvol ** DIM.e_E,
        alpha=a,
        volume=vol,
        f_volume=fvol,
        residual_sup=float(np.abs(res).max()),
        residual_L2=math.sqrt(average(u.with_values(res * res))),
    )


def stationary_residual(u: GridField, f: GridField, alpha_value: float | None = None, lmax: int | None = None) -> float:
    """Sup-norm of ``(c_N du/dnu + u - alpha f u^{p_H}) / u^{p_H}``.

    This is the boundary equation of the stationary problem divided through by
    ``u^{p_H}``, i.e. ``sup |H - alpha f|``.  ``alpha`` is recomputed from
    ``u`` unless given.
    """
    _check_positive(u)
    _check_same_grid(u, f)
    v = u.values
    du = normal_derivative(u, lmax).values
    lhs = DIM.c_N * du + v
    if alpha_value is None:
        alpha_value = average(u.with_values(lhs * v)) / f_weighted_volume(u, f)
    rhs = alpha_value * f.values * v ** DIM.p_H
    return float(np.abs((lhs - rhs) / v ** DIM.p_H).max())
