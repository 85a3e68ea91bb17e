"""Time integration of the prescribed-mean-curvature flow and blow-up detection.

The evolving unknown is the boundary conformal factor ``u`` on S^2,

    u_t = c_F (alpha f - H_g) u,     alpha = avg(H u^4) / avg(f u^4),

which conserves ``avg u^4`` exactly and makes ``E_f`` nonincreasing.  The
integrator is explicit RK4 with ``alpha`` refreshed at every stage and a
first-order CFL cap ``dt <= cfl min(u)^2 / (L+1)``.  Steps are accepted on
positivity and on the ``E_f`` monotonicity law rather than on a truncation
error estimate.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from typing import Callable

import numpy as np
from scipy.special import eval_legendre

from . import conformal_ops as co
from .conformal_ops import DIM, EnergyReport
from .geometry import geodesic_distance
from .spharm import (
    GridField,
    SpectralField,
    analyze,
    eval_at_point,
    eval_at_points,
    laplace_beltrami,
    surface_gradient,
    synthesize,
)
from .symmetry import SymmetryAction, grid_local_maxima, local_maximum_near, symmetry_defect

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = (
    "step",
    "t",
    "dt",
    "alpha",
    "E",
    "E_f",
    "volume",
    "u_min",
    "u_max",
    "residual_sup",
    "residual_L2",
    "max_cap_mass",
    "symmetry_defect",
)


class StepRejected(Exception):
    """A Runge-Kutta stage left the admissible set ``u > u_floor``."""


@dataclasses.dataclass(frozen=True)
class FlowConfig:
    L_max: int = 64
    oversample: float = 2.0
    dt_init: float = 1e-2
    dt_min: float = 1e-8
    dt_max: float = 0.5
    cfl: float = 0.5
    t_max: float = 200.0
    residual_tol: float = 1e-5
    ef_violation_tol: float = 1e-8
    vol_drift_tol: float = 1e-6
    snapshot_every: int = 50
    concentration_radii: tuple[float, ...] = (0.2, 0.4)
    concentration_threshold: float = 0.9
    u_floor: float = 1e-8
    plateau_steps: int = 50
    max_candidates: int = 8
    max_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "concentration_radii", tuple(float(r) for r in self.concentration_radii))
        for name in ("dt_init", "dt_min", "dt_max", "cfl", "t_max", "residual_tol", "ef_violation_tol",
                     "vol_drift_tol", "concentration_threshold", "u_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.dt_min <= self.dt_init <= self.dt_max:
            raise ValueError("need dt_min <= dt_init <= dt_max")
        if self.snapshot_every < 1 or self.plateau_steps < 1:
            raise ValueError("snapshot_every and plateau_steps must be >= 1")
        if not self.concentration_radii or min(self.concentration_radii) <= 0:
            raise ValueError("concentration radii must be positive")


@dataclasses.dataclass(frozen=True, eq=False)
class FlowState:
    """One accepted time slice; ``report`` is recomputable from ``u`` and ``f``."""

    t: float
    u: GridField
    report: EnergyReport
    step_index: int = 0
    L_max: int | None = None

    @property
    def coeffs(self) -> SpectralField:
        return analyze(self.u, self.L_max)


def make_state(u: GridField, f: GridField, t: float = 0.0, step_index: int = 0, L_max: int | None = None) -> FlowState:
    L = u.spec.L_max if L_max is None else L_max
    return FlowState(t=t, u=u, report=co.energy_report(u, f, L), step_index=step_index, L_max=L)


@dataclasses.dataclass
class Trajectory:
    rows: list[dict] = dataclasses.field(default_factory=list)
    snapshots: list[tuple[int, float, GridField]] = dataclasses.field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_COLUMNS)
            for r in self.rows:
                w.writerow([r["step"]] + [repr(float(r[c])) for c in TRAJECTORY_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if tuple(header) != TRAJECTORY_COLUMNS:
                raise ValueError(f"{path}: unexpected trajectory header {header}")
            rows = []
            for rec in rd:
                row = {c: float(v) for c, v in zip(header, rec)}
                row["step"] = int(row["step"])
                rows.append(row)
        return cls(rows=rows)


@dataclasses.dataclass
class Candidate:
    point: np.ndarray
    radii: tuple[float, ...]
    cap_masses: list[float]
    flagged: bool
    u_value: float
    f_value: float
    grad_f_norm: float
    laplacian_f: float
    one_over_f_power: float

    @property
    def cap_mass(self) -> float:
        """Cap mass at the smallest radius, the quantity that decides the flag."""
        return self.cap_masses[0]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["point"] = np.asarray(self.point).tolist()
        return d


@dataclasses.dataclass
class ConcentrationReport:
    candidates: list[Candidate]
    flagged: bool
    E_f_current: float
    threshold: float

    @property
    def n_flagged(self) -> int:
        return sum(c.flagged for c in self.candidates)

    @property
    def max_cap_mass(self) -> float:
        return max((c.cap_mass for c in self.candidates), default=0.0)

    def to_dict(self) -> dict:
        return {
            "flagged": self.flagged,
            "n_flagged": self.n_flagged,
            "E_f_current": self.E_f_current,
            "threshold": self.threshold,
            "candidates": [c.to_dict() for c in self.candidates],
        }


@dataclasses.dataclass
class Converged:
    state: FlowState
    u_inf: GridField
    alpha_inf: float
    name = "Converged"


@dataclasses.dataclass
class Concentrated:
    state: FlowState
    report: ConcentrationReport
    name = "Concentrated"


@dataclasses.dataclass
class MaxTimeReached:
    state: FlowState
    name = "MaxTimeReached"


@dataclasses.dataclass
class Aborted:
    state: FlowState
    reason: str
    name = "Aborted"


Outcome = Converged | Concentrated | MaxTimeReached | Aborted


def cap_weights(lmax: int, radius: float) -> np.ndarray:
    """Funk-Hecke multipliers of the indicator of a geodesic cap.

    ``int_{cap(Q, r)} w dmu = sum_lm chi_l w_lm Y_lm(Q)`` with
    ``chi_l = 2 pi int_{cos r}^1 P_l(t) dt``.
    """
    c = math.cos(radius)
    ls = np.arange(lmax + 1)
    chi = np.empty(lmax + 1)
    chi[0] = 2.0 * math.pi * (1.0 - c)
    l = ls[1:]
    chi[1:] = 2.0 * math.pi * (eval_legendre(l - 1, c) - eval_legendre(l + 1, c)) / (2 * l + 1)
    return chi


def cap_masses(u: GridField, points, radius: float, H: GridField | None = None) -> np.ndarray:
    """``(omega^{-1} int_{cap} |H|^n dmu_g)^{1/n}`` for caps around ``points``.

    ``dmu_g = u^{p_V} dmu``.  The density is expanded to the grid's full
    resolvable degree and integrated over each cap spectrally.
    """
    if H is None:
        H = co.mean_curvature(u)
    dens = u.with_values(np.abs(H.values) ** DIM.n * u.values ** DIM.p_V)
    Lr = u.spec.resolvable_lmax
    c = analyze(dens, Lr).scale_by_degree(cap_weights(Lr, radius))
    vals = eval_at_points(c, np.atleast_2d(points), check_unit=False) / DIM.omega
    return np.clip(vals, 0.0, None) ** (1.0 / DIM.n)


def detect_concentration(s, f: GridField, cfg: FlowConfig, refine: bool = True) -> ConcentrationReport:
    """Cap-mass concentration test around the local maxima of ``u``.

    Candidates are grid local maxima of ``u`` above its 99th percentile,
    merged when closer than the smallest radius and capped at
    ``cfg.max_candidates``.  A candidate is flagged when its cap mass at the
    smallest radius reaches ``cfg.concentration_threshold``; flagged points
    are refined to the maximum of the interpolant of ``u``.
    """
    u = s.u if isinstance(s, FlowState) else s
    spec = u.spec
    radii = tuple(sorted(cfg.concentration_radii))
    H = co.mean_curvature(u)
    P = spec.points.reshape(-1, 3)
    vals = u.values.reshape(-1)

    kept: list[np.ndarray] = []
    for i in grid_local_maxima(u, percentile=99.0):
        p = P[i]
        if all(geodesic_distance(p, q) >= radii[0] for q in kept):
            kept.append(p)
            if len(kept) >= cfg.max_candidates:
                break
    pts = np.array(kept)
    masses = np.stack([cap_masses(u, pts, r, H) for r in radii], axis=1)
    flags = masses[:, 0] >= cfg.concentration_threshold

    if refine and flags.any():
        uc = analyze(u, spec.resolvable_lmax)
        spacing = max(math.pi / spec.n_theta, 2 * math.pi / spec.n_phi)
        for j in np.flatnonzero(flags):
            _, pts[j] = local_maximum_near(uc, pts[j], 3 * spacing, xtol=1e-9)
        masses[flags] = np.stack([cap_masses(u, pts[flags], r, H) for r in radii], axis=1)
        flags = masses[:, 0] >= cfg.concentration_threshold

    fc = analyze(f)
    lap = laplace_beltrami(fc)
    uc_L = analyze(u)
    E_f = s.report.E_f if isinstance(s, FlowState) else co.normalized_energy(u, f)
    cands = []
    for j, p in enumerate(pts):
        fq = eval_at_point(fc, p)
        cands.append(
            Candidate(
                point=p,
                radii=radii,
                cap_masses=[float(m) for m in masses[j]],
                flagged=bool(flags[j]),
                u_value=eval_at_point(uc_L, p),
                f_value=fq,
                grad_f_norm=float(np.linalg.norm(surface_gradient(fc, p))),
                laplacian_f=eval_at_point(lap, p),
                one_over_f_power=fq ** (-DIM.e_E) if fq > 0 else math.inf,
            )
        )
    cands.sort(key=lambda c: -c.cap_mass)
    return ConcentrationReport(cands, bool(flags.any()), float(E_f), cfg.concentration_threshold)


def cfl_limit(u: GridField, cfg: FlowConfig) -> float:
    return cfg.cfl / ((cfg.L_max + 1) * float(np.max(u.values ** (-2.0 / (DIM.n - 1)))))


def step(s: FlowState, f: GridField, dt: float, cfg: FlowConfig) -> FlowState:
    """One classical RK4 step, ``alpha`` re-evaluated at every stage.

    The increment is projected onto degrees ``<= cfg.L_max``.  Raises
    :class:`StepRejected` if any stage or the result dips below ``u_floor``.
    """
    L = cfg.L_max
    u0 = s.u

    def stage(v: np.ndarray) -> np.ndarray:
        if v.min() < cfg.u_floor or not np.isfinite(v).all():
            raise StepRejected(f"min u = {v.min():.3g} below floor {cfg.u_floor:g}")
        return co.flow_rhs(u0.with_values(v), f, L).values

    v = u0.values
    k1 = stage(v)
    k2 = stage(v + 0.5 * dt * k1)
    k3 = stage(v + 0.5 * dt * k2)
    k4 = stage(v + dt * k3)
    new = v + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if new.min() < cfg.u_floor or not np.isfinite(new).all():
        raise StepRejected(f"min u = {new.min():.3g} below floor {cfg.u_floor:g}")
    # project the increment: equal to projecting the result for band-limited
    # states (all states built by run), with roundoff proportional to the update
    inc = synthesize(analyze(u0.with_values(new - v), L), u0.spec)
    u_new = u0.with_values(v + inc.values)
    if u_new.min() < cfg.u_floor:
        raise StepRejected(f"projection pushed min u to {u_new.min():.3g}")
    return make_state(u_new, f, s.t + dt, s.step_index + 1, L)


def convergence_check(s: FlowState, history: Trajectory, cfg: FlowConfig) -> bool:
    """Residual below tolerance and ``E_f`` flat over the last ``plateau_steps`` steps."""
    if s.report.residual_sup >= cfg.residual_tol:
        return False
    if s.step_index <= cfg.plateau_steps:
        return False
    past = [r for r in history.rows if r["step"] == s.step_index - cfg.plateau_steps]
    if not past:
        return False
    return abs(s.report.E_f - past[-1]["E_f"]) < cfg.residual_tol * s.report.E_f


def _row(s: FlowState, dt: float, cap: float, defect: float) -> dict:
    r = s.report
    return {
        "step": s.step_index,
        "t": s.t,
        "dt": dt,
        "alpha": r.alpha,
        "E": r.E,
        "E_f": r.E_f,
        "volume": r.volume,
        "u_min": s.u.min(),
        "u_max": s.u.max(),
        "residual_sup": r.residual_sup,
        "residual_L2": r.residual_L2,
        "max_cap_mass": cap,
        "symmetry_defect": defect,
    }


def run(
    u0: GridField,
    f: GridField,
    cfg: FlowConfig,
    symmetry: SymmetryAction | None = None,
    on_snapshot: Callable[[int, float, GridField], None] | None = None,
) -> tuple[Trajectory, Outcome]:
    """Integrate from ``u0`` until convergence, concentration, ``t_max`` or abort.

    ``u0`` is first projected onto degrees ``<= cfg.L_max``; conservation is
    measured against the projected initial volume.  A state that is already
    stationary to ``1e-3 * residual_tol`` returns ``Converged`` without
    stepping.  Concentration is checked at the snapshot cadence and stops the
    run after two consecutive flags.
    """
    if not u0.spec.same_as(f.spec):
        raise ValueError("u0 and f must live on the same grid")
    if cfg.L_max > u0.spec.resolvable_lmax:
        raise ValueError(f"grid resolves degrees <= {u0.spec.resolvable_lmax}, config asks for L_max={cfg.L_max}")
    co._check_positive(u0, "u0")
    co._check_positive(f, "f")

    u = synthesize(analyze(u0, cfg.L_max), u0.spec)
    state = make_state(u, f, 0.0, 0, cfg.L_max)
    traj = Trajectory()
    vol0 = state.report.volume

    def defect(st):
        return symmetry_defect(st.u, symmetry) if symmetry is not None else math.nan

    def snapshot(st):
        traj.snapshots.append((st.step_index, st.t, st.u))
        if on_snapshot is not None:
            on_snapshot(st.step_index, st.t, st.u)

    conc = detect_concentration(state, f, cfg, refine=False)
    last_cap = conc.max_cap_mass
    n_flags = int(conc.flagged)
    traj.rows.append(_row(state, 0.0, last_cap, defect(state)))
    snapshot(state)

    if state.report.residual_sup < 1e-3 * cfg.residual_tol:
        return traj, Converged(state, state.u, state.report.alpha)

    dt = cfg.dt_init
    accepts = 0
    while True:
        if state.t >= cfg.t_max * (1 - 1e-12) or (cfg.max_steps is not None and state.step_index >= cfg.max_steps):
            if state.step_index % cfg.snapshot_every:
                snapshot(state)
            return traj, MaxTimeReached(state)
        dt_try = min(dt, cfg.dt_max, cfl_limit(state.u, cfg), cfg.t_max - state.t)
        try:
            new = step(state, f, dt_try, cfg)
        except StepRejected as exc:
            log.debug("step %d rejected: %s", state.step_index + 1, exc)
            dt, accepts = dt_try / 2, 0
            if dt < cfg.dt_min:
                return traj, Aborted(state, f"positivity: {exc}")
            continue
        except co.DomainError as exc:
            return traj, Aborted(state, f"domain: {exc}")
        if new.report.E_f > state.report.E_f + cfg.ef_violation_tol:
            log.debug("step %d rejected: E_f rose by %.3g", new.step_index, new.report.E_f - state.report.E_f)
            dt, accepts = dt_try / 2, 0
            if dt < cfg.dt_min:
                return traj, Aborted(state, "monotonicity: E_f increase persists at dt_min")
            continue

        state = new
        dt = dt_try
        accepts += 1
        if accepts >= 10:
            dt, accepts = min(dt * 1.25, cfg.dt_max), 0

        if state.step_index % cfg.snapshot_every == 0:
            conc = detect_concentration(state, f, cfg, refine=False)
            last_cap = conc.max_cap_mass
            n_flags = n_flags + 1 if conc.flagged else 0
        traj.rows.append(_row(state, dt_try, last_cap, defect(state)))
        if state.step_index % cfg.snapshot_every == 0:
            snapshot(state)
            if n_flags >= 2:
                return traj, Concentrated(state, detect_concentration(state, f, cfg))

        drift = abs(state.report.volume - vol0) / vol0
        if drift > cfg.vol_drift_tol:
            snapshot(state)
            return traj, Aborted(state, f"volume drift {drift:.3g} exceeds {cfg.vol_drift_tol:g}")
        if convergence_check(state, traj, cfg):
            if state.step_index % cfg.snapshot_every:
                snapshot(state)
            return traj, Converged(state, state.u, state.report.alpha)
