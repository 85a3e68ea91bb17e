"""Built-in acceptance battery, run by ``pmcflow verify``.

Each criterion is a function of a shared context dict (the long flow run is
computed once and reused by criteria 4-6) and returns a :class:`CriterionResult`.
All random inputs come from ``numpy.random.default_rng(seed)``, so repeated
invocations give identical numbers.
"""

from __future__ import annotations

import contextlib
import dataclasses
import math
import os
import tempfile
import time
from typing import Callable

import numpy as np

from . import conformal_ops as co
from . import geometry as geo
from .flow import Converged, FlowConfig, detect_concentration, run
from .spharm import (
    SpectralField,
    analyze,
    build_grid,
    constant,
    integrate,
    n_coeffs,
    read_field,
    sample,
    synthesize,
    write_field,
)
from .symmetry import SymmetryAction, check_hypotheses, is_grid_closed, symmetry_defect


@dataclasses.dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0
    budget: float | None = None

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.number:2d} {self.title:<34s} {self.seconds:7.2f}s  {self.detail}"


def _checks(pairs: list[tuple[str, bool]]) -> tuple[bool, str]:
    failed = [name for name, ok in pairs if not ok]
    return not failed, ("failed: " + "; ".join(failed)) if failed else ""


def random_bandlimited(L: int, rng: np.random.Generator) -> SpectralField:
    """Random coefficients with a mild degree decay so sup-norms stay O(1)."""
    l = np.repeat(np.arange(L + 1), 2 * np.arange(L + 1) + 1)
    return SpectralField(L, rng.standard_normal(n_coeffs(L)) / (1.0 + l))


def crit_spectral(ctx) -> tuple[bool, str]:
    rng = np.random.default_rng(ctx["seed"])
    spec = build_grid(32, 2.0)
    c = random_bandlimited(32, rng)
    g = synthesize(c, spec)
    err = float(np.abs(synthesize(analyze(g), spec).values - g.values).max())
    e2 = integrate(g.with_values(g.values ** 2))
    pars = abs(e2 - float(np.sum(c.coeffs ** 2))) / e2
    quad = abs(integrate(constant(spec)) - 4 * math.pi) / (4 * math.pi)
    ok, why = _checks([("roundtrip", err < 1e-10), ("parseval", pars < 1e-9), ("quadrature", quad < 1e-12)])
    return ok, f"roundtrip {err:.2e}, parseval {pars:.2e}, quad(1) {quad:.2e} {why}".rstrip()


def crit_bubbles(ctx) -> tuple[bool, str]:
    spec = build_grid(64, 2.0)
    worst_H = worst_E = worst_V = 0.0
    for lam in (0.25, 0.5, 1.0, 2.0, 4.0):
        u = geo.bubble(geo.BubbleParams((0.0, 0.0, 1.0), lam), spec)
        worst_H = max(worst_H, float(np.abs(co.mean_curvature(u).values - 1).max()))
        worst_E = max(worst_E, abs(co.energy(u) - 1))
        worst_V = max(worst_V, abs(co.volume(u) - 1))
    u2 = geo.bubble(geo.BubbleParams((0.6, 0.0, 0.8), 2.0), spec)
    one = float(np.abs(u2.values - 1).max())
    ok, why = _checks([("H", worst_H < 1e-6), ("E", worst_E < 1e-6), ("volume", worst_V < 1e-6), ("lam=2", one < 1e-12)])
    return ok, f"|H-1| {worst_H:.2e}, |E-1| {worst_E:.2e}, |V-1| {worst_V:.2e}, lam=2 {one:.1e} {why}".rstrip()


def crit_bubble_limit(ctx) -> tuple[bool, str]:
    spec = build_grid(128, 2.0)
    f = sample(lambda x, y, z: (3 + z) / 2, spec)
    vals = [co.normalized_energy(geo.bubble(geo.BubbleParams((0.0, 0.0, 1.0), lam), spec), f) for lam in (0.4, 0.2, 0.1)]
    target = 2 ** -0.5
    ok, why = _checks(
        [("decreasing", vals[0] > vals[1] > vals[2]), ("limit", abs(vals[2] - target) < 0.05)]
    )
    return ok, "E_f " + ", ".join(f"{v:.5f}" for v in vals) + f" (target {target:.5f}) {why}".rstrip()


def _main_run(ctx):
    """u0 = 1, f = 4/3 - P2/3 at L_max = 48 on a grid closed under the half-turn about x3."""
    if "main_run" not in ctx:
        action = SymmetryAction.rotation((0.0, 0.0, 1.0), 2)
        spec = build_grid(48, 2.0, symmetry_order=action.k)
        f = sample(lambda x, y, z: 1.5 - z * z / 2, spec)
        cfg = FlowConfig(L_max=48, t_max=200.0)
        t0 = time.perf_counter()
        traj, out = run(constant(spec), f, cfg, symmetry=action)
        ctx["main_run"] = dict(spec=spec, f=f, cfg=cfg, traj=traj, out=out, action=action,
                               seconds=time.perf_counter() - t0)
    return ctx["main_run"]


def crit_conservation(ctx) -> tuple[bool, str]:
    r = _main_run(ctx)
    traj = r["traj"]
    vol = traj.column("volume")
    ef = traj.column("E_f")
    drift = float(np.abs(vol - vol[0]).max() / vol[0])
    rise = float(np.diff(ef).max()) if ef.size > 1 else 0.0
    ok, why = _checks(
        [("volume drift", drift < 1e-6), ("E_f step rise", rise <= 1e-8), ("E_f end", ef[-1] <= ef[0]),
         ("runtime", r["seconds"] < 300)]
    )
    return ok, f"drift {drift:.2e}, max dE_f {rise:.2e}, E_f {ef[0]:.6f} -> {ef[-1]:.6f}, {len(ef) - 1} steps {why}".rstrip()


def crit_convergence(ctx) -> tuple[bool, str]:
    r = _main_run(ctx)
    out = r["out"]
    if not isinstance(out, Converged):
        return False, f"outcome {out.name}"
    res = out.state.report.residual_sup
    with contextlib.ExitStack() as stack:
        d = ctx.get("out_dir") or stack.enter_context(tempfile.TemporaryDirectory())
        path = os.path.join(d, "u_inf.sph")
        write_field(path, out.u_inf)
        u = read_field(path, oversample=r["spec"].oversample)
    f = sample(lambda x, y, z: 1.5 - z * z / 2, u.spec)
    res2 = co.stationary_residual(u, f, lmax=r["cfg"].L_max)
    ok, why = _checks([("residual", res < 1e-5), ("reproduced", abs(res2 - res) < 1e-8)])
    return ok, f"residual {res:.3e}, from snapshot {res2:.3e}, alpha {out.alpha_inf:.8f} {why}".rstrip()


def crit_symmetry(ctx) -> tuple[bool, str]:
    r = _main_run(ctx)
    rot = max(symmetry_defect(u, r["action"]) for _, _, u in r["traj"].snapshots)

    refl = SymmetryAction.reflection((1.0, 0.0, 0.0))
    spec = build_grid(32, 2.0)
    f = sample(lambda x, y, z: 1 + 0.2 * (x * x - 1 / 3), spec)
    u0 = sample(lambda x, y, z: 1 + 0.1 * x * x, spec)
    traj, out = run(u0, f, FlowConfig(L_max=32), symmetry=refl)
    ref = float(np.max(traj.column("symmetry_defect")))
    ok, why = _checks(
        [("closed grids", is_grid_closed(r["spec"], r["action"]) and is_grid_closed(spec, refl)),
         ("rotation", rot < 1e-9), ("reflection", ref < 1e-9)]
    )
    return ok, f"rotation defect {rot:.2e}, reflection defect {ref:.2e} ({out.name}) {why}".rstrip()


def crit_concentration(ctx) -> tuple[bool, str]:
    spec = build_grid(64, 2.0)
    ones = constant(spec)
    cfg = FlowConfig(L_max=64, concentration_radii=(0.2, 0.4))
    rep = detect_concentration(geo.bubble(geo.BubbleParams((0.0, 0.0, 1.0), 0.05), spec), ones, cfg)
    top = rep.candidates[0]
    dist = geo.geodesic_distance(top.point, geo.NORTH)
    flat = detect_concentration(ones, ones, cfg)
    exact = np.sqrt((1 - np.cos(np.array(cfg.concentration_radii))) / 2)
    flat_err = max(float(np.abs(np.array(c.cap_masses) - exact).max()) for c in flat.candidates)
    ok, why = _checks(
        [("bubble mass", top.cap_masses[1] >= 0.9), ("bubble flag", rep.flagged and top.flagged),
         ("location", dist < 0.05), ("round mass", flat_err < 1e-3), ("round flag", not flat.flagged)]
    )
    return ok, f"bubble mass(0.4) {top.cap_masses[1]:.4f} at dist {dist:.1e}; round err {flat_err:.1e} {why}".rstrip()


def crit_hypotheses(ctx) -> tuple[bool, str]:
    spec = build_grid(32, 2.0, symmetry_order=2)
    rot = SymmetryAction.rotation((0.0, 0.0, 1.0), 2)
    cases = [
        # f, expected booleans (8, 9, 2.7), max_F f, Laplacians at maximisers, global max
        (lambda x, y, z: 1.5 - z * z / 2, (True, True, True), 1.0, [2.0, 2.0], 1.5),
        (lambda x, y, z: 1.0 + 0 * z, (False, True, True), 1.0, [0.0, 0.0], 1.0),
        (lambda x, y, z: (3 + z) / 2, (False, True, True), 2.0, [-1.0], 2.0),
    ]
    worst = 0.0
    bad = []
    for i, (fn, bools, fmax, laps, gmax) in enumerate(cases, 1):
        rep = check_hypotheses(sample(fn, spec), rot)
        if (rep.condition8, rep.condition9, rep.condition_sharp) != bools or len(rep.laplacian_at_argmax) != len(laps):
            bad.append(f"example {i} booleans")
            continue
        errs = [abs(rep.fixed_set_max - fmax), abs(rep.global_max - gmax)]
        errs += [abs(a - b) for a, b in zip(sorted(rep.laplacian_at_argmax), sorted(laps))]
        worst = max(worst, max(errs))
        if max(errs) >= 1e-8:
            bad.append(f"example {i} scalars")
    ok = not bad
    return ok, f"scalar error {worst:.1e}" + (" failed: " + "; ".join(bad) if bad else "")


def crit_stereographic(ctx) -> tuple[bool, str]:
    rng = np.random.default_rng(ctx["seed"] + 9)
    n = 10_000
    d = rng.standard_normal((n, 3))
    x = d / np.linalg.norm(d, axis=1, keepdims=True) * rng.random((n, 1)) ** (1 / 3)
    e1 = float(np.abs(geo.sigma_inv(geo.sigma(x)) - x).max())
    z = np.column_stack([rng.uniform(-4, 4, (n, 2)), rng.uniform(0, 4, n)])
    e2 = float(np.abs(geo.sigma(geo.sigma_inv(z)) - z).max())
    fixed = [
        (geo.sigma(geo.NORTH), [0.0, 0.0, 0.0]),
        (geo.sigma([0.0, 0.0, 0.0]), [0.0, 0.0, 2.0]),
        (geo.sigma([1.0, 0.0, 0.0]), [2.0, 0.0, 0.0]),
    ]
    e3 = max(float(np.abs(np.asarray(a) - b).max()) for a, b in fixed)
    ok, why = _checks([("ball roundtrip", e1 < 1e-12), ("half-space roundtrip", e2 < 1e-12), ("fixed values", e3 < 1e-14)])
    return ok, f"roundtrips {e1:.1e} / {e2:.1e}, fixed values {e3:.1e} {why}".rstrip()


CRITERIA: list[tuple[int, str, Callable, float | None]] = [
    (1, "spectral core", crit_spectral, 5.0),
    (2, "bubble identities", crit_bubbles, 30.0),
    (3, "bubble energy limit", crit_bubble_limit, 60.0),
    (4, "conservation and monotonicity", crit_conservation, 300.0),
    (5, "convergence to stationary eq.", crit_convergence, None),
    (6, "symmetry preservation", crit_symmetry, None),
    (7, "concentration detector", crit_concentration, None),
    (8, "hypothesis checker", crit_hypotheses, None),
    (9, "stereographic geometry", crit_stereographic, None),
]

TOTAL_BUDGET = 600.0


def _wrong_dtn(lmax: int) -> np.ndarray:
    return np.arange(lmax + 1, dtype=float) + 1.0


def _wrong_sigma(x):
    z = _true_sigma(x)
    return z * (1 + 1e-9)


_true_sigma = geo.sigma
FAULTS = {
    "dtn": (co, "_dtn_eigenvalues", _wrong_dtn),
    "sigma": (geo, "sigma", _wrong_sigma),
}


@contextlib.contextmanager
def injected(fault: str | None):
    """Temporarily replace a library routine with a deliberately wrong one."""
    if fault is None:
        yield
        return
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {sorted(FAULTS)}")
    mod, name, bad = FAULTS[fault]
    good = getattr(mod, name)
    setattr(mod, name, bad)
    try:
        yield
    finally:
        setattr(mod, name, good)


def run_criteria(only=None, seed: int = 0, fault: str | None = None, out_dir=None, echo=None) -> list[CriterionResult]:
    """Run the selected criteria (all by default) and return their results."""
    ctx = {"seed": seed, "out_dir": out_dir}
    wanted = set(only) if only else None
    results = []
    with injected(fault):
        for number, title, fn, budget in CRITERIA:
            if wanted is not None and number not in wanted:
                continue
            t0 = time.perf_counter()
            try:
                ok, detail = fn(ctx)
            except Exception as exc:  # a crash is a failure of that criterion, not of the battery
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            dt = time.perf_counter() - t0
            if budget is not None and dt > budget:
                ok, detail = False, f"{detail} (over {budget:g}s budget)"
            res = CriterionResult(number, title, bool(ok), detail, dt, budget)
            results.append(res)
            if echo is not None:
                echo(res.line())
    return results
