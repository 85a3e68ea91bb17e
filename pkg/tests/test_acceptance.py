"""Acceptance criteria 1-10, one PASS/FAIL line each (see the summary section)."""

import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import eval_legendre

from pmcflow import conformal_ops as co
from pmcflow.flow import Converged, FlowConfig, cap_masses, detect_concentration, run
from pmcflow.geometry import NORTH, BubbleParams, bubble, geodesic_distance, sigma, sigma_inv
from pmcflow.spharm import (
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
from pmcflow.symmetry import SymmetryAction, check_hypotheses, symmetry_defect

ROT_Z = SymmetryAction.rotation((0, 0, 1), 2)


def zonal_bubble(lam, t):
    return 4 * lam / (4 * (1 - t) + lam * lam * (1 + t))


def p2_f(x, y, z):
    return 4 / 3 - eval_legendre(2, z) / 3


@pytest.fixture(scope="module")
def main_run():
    spec = build_grid(48, symmetry_order=2)
    f = sample(p2_f, spec)
    cfg = FlowConfig(L_max=48, t_max=200.0)
    t0 = time.perf_counter()
    traj, out = run(constant(spec), f, cfg, symmetry=ROT_Z)
    return spec, f, cfg, traj, out, time.perf_counter() - t0


def test_criterion_01_spectral_core(criterion):
    t0 = time.perf_counter()
    L = 32
    rng = np.random.default_rng(0)
    c = SpectralField(L, rng.standard_normal(n_coeffs(L)))
    spec = build_grid(L)
    g = synthesize(c, spec)
    rt = float(np.abs(analyze(g, L).coeffs - c.coeffs).max())
    # Parseval: integral of g^2 against the coefficient sum, with g^2 band limited to 2L
    fine = build_grid(2 * L, 1.0)
    energy = integrate(synthesize(c, fine).with_values(synthesize(c, fine).values ** 2))
    parseval = abs(energy - float(np.sum(c.coeffs ** 2))) / float(np.sum(c.coeffs ** 2))
    quad1 = abs(integrate(constant(spec)) - 4 * math.pi) / (4 * math.pi)
    dt = time.perf_counter() - t0
    ok = rt < 1e-10 and parseval < 1e-9 and quad1 < 1e-12 and dt < 5
    criterion(1, ok, f"roundtrip {rt:.1e}, Parseval {parseval:.1e}, int 1 {quad1:.1e}, {dt:.2f}s")


def test_criterion_02_bubble_identities(criterion):
    t0 = time.perf_counter()
    spec = build_grid(64)
    worst_h = worst_e = worst_v = 0.0
    for lam in (0.25, 0.5, 1.0, 2.0, 4.0):
        vol_oracle = 0.5 * quad(lambda t: zonal_bubble(lam, t) ** 2, -1, 1, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
        u = bubble(BubbleParams((0.0, 0.0, 1.0), lam), spec)
        worst_h = max(worst_h, float(np.abs(co.mean_curvature(u).values - 1).max()))
        worst_e = max(worst_e, abs(co.energy(u) - vol_oracle))
        worst_v = max(worst_v, abs(co.volume(u) - vol_oracle))
    round_err = float(np.abs(bubble(BubbleParams((0.0, 0.0, 1.0), 2.0), spec).values - 1).max())
    dt = time.perf_counter() - t0
    ok = worst_h < 1e-6 and worst_e < 1e-6 and worst_v < 1e-6 and round_err < 1e-12 and dt < 30
    criterion(2, ok, f"H {worst_h:.1e}, E {worst_e:.1e}, vol {worst_v:.1e}, lambda=2 {round_err:.1e}, {dt:.2f}s")


def test_criterion_03_bubble_limit(criterion):
    t0 = time.perf_counter()
    spec = build_grid(128)
    f = sample(lambda x, y, z: (3 + z) / 2, spec)
    vals, oracles = [], []
    for lam in (0.4, 0.2, 0.1):
        vals.append(co.normalized_energy(bubble(BubbleParams((0.0, 0.0, 1.0), lam), spec), f))
        fvol = 0.5 * quad(lambda t: (3 + t) / 2 * zonal_bubble(lam, t) ** 2, -1, 1, epsabs=1e-14, limit=200)[0]
        oracles.append(fvol ** -0.5)
    dt = time.perf_counter() - t0
    gap = abs(vals[2] - 2 ** -0.5)
    agree = max(abs(a - b) for a, b in zip(vals, oracles))
    ok = vals[0] > vals[1] > vals[2] and gap < 0.05 and agree < 1e-6 and dt < 60
    criterion(3, ok, f"E_f {vals[0]:.5f} > {vals[1]:.5f} > {vals[2]:.5f}, gap {gap:.4f}, oracle {agree:.1e}, {dt:.1f}s")


def test_criterion_04_conservation_and_monotonicity(criterion, main_run):
    spec, f, cfg, traj, out, seconds = main_run
    vol = traj.column("volume")
    ef = traj.column("E_f")
    drift = float(np.abs(vol - vol[0]).max() / vol[0])
    rise = float(max(np.diff(ef).max(), 0.0))
    ok = drift < 1e-6 and rise <= 1e-8 and ef[-1] <= ef[0] and seconds < 300
    criterion(4, ok, f"drift {drift:.1e}, max E_f rise {rise:.1e}, E_f {ef[0]:.6f} -> {ef[-1]:.6f}, {seconds:.1f}s")


def test_criterion_05_convergence(criterion, main_run, tmp_path):
    spec, f, cfg, traj, out, _ = main_run
    converged = isinstance(out, Converged)
    res = out.state.report.residual_sup
    path = tmp_path / "u_inf.sph"
    write_field(path, out.state.u)
    u = read_field(path, oversample=spec.oversample)
    f2 = sample(p2_f, u.spec)
    again = co.stationary_residual(u, f2, lmax=cfg.L_max)
    ok = converged and res < 1e-5 and abs(again - res) < 1e-8
    criterion(5, ok, f"{out.name}, residual {res:.2e}, from snapshot {again:.2e}")


def test_criterion_06_symmetry_preservation(criterion, main_run):
    _, _, _, traj, _, _ = main_run
    rot = max(symmetry_defect(u, ROT_Z) for _, _, u in traj.snapshots)
    refl = SymmetryAction.reflection((1, 0, 0))
    spec = build_grid(32)
    f = sample(lambda x, y, z: 1 + 0.2 * (x * x - 1 / 3), spec)
    u0 = sample(lambda x, y, z: 1 + 0.1 * x * x, spec)
    rtraj, _ = run(u0, f, FlowConfig(L_max=32, t_max=20.0, snapshot_every=10), symmetry=refl)
    ref = max(symmetry_defect(u, refl) for _, _, u in rtraj.snapshots)
    ok = rot < 1e-9 and ref < 1e-9
    criterion(6, ok, f"rotation defect {rot:.1e} over {len(traj.snapshots)} snapshots, reflection {ref:.1e}")


def test_criterion_07_concentration_detector(criterion):
    spec = build_grid(64)
    one = constant(spec)
    cfg = FlowConfig(L_max=64, concentration_radii=(0.2, 0.4))
    rep = detect_concentration(bubble(BubbleParams((0.0, 0.0, 1.0), 0.05), spec), one, cfg)
    top = rep.candidates[0]
    dist = geodesic_distance(top.point, NORTH)
    flat = detect_concentration(one, one, cfg)
    err = max(abs(c.cap_masses[i] - math.sqrt((1 - math.cos(r)) / 2))
              for c in flat.candidates for i, r in enumerate(cfg.concentration_radii))
    direct = cap_masses(one, np.array([[0.0, 0.0, 1.0]]), 0.4)[0]
    ok = top.cap_masses[1] >= 0.9 and top.flagged and dist < 0.05 and err < 1e-3 and not flat.flagged
    ok = ok and abs(direct - math.sqrt((1 - math.cos(0.4)) / 2)) < 1e-3
    criterion(7, ok, f"bubble mass(0.4) {top.cap_masses[1]:.4f} at dist {dist:.1e}, round err {err:.1e}")


def test_criterion_08_hypothesis_checker(criterion):
    spec = build_grid(32, symmetry_order=2)
    # Legendre oracles on F = {N, S}: Laplacian of P_l is -l(l+1) P_l
    cases = [
        (p2_f, True, 4 / 3 - 1 / 3, [-6 * (-1 / 3), -6 * (-1 / 3)]),
        (lambda x, y, z: 1 + 0 * z, False, 1.0, [0.0, 0.0]),
        (lambda x, y, z: (3 + z) / 2, False, 2.0, [-2 * 0.5]),
    ]
    worst = 0.0
    bools_ok = True
    for fn, c8, fmax, laps in cases:
        rep = check_hypotheses(sample(fn, spec), ROT_Z)
        bools_ok &= rep.condition8 is c8 and rep.condition9 is True and len(rep.laplacian_at_argmax) == len(laps)
        worst = max(worst, abs(rep.fixed_set_max - fmax))
        if len(rep.laplacian_at_argmax) == len(laps):
            worst = max(worst, max(abs(a - b) for a, b in zip(rep.laplacian_at_argmax, laps)))
    ok = bools_ok and worst < 1e-8
    criterion(8, ok, f"booleans {'match' if bools_ok else 'differ'}, worst scalar error {worst:.1e}")


def test_criterion_09_stereographic(criterion):
    rng = np.random.default_rng(9)
    d = rng.standard_normal((10_000, 3))
    x = d / np.linalg.norm(d, axis=1, keepdims=True) * rng.random((10_000, 1)) ** (1 / 3)
    e1 = float(np.abs(sigma_inv(sigma(x)) - x).max())
    z = np.column_stack([rng.uniform(-5, 5, (10_000, 2)), rng.uniform(0, 5, 10_000)])
    e2 = float(np.abs(sigma(sigma_inv(z)) - z).max())
    fixed = max(
        float(np.abs(sigma([0.0, 0.0, 1.0]) - [0.0, 0.0, 0.0]).max()),
        float(np.abs(sigma([0.0, 0.0, 0.0]) - [0.0, 0.0, 2.0]).max()),
        float(np.abs(sigma([1.0, 0.0, 0.0]) - [2.0, 0.0, 0.0]).max()),
    )
    ok = e1 < 1e-12 and e2 < 1e-12 and fixed < 1e-14
    criterion(9, ok, f"roundtrips {e1:.1e} / {e2:.1e}, fixed values {fixed:.1e}")


def test_criterion_10_verify_command(criterion):
    t0 = time.perf_counter()
    r = subprocess.run([sys.executable, "-m", "pmcflow.cli", "verify"], capture_output=True, text=True, timeout=600)
    dt = time.perf_counter() - t0
    ok = r.returncode == 0 and dt < 600
    tail = r.stdout.strip().splitlines()[-1] if r.stdout.strip() else r.stderr.strip()[-200:]
    criterion(10, ok, f"exit {r.returncode} in {dt:.1f}s: {tail}")
