"""Command-line harness: ``run-flow``, ``check-hypotheses``, ``make-bubble``, ``verify``.

Configs are flat ``key = value`` text with ``#`` comments, e.g.::

    lmax = 48
    f_const = 1.3333333333333333
    f_terms = 2:0:-0.3333333333333333     # l:m:coefficient, space separated
    symmetry = rotation:0,0,1,2
    u0 = constant:1
    t_max = 200

With ``f_normalization = legendre`` (the default) a term ``l:m:c`` adds
``c P_l^|m|(cos theta) cos(m phi)`` (``sin(|m| phi)`` for ``m < 0``) with
Schmidt semi-normalised associated Legendre functions, so ``2:0:c`` is
``c P_2(x3)``.  ``f_normalization = orthonormal`` uses the library's
orthonormal basis directly.

Exit codes: 0 converged / hypotheses hold / verify passed; 1 aborted or
bad input; 2 concentrated; 3 out of time; 4 hypotheses fail; 5 verify failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import __version__
from . import conformal_ops as co
from .flow import (
    Aborted,
    Concentrated,
    Converged,
    FlowConfig,
    MaxTimeReached,
    Trajectory,
    run,
)
from .geometry import BubbleParams, bubble
from .spharm import (
    DEFAULT_LMAX,
    DEFAULT_OVERSAMPLE,
    GridField,
    GridSpec,
    SpectralField,
    analyze,
    build_grid,
    constant,
    degrees,
    lm_index,
    n_coeffs,
    read_field,
    synthesize,
    write_field,
)
from .symmetry import SymmetryAction, check_hypotheses, local_maximum_near, symmetrize, symmetry_defect

log = logging.getLogger("pmcflow")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONCENTRATED = 2
EXIT_MAXTIME = 3
EXIT_HYPOTHESES = 4
EXIT_VERIFY = 5

OUTCOME_EXIT = {
    Converged: EXIT_OK,
    Concentrated: EXIT_CONCENTRATED,
    MaxTimeReached: EXIT_MAXTIME,
    Aborted: EXIT_ERROR,
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path) -> tuple[dict[str, str], str]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path)), hashlib.sha256(text.encode()).hexdigest()


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


# ---------------------------------------------------------------------------
# prescribed functions
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class FSpec:
    """``f = const + sum of harmonic terms``, optionally group-averaged."""

    const: float = 1.0
    terms: tuple[tuple[int, int, float], ...] = ()
    normalization: str = "legendre"
    symmetry: SymmetryAction | None = None
    symmetrize: bool = False

    def __post_init__(self):
        if self.normalization not in ("legendre", "orthonormal"):
            raise ConfigError(f"f_normalization must be 'legendre' or 'orthonormal', got {self.normalization!r}")
        for l, m, _ in self.terms:
            if l < 0 or abs(m) > l:
                raise ConfigError(f"invalid harmonic term degree/order l={l}, m={m}")

    @staticmethod
    def parse_terms(text: str) -> tuple[tuple[int, int, float], ...]:
        terms = []
        for tok in text.replace(",", " ").split():
            parts = tok.split(":")
            if len(parts) != 3:
                raise ConfigError(f"harmonic term must be 'l:m:coefficient', got {tok!r}")
            try:
                terms.append((int(parts[0]), int(parts[1]), float(parts[2])))
            except ValueError:
                raise ConfigError(f"harmonic term must be 'l:m:coefficient', got {tok!r}") from None
        return tuple(terms)

    @property
    def degree(self) -> int:
        return max((l for l, _, _ in self.terms), default=0)

    def coefficients(self, L_max: int | None = None) -> SpectralField:
        L = self.degree if L_max is None else max(L_max, self.degree)
        c = np.zeros(n_coeffs(L))
        c[0] = self.const * math.sqrt(4 * math.pi)
        for l, m, a in self.terms:
            # Schmidt semi-normalised and orthonormal harmonics differ by sqrt(4 pi / (2l+1))
            scale = math.sqrt(4 * math.pi / (2 * l + 1)) if self.normalization == "legendre" else 1.0
            c[lm_index(l, m)] += a * scale
        return SpectralField(L, c)

    def build(self, spec: GridSpec) -> GridField:
        """Synthesize on ``spec`` and validate positivity (and symmetry if declared)."""
        if self.degree > spec.L_max:
            raise ConfigError(f"f has degree {self.degree} above the grid band limit {spec.L_max}")
        f = synthesize(self.coefficients(spec.L_max), spec)
        if self.symmetry is not None and self.symmetrize:
            f = symmetrize(f, self.symmetry)
        check_positive_refined(f, "f")
        if self.symmetry is not None:
            d = symmetry_defect(f, self.symmetry)
            if d >= 1e-10 and not self.symmetrize:
                log.warning("f is not %s-symmetric (defect %.3g); set symmetrize_f = true to average it",
                            self.symmetry.format(), d)
        return f

    def to_dict(self) -> dict:
        return {
            "const": self.const,
            "terms": [list(t) for t in self.terms],
            "normalization": self.normalization,
            "symmetry": self.symmetry.format() if self.symmetry else None,
            "symmetrize": self.symmetrize,
        }


def check_positive_refined(g: GridField, name: str) -> None:
    """Reject ``g`` unless its interpolant is positive, naming the minimum point.

    The grid minimum is refined by local minimisation of the spectral
    interpolant so dips between nodes are caught.
    """
    spec = g.spec
    i = int(np.argmin(g.values))
    p0 = spec.points.reshape(-1, 3)[i]
    c = analyze(g)
    spacing = max(math.pi / spec.n_theta, 2 * math.pi / spec.n_phi)
    neg_min, p = local_maximum_near(c * -1.0, p0, 2 * spacing, xtol=1e-9)
    lo = min(-neg_min, g.min())
    if not lo > 0:
        raise ConfigError(f"{name} must be strictly positive; minimum {lo:.6g} at point {np.round(p, 6).tolist()}")


def fspec_from(cfg: dict[str, str], symmetry: SymmetryAction | None) -> FSpec:
    return FSpec(
        const=float(cfg.pop("f_const", "1")),
        terms=FSpec.parse_terms(cfg.pop("f_terms", "")),
        normalization=cfg.pop("f_normalization", "legendre"),
        symmetry=symmetry,
        symmetrize=_bool(cfg.pop("symmetrize_f", "false")),
    )


def make_grid(L_max: int, oversample: float, symmetry: SymmetryAction | None) -> GridSpec:
    """Grid closed under ``symmetry`` when its axis is the polar axis."""
    k = None
    if symmetry is not None and symmetry.kind == "rotation":
        a = np.asarray(symmetry.vector)
        if np.allclose(np.abs(a), [0.0, 0.0, 1.0], atol=1e-14):
            k = symmetry.k
    return build_grid(L_max, oversample, symmetry_order=k)


# ---------------------------------------------------------------------------
# run-flow
# ---------------------------------------------------------------------------

_FLOW_FLOAT = ("dt_init", "dt_min", "dt_max", "cfl", "t_max", "residual_tol", "ef_violation_tol",
               "vol_drift_tol", "concentration_threshold", "u_floor")
_FLOW_INT = ("snapshot_every", "plateau_steps", "max_candidates", "max_steps")


@dataclasses.dataclass
class RunSetup:
    spec: GridSpec
    f: GridField
    fspec: FSpec
    u0: GridField
    u0_desc: str
    cfg: FlowConfig
    symmetry: SymmetryAction | None
    seed: int
    out_dir: str
    echo: dict


def initial_data(desc: str, spec: GridSpec, noise: float, seed: int, symmetry: SymmetryAction | None) -> GridField:
    desc = desc.strip()
    if desc.startswith("constant:"):
        u = constant(spec, float(desc.split(":", 1)[1]))
    elif desc.startswith("bubble:"):
        u = bubble(BubbleParams.parse(desc), spec)
    else:
        raise ConfigError(f"u0 must be 'constant:value' or 'bubble:cx,cy,cz,lambda', got {desc!r}")
    if noise:
        # low-degree multiplicative perturbation, reproducible from the seed
        rng = np.random.default_rng(seed)
        L = min(8, spec.L_max)
        l = degrees(L)
        c = SpectralField(L, np.where(l > 0, rng.standard_normal(n_coeffs(L)) / (1.0 + l) ** 2, 0.0))
        p = synthesize(c, spec).values
        u = u.with_values(u.values * (1.0 + noise * p / np.abs(p).max()))
        if symmetry is not None:
            u = symmetrize(u, symmetry)
    check_positive_refined(u, "u0")
    return u


def setup_run(cfg: dict[str, str], args) -> RunSetup:
    cfg = dict(cfg)
    echo = dict(cfg)
    L = int(cfg.pop("lmax", DEFAULT_LMAX))
    os_ = float(cfg.pop("oversample", DEFAULT_OVERSAMPLE))
    seed = int(cfg.pop("seed", 0))
    out_dir = cfg.pop("out_dir", "pmcflow_out")
    if args.lmax is not None:
        L = args.lmax
    if args.oversample is not None:
        os_ = args.oversample
    if args.seed is not None:
        seed = args.seed
    if args.out_dir is not None:
        out_dir = args.out_dir
    sym_text = cfg.pop("symmetry", "").strip()
    symmetry = SymmetryAction.parse(sym_text) if sym_text else None
    fspec = fspec_from(cfg, symmetry)
    u0_desc = cfg.pop("u0", "constant:1")
    noise = float(cfg.pop("u0_noise", "0"))

    kw: dict = {"L_max": L, "oversample": os_}
    for k in _FLOW_FLOAT:
        if k in cfg:
            kw[k] = float(cfg.pop(k))
    for k in _FLOW_INT:
        if k in cfg:
            kw[k] = int(cfg.pop(k))
    if "concentration_radii" in cfg:
        kw["concentration_radii"] = tuple(float(r) for r in cfg.pop("concentration_radii").replace(",", " ").split())
    if cfg:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(cfg))}")
    flow_cfg = FlowConfig(**kw)

    spec = make_grid(L, os_, symmetry)
    f = fspec.build(spec)
    u0 = initial_data(u0_desc, spec, noise, seed, symmetry)
    echo.update(lmax=str(L), oversample=repr(os_), seed=str(seed), out_dir=out_dir)
    return RunSetup(spec, f, fspec, u0, u0_desc, flow_cfg, symmetry, seed, out_dir, echo)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def outcome_summary(out) -> dict:
    st = out.state
    d = {
        "outcome": out.name,
        "t": st.t,
        "steps": st.step_index,
        "report": st.report.to_dict(),
    }
    if isinstance(out, Converged):
        d["alpha_inf"] = out.alpha_inf
    elif isinstance(out, Concentrated):
        d["concentration"] = out.report.to_dict()
    elif isinstance(out, Aborted):
        d["reason"] = out.reason
    return d


def cmd_run_flow(args) -> int:
    t0 = time.perf_counter()
    cfg, cfg_hash = read_config(args.config)
    setup = setup_run(cfg, args)
    out_dir = setup.out_dir
    snap_dir = os.path.join(out_dir, "snapshots")
    os.makedirs(snap_dir, exist_ok=True)

    snapshot_files: list[str] = []

    def on_snapshot(step, t, u):
        path = os.path.join(snap_dir, f"u_{step:06d}.sph")
        write_field(path, u)
        snapshot_files.append(path)

    traj, out = run(setup.u0, setup.f, setup.cfg, symmetry=setup.symmetry, on_snapshot=on_snapshot)

    f_path = os.path.join(out_dir, "f.sph")
    write_field(f_path, setup.f)
    traj_path = os.path.join(out_dir, "trajectory.csv")
    traj.write_csv(traj_path)

    report = {
        "version": __version__,
        "fspec": setup.fspec.to_dict(),
        "u0": setup.u0_desc,
        "flow_config": dataclasses.asdict(setup.cfg),
        "grid": {"L_max": setup.spec.L_max, "n_theta": setup.spec.n_theta, "n_phi": setup.spec.n_phi},
        **outcome_summary(out),
        "stationary_residual": co.stationary_residual(out.state.u, setup.f, lmax=setup.cfg.L_max),
    }
    if setup.symmetry is not None:
        report["hypotheses"] = check_hypotheses(setup.f, setup.symmetry).to_dict()
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, default=_json_default)
        fh.write("\n")

    outputs = [traj_path, f_path, report_path] + snapshot_files
    check_outputs(traj_path, report_path, [f_path] + snapshot_files)
    manifest = {
        "config": setup.echo,
        "config_path": os.path.abspath(args.config),
        "config_sha256": cfg_hash,
        "outputs": [{"path": p, "sha256": _sha256(p)} for p in outputs],
        "outcome": out.name,
        "wall_seconds": time.perf_counter() - t0,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")

    r = out.state.report
    print(f"{out.name} after {out.state.step_index} steps, t = {out.state.t:.6g}")
    print(f"  E_f = {r.E_f:.10g}  alpha = {r.alpha:.10g}  residual_sup = {r.residual_sup:.3e}")
    if isinstance(out, Aborted):
        print(f"  reason: {out.reason}", file=sys.stderr)
    print(f"  outputs in {out_dir}")
    return OUTCOME_EXIT[type(out)]


def check_outputs(traj_path, report_path, field_paths) -> None:
    """Every emitted file must parse with the package's own readers."""
    Trajectory.read_csv(traj_path)
    with open(report_path) as fh:
        json.load(fh)
    for p in field_paths:
        read_field(p)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not math.isfinite(o):
        return repr(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


# ---------------------------------------------------------------------------
# check-hypotheses / make-bubble
# ---------------------------------------------------------------------------

def _fspec_from_args(args, symmetry) -> FSpec:
    cfg: dict[str, str] = {}
    if getattr(args, "config", None):
        cfg, _ = read_config(args.config)
    fs = fspec_from(dict(cfg), symmetry)
    terms = fs.terms
    if args.f_term:
        terms = terms + tuple(t for s in args.f_term for t in FSpec.parse_terms(s))
    return dataclasses.replace(
        fs,
        const=fs.const if args.f_const is None else args.f_const,
        terms=terms,
        normalization=args.f_normalization or fs.normalization,
        symmetrize=fs.symmetrize or args.symmetrize_f,
    )


def _grid_args(args, cfg: dict[str, str]) -> tuple[int, float]:
    L = args.lmax if args.lmax is not None else int(cfg.get("lmax", DEFAULT_LMAX))
    os_ = args.oversample if args.oversample is not None else float(cfg.get("oversample", DEFAULT_OVERSAMPLE))
    return L, os_


def cmd_check_hypotheses(args) -> int:
    cfg = read_config(args.config)[0] if args.config else {}
    sym_text = args.symmetry or cfg.get("symmetry", "")
    if not sym_text:
        raise ConfigError("a symmetry is required (--symmetry or 'symmetry =' in the config)")
    symmetry = SymmetryAction.parse(sym_text)
    fs = _fspec_from_args(args, symmetry)
    spec = make_grid(*_grid_args(args, cfg), symmetry)
    f = fs.build(spec)
    rep = check_hypotheses(f, symmetry, tol=args.tol)
    print(rep.to_json(indent=2))
    print(rep.table(), file=sys.stderr)
    return EXIT_OK if rep.condition8 and rep.condition9 else EXIT_HYPOTHESES


def cmd_make_bubble(args) -> int:
    params = BubbleParams.parse(args.params)
    L, os_ = _grid_args(args, {})
    spec = build_grid(L, os_)
    u = bubble(params, spec)
    out = args.out or os.path.join(args.out_dir or ".", "bubble.sph")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_field(out, u)
    print(f"wrote {out}")
    print(f"E       = {co.energy(u):.12g}")
    print(f"volume  = {co.volume(u):.12g}")
    if args.f_const is not None or args.f_term or args.config:
        f = _fspec_from_args(args, None).build(spec)
        print(f"E_f     = {co.normalized_energy(u, f):.12g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    from .verify import TOTAL_BUDGET, run_criteria

    only = None
    if args.only:
        try:
            only = [int(s) for s in args.only.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"--only expects criterion numbers, got {args.only!r}") from None
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
    t0 = time.perf_counter()
    results = run_criteria(only=only, seed=args.seed or 0, fault=args.inject_fault,
                           out_dir=args.out_dir, echo=print)
    total = time.perf_counter() - t0
    failed = [r for r in results if not r.passed]
    print(f"total {total:.1f}s (budget {TOTAL_BUDGET:g}s)")
    if total > TOTAL_BUDGET:
        print("FAIL: total runtime over budget")
        return EXIT_VERIFY
    if failed:
        print("FAILED: " + ", ".join(f"{r.number} ({r.title})" for r in failed))
        return EXIT_VERIFY
    print(f"all {len(results)} criteria passed")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=None, help="directory for output files")
    common.add_argument("--seed", type=int, default=None, help="seed for random inputs (default 0)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--lmax", type=int, default=None, help=f"band limit (default {DEFAULT_LMAX})")
    grid.add_argument("--oversample", type=float, default=None, help=f"grid oversampling (default {DEFAULT_OVERSAMPLE:g})")

    fopts = argparse.ArgumentParser(add_help=False)
    fopts.add_argument("--f-const", type=float, default=None, help="constant part of f")
    fopts.add_argument("--f-term", action="append", default=[], metavar="L:M:C", help="harmonic term of f (repeatable)")
    fopts.add_argument("--f-normalization", choices=("legendre", "orthonormal"), default=None)
    fopts.add_argument("--symmetrize-f", action="store_true", help="average f over the symmetry group")

    p = argparse.ArgumentParser(prog="pmcflow", description="Prescribed mean curvature flow on the unit ball.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("run-flow", parents=[common, grid], help="integrate the flow from a config file")
    q.add_argument("config", help="flat key = value config")
    q.set_defaults(func=cmd_run_flow)

    q = sub.add_parser("check-hypotheses", parents=[common, grid, fopts], help="check the existence hypotheses for f")
    q.add_argument("--config", default=None, help="read f and symmetry from a config file")
    q.add_argument("--symmetry", default=None, help="reflection:ex,ey,ez or rotation:ax,ay,az,k")
    q.add_argument("--tol", type=float, default=1e-6, help="strictness margin (default 1e-6)")
    q.set_defaults(func=cmd_check_hypotheses)

    q = sub.add_parser("make-bubble", parents=[common, grid, fopts], help="write a bubble conformal factor")
    q.add_argument("params", help="bubble:cx,cy,cz,lambda")
    q.add_argument("--out", default=None, help="output SPHFIELD path (default OUT_DIR/bubble.sph)")
    q.add_argument("--config", default=None, help="read f from a config file for E_f")
    q.set_defaults(func=cmd_make_bubble)

    q = sub.add_parser("verify", parents=[common], help="run the built-in acceptance battery")
    q.add_argument("--only", default=None, help="comma separated criterion numbers")
    q.add_argument("--inject-fault", default=None, choices=("dtn", "sigma"),
                   help="deliberately break a routine to check the battery catches it")
    q.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    p = build_parser()
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, co.DomainError) as exc:
        print(f"pmcflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
