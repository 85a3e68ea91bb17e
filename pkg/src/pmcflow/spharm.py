"""Gauss-Legendre grids and real spherical-harmonic transforms on S^2.

Basis: real orthonormal harmonics without the Condon-Shortley phase,

    Y_{l,0}  = lam_{l,0}(cos theta)
    Y_{l,m}  = sqrt(2) lam_{l,m}(cos theta) cos(m phi),   m > 0
    Y_{l,-m} = sqrt(2) lam_{l,m}(cos theta) sin(m phi),   m > 0

where lam_{l,m} is the associated Legendre function normalised so that
2 pi * int lam_{l,m}^2 dx = 1.  Coefficients are stored flat, ``l`` outer and
``m = -l..l`` inner, i.e. index ``l*l + l + m``.

Transforms are the textbook O(L^3) kind: an FFT in longitude followed by a
Legendre quadrature per zonal wavenumber.
"""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np

MAX_LMAX = 512
DEFAULT_LMAX = 64
DEFAULT_OVERSAMPLE = 2.0


class GridResourceError(ValueError):
    """Requested band limit exceeds the implementation cap."""


def lm_index(l, m):
    return l * l + l + m


def n_coeffs(lmax: int) -> int:
    return (lmax + 1) ** 2


def degrees(lmax: int) -> np.ndarray:
    """Degree ``l`` of every flat coefficient slot."""
    return np.repeat(np.arange(lmax + 1), 2 * np.arange(lmax + 1) + 1)


def legendre_rows(lmax: int, x):
    """Yield ``(m, rows)`` with ``rows[k] = lam_{m+k,m}(x)`` for ``m = 0..lmax``.

    Standard three-term recurrence in ``l`` seeded from the sectoral values,
    stable for all ``m``.  Only one ``m`` block is alive at a time.
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    pmm = np.full_like(x, 1.0 / math.sqrt(4.0 * math.pi))
    for m in range(lmax + 1):
        if m > 0:
            pmm = math.sqrt((2 * m + 1) / (2.0 * m)) * s * pmm
        rows = np.empty((lmax - m + 1, x.size))
        rows[0] = pmm
        if lmax > m:
            rows[1] = math.sqrt(2 * m + 3) * x * pmm
        for k in range(2, lmax - m + 1):
            l = m + k
            a = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = math.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            rows[k] = a * (x * rows[k - 1] - b * rows[k - 2])
        yield m, rows


def legendre_table(lmax: int, x) -> list[np.ndarray]:
    """All blocks of :func:`legendre_rows` as a list indexed by ``m``."""
    return [rows for _, rows in legendre_rows(lmax, x)]


@dataclasses.dataclass(frozen=True, eq=False)
class GridSpec:
    """Gauss-Legendre (colatitude) x equispaced (longitude) grid.

    Attributes:
      L_max: band limit of fields living on this grid.
      n_theta: number of colatitude nodes (Gauss nodes in cos theta).
      n_phi: number of longitudes, ``phi_j = 2 pi j / n_phi``.
      theta_nodes: colatitudes, strictly increasing in (0, pi).
      quad_weights: Gauss weights in cos theta (sum to 2).
      oversample: resolution ratio relative to ``L_max``.
    """

    L_max: int
    n_theta: int
    n_phi: int
    theta_nodes: np.ndarray
    quad_weights: np.ndarray
    oversample: float = 1.0

    @functools.cached_property
    def cos_theta(self) -> np.ndarray:
        return np.cos(self.theta_nodes)

    @functools.cached_property
    def phi_nodes(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_phi) / self.n_phi

    @functools.cached_property
    def area_weights(self) -> np.ndarray:
        """Quadrature weight of every node, shape ``(n_theta, n_phi)``."""
        w = self.quad_weights * (2.0 * np.pi / self.n_phi)
        return np.repeat(w[:, None], self.n_phi, axis=1)

    @functools.cached_property
    def points(self) -> np.ndarray:
        """Cartesian coordinates of the nodes, shape ``(n_theta, n_phi, 3)``."""
        st = np.sin(self.theta_nodes)[:, None]
        ct = self.cos_theta[:, None]
        ph = self.phi_nodes[None, :]
        return np.stack(
            [st * np.cos(ph), st * np.sin(ph), np.broadcast_to(ct, (self.n_theta, self.n_phi))],
            axis=-1,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_theta, self.n_phi)

    @property
    def resolvable_lmax(self) -> int:
        """Largest degree the grid's quadrature transforms exactly."""
        return min(self.n_theta - 1, (self.n_phi - 1) // 2)

    def legendre(self, lmax: int | None = None) -> list[np.ndarray]:
        return _grid_legendre(self, self.L_max if lmax is None else lmax)

    def same_as(self, other: "GridSpec") -> bool:
        return (
            self.L_max == other.L_max
            and self.n_theta == other.n_theta
            and self.n_phi == other.n_phi
        )


@functools.lru_cache(maxsize=8)
def _grid_legendre(spec: GridSpec, lmax: int) -> list[np.ndarray]:
    return legendre_table(lmax, spec.cos_theta)


def build_grid(L_max: int, oversample: float = DEFAULT_OVERSAMPLE, symmetry_order: int | None = None) -> GridSpec:
    """Build a Gauss-Legendre grid for band limit ``L_max``.

    ``symmetry_order`` is an optional hint ``k``: longitudes are rounded up to
    a multiple of ``2k`` so that rotation by ``pi/k`` about the polar axis
    permutes the nodes.
    """
    if L_max < 0:
        raise ValueError(f"L_max must be nonnegative, got {L_max}")
    if oversample < 1:
        raise ValueError(f"oversample must be >= 1, got {oversample}")
    if L_max > MAX_LMAX:
        raise GridResourceError(f"L_max={L_max} exceeds cap {MAX_LMAX}")
    n_theta = math.ceil(oversample * (L_max + 1) - 1e-9)
    n_phi = math.ceil(oversample * (2 * L_max + 1) - 1e-9)
    n_phi += n_phi % 2
    if symmetry_order is not None:
        if symmetry_order < 2:
            raise ValueError("rotation order k must be >= 2")
        q = 2 * symmetry_order
        n_phi = q * math.ceil(n_phi / q)
    return _make_grid(L_max, n_theta, n_phi, oversample)


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes (ascending) and weights on [-1, 1].

    numpy's weights lose ~1e-10 relative accuracy by n ~ 250, which shows up
    as quadrature noise amplified by l(l+1) in spectral Laplacians; a few
    Newton steps in extended precision restore them to roundoff.  Nodes and
    weights are made exactly mirror symmetric.
    """
    x0, _ = np.polynomial.legendre.leggauss(n)
    x = x0.astype(np.longdouble)

    def p_and_dp(x):
        p0, p1 = np.ones_like(x), x.copy()
        for k in range(2, n + 1):
            p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
        if n == 1:
            p0 = np.ones_like(x)
        return p1, n * (x * p1 - p0) / (x * x - 1)

    for _ in range(2):
        p, dp = p_and_dp(x)
        x = x - p / dp
    _, dp = p_and_dp(x)
    w = 2 / ((1 - x * x) * dp * dp)
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    # exact mirror symmetry of the nodes keeps x3 -> -x3 a node permutation
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    return x, w


def _make_grid(L_max: int, n_theta: int, n_phi: int, oversample: float) -> GridSpec:
    x, w = gauss_legendre(n_theta)
    return GridSpec(
        L_max=L_max,
        n_theta=n_theta,
        n_phi=n_phi,
        theta_nodes=np.arccos(x[::-1]),
        quad_weights=w[::-1].copy(),
        oversample=float(oversample),
    )


@dataclasses.dataclass(frozen=True, eq=False)
class GridField:
    """Real function sampled on the nodes of ``spec``."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.spec.shape:
            raise ValueError(f"field shape {v.shape} does not match grid {self.spec.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())

    def with_values(self, values) -> "GridField":
        return GridField(self.spec, values)


@dataclasses.dataclass(frozen=True, eq=False)
class SpectralField:
    """Real orthonormal harmonic coefficients, flat ``l``-outer layout."""

    L_max: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (n_coeffs(self.L_max),):
            raise ValueError(
                f"expected {n_coeffs(self.L_max)} coefficients for L_max={self.L_max}, got {c.shape}"
            )
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __getitem__(self, lm: tuple[int, int]) -> float:
        l, m = lm
        if not (0 <= l <= self.L_max and -l <= m <= l):
            raise IndexError(f"(l={l}, m={m}) outside band limit {self.L_max}")
        return float(self.coeffs[lm_index(l, m)])

    @classmethod
    def zeros(cls, L_max: int) -> "SpectralField":
        return cls(L_max, np.zeros(n_coeffs(L_max)))

    @classmethod
    def from_terms(cls, L_max: int, terms: dict[tuple[int, int], float]) -> "SpectralField":
        c = np.zeros(n_coeffs(L_max))
        for (l, m), a in terms.items():
            c[lm_index(l, m)] += a
        return cls(L_max, c)

    def truncate(self, L_max: int) -> "SpectralField":
        if L_max >= self.L_max:
            c = np.zeros(n_coeffs(L_max))
            c[: self.coeffs.size] = self.coeffs
            return SpectralField(L_max, c)
        return SpectralField(L_max, self.coeffs[: n_coeffs(L_max)])

    def scale_by_degree(self, factors: np.ndarray) -> "SpectralField":
        """Multiply every degree-``l`` block by ``factors[l]``."""
        return SpectralField(self.L_max, self.coeffs * np.asarray(factors, float)[degrees(self.L_max)])

    def __add__(self, other: "SpectralField") -> "SpectralField":
        L = max(self.L_max, other.L_max)
        return SpectralField(L, self.truncate(L).coeffs + other.truncate(L).coeffs)

    def __mul__(self, s: float) -> "SpectralField":
        return SpectralField(self.L_max, self.coeffs * s)

    __rmul__ = __mul__


def analyze(g: GridField, L_max: int | None = None) -> SpectralField:
    """Quadrature projection of ``g`` onto harmonics of degree <= ``L_max``.

    ``L_max`` defaults to the grid's band limit; larger values up to
    ``spec.resolvable_lmax`` are allowed.
    """
    spec = g.spec
    if g.values.shape != spec.shape:
        raise ValueError("field shape does not match its grid")
    L = spec.L_max if L_max is None else L_max
    if L > spec.resolvable_lmax:
        raise ValueError(f"grid resolves degrees <= {spec.resolvable_lmax}, asked for {L}")
    G = np.fft.rfft(g.values, axis=1) * (2.0 * np.pi / spec.n_phi)
    G = G * spec.quad_weights[:, None]
    tables = spec.legendre(L)
    out = np.zeros(n_coeffs(L))
    sq2 = math.sqrt(2.0)
    for m in range(L + 1):
        ls = np.arange(m, L + 1)
        base = ls * ls + ls
        proj = tables[m] @ G[:, m]
        if m == 0:
            out[base] = proj.real
        else:
            out[base + m] = sq2 * proj.real
            out[base - m] = -sq2 * proj.imag
    return SpectralField(L, out)


def synthesize(c: SpectralField, spec: GridSpec) -> GridField:
    """Evaluate the coefficient expansion at the nodes of ``spec``."""
    if c.L_max > spec.resolvable_lmax:
        raise ValueError(f"grid resolves degrees <= {spec.resolvable_lmax}, field has L_max={c.L_max}")
    L = c.L_max
    tables = spec.legendre(L)
    F = np.zeros((spec.n_theta, spec.n_phi // 2 + 1), dtype=complex)
    a = c.coeffs
    sq2 = math.sqrt(2.0)
    for m in range(L + 1):
        ls = np.arange(m, L + 1)
        base = ls * ls + ls
        if m == 0:
            F[:, 0] = spec.n_phi * (a[base] @ tables[0])
        else:
            cm = sq2 * (a[base + m] @ tables[m])
            sm = sq2 * (a[base - m] @ tables[m])
            F[:, m] = 0.5 * spec.n_phi * (cm - 1j * sm)
    return GridField(spec, np.fft.irfft(F, n=spec.n_phi, axis=1))


def project(g: GridField, L_max: int | None = None) -> GridField:
    """Band-limit ``g`` to ``L_max`` (default: grid band limit), same grid."""
    return synthesize(analyze(g, L_max), g.spec)


def integrate(g: GridField) -> float:
    """Integral of ``g`` over S^2 with the standard area element."""
    return float(np.sum(g.values * g.spec.area_weights))


def average(g: GridField) -> float:
    """Mean value of ``g`` over S^2 (integral divided by 4 pi)."""
    return integrate(g) / (4.0 * math.pi)


def laplace_beltrami(c: SpectralField) -> SpectralField:
    ls = np.arange(c.L_max + 1)
    return c.scale_by_degree(-ls * (ls + 1.0))


def _as_points(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 3:
        raise ValueError("points must be 3-vectors")
    return p


def eval_at_points(c: SpectralField, pts, check_unit: bool = True) -> np.ndarray:
    """Evaluate the expansion at arbitrary unit vectors ``pts`` (shape ``(..., 3)``)."""
    pts = _as_points(pts)
    shape = pts.shape[:-1]
    flat = pts.reshape(-1, 3)
    if check_unit:
        err = np.abs(np.linalg.norm(flat, axis=1) - 1.0)
        if flat.size and err.max() > 1e-12:
            raise ValueError(f"points must lie on the unit sphere (|p|-1 = {err.max():.3g})")
    z = np.clip(flat[:, 2], -1.0, 1.0)
    phi = np.arctan2(flat[:, 1], flat[:, 0])
    L = c.L_max
    rc = _recurrence_coeffs(L)
    sq2 = math.sqrt(2.0)
    ms = np.arange(L + 1)
    cos_m = np.cos(ms[:, None] * phi[None, :])
    sin_m = np.sin(ms[:, None] * phi[None, :])
    s = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    a = c.coeffs
    out = np.zeros(flat.shape[0])
    # l-outer recurrence vectorised over m: prev2[m] = lam_{l-2,m}, prev[m] = lam_{l-1,m}
    prev2 = np.zeros((L + 1, z.size))
    prev = np.zeros((L + 1, z.size))
    sect = np.full_like(z, 1.0 / math.sqrt(4.0 * math.pi))
    for l in range(L + 1):
        cur = np.zeros((L + 1, z.size))
        if l > 0:
            sect = math.sqrt((2 * l + 1) / (2.0 * l)) * s * sect
            cur[l - 1] = math.sqrt(2 * l + 1) * z * prev[l - 1]
        cur[l] = sect
        if l > 1:
            cur[: l - 1] = rc[0][l, : l - 1, None] * (z * prev[: l - 1] - rc[1][l, : l - 1, None] * prev2[: l - 1])
        base = l * l + l
        blk = cur[: l + 1]
        out += a[base] * blk[0]
        if l > 0:
            pos = a[base + 1 : base + l + 1]
            neg = a[base - l : base][::-1]
            out += sq2 * (pos @ (blk[1:] * cos_m[1 : l + 1]) + neg @ (blk[1:] * sin_m[1 : l + 1]))
        prev2, prev = prev, cur
    return out.reshape(shape)


@functools.lru_cache(maxsize=8)
def _recurrence_coeffs(L: int) -> tuple[np.ndarray, np.ndarray]:
    A = np.zeros((L + 1, L + 1))
    B = np.zeros((L + 1, L + 1))
    for l in range(2, L + 1):
        m = np.arange(l - 1)
        A[l, : l - 1] = np.sqrt((4.0 * l * l - 1) / (l * l - m * m))
        B[l, : l - 1] = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1) ** 2 - 1))
    return A, B


def eval_at_point(c: SpectralField, p) -> float:
    p = _as_points(p)
    if p.shape != (3,):
        raise ValueError("eval_at_point takes a single 3-vector")
    return float(eval_at_points(c, p[None, :])[0])


def tangent_basis(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal tangent vectors at the unit vector ``p``."""
    p = np.asarray(p, dtype=float)
    helper = np.array([1.0, 0.0, 0.0]) if abs(p[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = helper - p * np.dot(helper, p)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(p, e1)


def surface_gradient(c: SpectralField, p, h: float = 1e-3) -> np.ndarray:
    """Tangential gradient of the expansion at ``p``.

    Fourth-order central differences of the spectral interpolant along
    geodesics in two tangent directions.
    """
    p = np.asarray(p, dtype=float)
    e1, e2 = tangent_basis(p)
    steps = np.array([-2.0, -1.0, 1.0, 2.0]) * h
    stencil = np.array([1.0, -8.0, 8.0, -1.0]) / (12.0 * h)
    pts = []
    for e in (e1, e2):
        for s in steps:
            pts.append(math.cos(s) * p + math.sin(s) * e)
    vals = eval_at_points(c, np.array(pts), check_unit=False).reshape(2, 4)
    d1, d2 = vals @ stencil
    return d1 * e1 + d2 * e2


def real_sph_harm(l: int, m: int, pts) -> np.ndarray:
    """Single basis function Y_{l,m} at unit vectors ``pts``."""
    c = SpectralField.from_terms(l, {(l, m): 1.0})
    return eval_at_points(c, pts, check_unit=False)


def sample(fn, spec: GridSpec) -> GridField:
    """Grid field from a function of Cartesian coordinates ``fn(x, y, z)``."""
    P = spec.points
    return GridField(spec, fn(P[..., 0], P[..., 1], P[..., 2]))


def constant(spec: GridSpec, value: float = 1.0) -> GridField:
    return GridField(spec, np.full(spec.shape, float(value)))


# ---------------------------------------------------------------------------
# Text formats
# ---------------------------------------------------------------------------

def write_field(path, g: GridField) -> None:
    """Write ``SPHFIELD v1 L_max n_theta n_phi`` followed by one row per colatitude."""
    spec = g.spec
    with open(path, "w") as fh:
        fh.write(f"SPHFIELD v1 {spec.L_max} {spec.n_theta} {spec.n_phi}\n")
        for row in g.values:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_field(path, oversample: float | None = None) -> GridField:
    """Read a ``SPHFIELD v1`` file; the grid is rebuilt from its header.

    The oversampling factor is not stored, so the grid is rebuilt with the
    node counts stated in the header.
    """
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5 or header[:2] != ["SPHFIELD", "v1"]:
            raise ValueError(f"{path}: not a SPHFIELD v1 file")
        L, nt, nph = (int(h) for h in header[2:])
        rows = [list(map(float, line.split())) for line in fh if line.strip()]
    values = np.array(rows, dtype=float)
    if values.shape != (nt, nph):
        raise ValueError(f"{path}: expected {nt}x{nph} values, got {values.shape}")
    return GridField(grid_from_counts(L, nt, nph, oversample), values)


def grid_from_counts(L_max: int, n_theta: int, n_phi: int, oversample: float | None = None) -> GridSpec:
    """Grid with explicit node counts (used when reading snapshots)."""
    if n_theta < L_max + 1 or n_phi < 2 * L_max + 1 or n_phi % 2:
        raise ValueError(f"inconsistent grid counts L_max={L_max}, n_theta={n_theta}, n_phi={n_phi}")
    if oversample is None:
        oversample = n_theta / (L_max + 1)
    return _make_grid(L_max, n_theta, n_phi, oversample)


def write_spectral(path, c: SpectralField) -> None:
    with open(path, "w") as fh:
        fh.write(f"SPHSPEC v1 {c.L_max}\n")
        for l in range(c.L_max + 1):
            for m in range(-l, l + 1):
                fh.write(f"{l} {m} {float(c.coeffs[lm_index(l, m)])!r}\n")


def read_spectral(path) -> SpectralField:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[:2] != ["SPHSPEC", "v1"]:
            raise ValueError(f"{path}: not a SPHSPEC v1 file")
        L = int(header[2])
        c = np.zeros(n_coeffs(L))
        for line in fh:
            if not line.strip():
                continue
            l, m, a = line.split()
            c[lm_index(int(l), int(m))] = float(a)
    return SpectralField(L, c)
