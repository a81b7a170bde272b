"""Order(-1) inverse divergence and oscillatory-integral diagnostics.

The central object is the matrix-valued right inverse of the divergence,

    Rv = 1/4 (grad Pu + (grad Pu)^T) + 3/4 (grad u + (grad u)^T)
         - 1/2 (div u) Id,        Laplace u = v - mean(v),  int u = 0,

with P the Leray projection.  Rv is symmetric, pointwise trace-free, and
satisfies div(Rv) = v - mean(v) exactly on the grid (row divergence).  The
module also provides phase-resolved quadrature of int a e^{i lambda phi}
and the empirical stationary-phase decay report used to sanity-check the
order(-1) gain before it is trusted inside the perturbation steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from convexflow.fields import (
    GridSpec, PeriodicField, _ksq, _nyquist_free_mask, _wavenumbers,
    derivative, gradient,
)

__all__ = [
    "PhaseFunction", "DecayReport", "inv_div", "oscillatory_integral",
    "stationary_phase_decay_report", "loglog_fit", "upsample_values",
]


# ----------------------------------------------------------------------
# Phase functions phi(x) = k0 . x + periodic part
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseFunction:
    """Phase with explicit integer linear part and periodic remainder.

    phi(x + 2 pi e_j) - phi(x) = 2 pi k0_j holds by construction since the
    linear part is stored separately.  c0 is a bi-Lipschitz bound verified
    on the grid: c0^{-1} <= |grad phi| <= c0.
    """

    k0: tuple
    periodic_part: PeriodicField
    c0: float

    def __post_init__(self):
        if self.periodic_part.rank != "scalar":
            raise ValueError("periodic part must be a scalar field")
        k0 = tuple(int(c) for c in self.k0)
        object.__setattr__(self, "k0", k0)
        if self.c0 < 1.0:
            raise ValueError("bilipschitz bound c0 must be >= 1")
        lo, hi = self.gradient_range()
        if lo < 1.0 / self.c0 - 1e-12 or hi > self.c0 + 1e-12:
            raise ValueError(
                f"|grad phi| in [{lo:.6g}, {hi:.6g}] violates the declared "
                f"c0 = {self.c0:.6g}")

    @classmethod
    def linear(cls, grid: GridSpec, k0) -> "PhaseFunction":
        zero = PeriodicField.zeros(grid, "scalar")
        norm = float(np.linalg.norm(np.asarray(k0, dtype=float)))
        if norm == 0.0:
            raise ValueError("linear phase needs a nonzero frequency vector")
        c0 = max(norm, 1.0 / norm)
        return cls(k0=tuple(int(c) for c in k0), periodic_part=zero, c0=c0)

    @classmethod
    def from_parts(cls, grid: GridSpec, k0, periodic_part: PeriodicField,
                   margin: float = 1e-9, c0_cap: float = 1e6) -> "PhaseFunction":
        """Build with c0 certified from the sampled gradient range."""
        tmp = object.__new__(cls)
        object.__setattr__(tmp, "k0", tuple(int(c) for c in k0))
        object.__setattr__(tmp, "periodic_part", periodic_part)
        lo, hi = tmp.gradient_range()
        if lo <= 0.0:
            raise ValueError("phase gradient vanishes on the grid")
        c0 = max(hi, 1.0 / lo) * (1.0 + margin)
        if c0 > c0_cap:
            raise ValueError(
                f"phase gradient degenerate: certified c0 = {c0:.3g} "
                f"exceeds the cap {c0_cap:.3g}")
        return cls(k0=tuple(int(c) for c in k0), periodic_part=periodic_part,
                   c0=float(max(c0, 1.0)))

    @property
    def grid(self) -> GridSpec:
        return self.periodic_part.grid

    def gradient_range(self):
        """(min, max) of |grad phi| sampled on the grid."""
        g = gradient(self.periodic_part).data
        k0 = np.asarray(self.k0, dtype=float)
        mag = np.sqrt((g[0] + k0[0]) ** 2 + (g[1] + k0[1]) ** 2
                      + (g[2] + k0[2]) ** 2)
        return float(mag.min()), float(mag.max())

    def values(self, n_fine: int | None = None) -> np.ndarray:
        """Pointwise phase samples, optionally on a finer n_fine^3 grid."""
        grid = self.grid
        if n_fine is None or n_fine == grid.n:
            per = self.periodic_part.data[0]
            n = grid.n
        else:
            per = upsample_values(self.periodic_part, n_fine)[0]
            n = n_fine
        x = np.arange(n) * (2.0 * np.pi / n)
        k0 = self.k0
        lin = (k0[0] * x[:, None, None] + k0[1] * x[None, :, None]
               + k0[2] * x[None, None, :])
        return lin + per


def upsample_values(f: PeriodicField, n_fine: int) -> np.ndarray:
    """Exact band-limited samples of f on a finer uniform grid.

    Zero-pads the spectrum; exact because fields are band-limited by
    construction.  Returns an array of shape (ncomp, n_fine^3 grid).
    """
    n = f.grid.n
    if n_fine < n:
        raise ValueError("upsampling target must be at least the source size")
    if n_fine == n:
        return f.data.copy()
    half = n // 2
    # Octant block copy on the full spectrum; the asymmetric Nyquist planes
    # are dropped (fields in the pipelines are dealiased well inside them).
    pos = slice(0, half)
    neg_src = slice(half + 1, n)
    neg_dst = slice(n_fine - (half - 1), n_fine)
    out = np.empty((f.ncomp, n_fine, n_fine, n_fine))
    scale = float(n_fine) ** 3 / float(n) ** 3
    for c in range(f.ncomp):
        src = sfft.fftn(f.data[c])
        fine = np.zeros((n_fine, n_fine, n_fine), dtype=np.complex128)
        for xs, xd in ((pos, pos), (neg_src, neg_dst)):
            for ys, yd in ((pos, pos), (neg_src, neg_dst)):
                for zs, zd in ((pos, pos), (neg_src, neg_dst)):
                    fine[xd, yd, zd] = src[xs, ys, zs]
        out[c] = sfft.ifftn(fine).real * scale
    return out


# ----------------------------------------------------------------------
# Inverse divergence
# ----------------------------------------------------------------------

def inv_div(v: PeriodicField) -> PeriodicField:
    """Matrix right inverse of the divergence (symmetric, trace-free).

    Implemented literally through u = Laplace^{-1}(v - mean) with the
    zero-mean convention and the Leray projection of u; all in spectral
    space, so div(inv_div v) = v - mean holds to rounding.
    """
    if v.rank != "vector":
        raise ValueError("inv_div expects a vector field")
    n = v.grid.n
    kx, ky, kz = _wavenumbers(n)
    k2 = _ksq(n).copy()
    k2[0, 0, 0] = 1.0
    mask = _nyquist_free_mask(n)

    s = v.spec
    # u_hat = -(v_hat - mean)/|k|^2 ; the k = 0 bin is zeroed explicitly.
    u = np.empty_like(s)
    for i in range(3):
        u[i] = -s[i] / k2
        u[i][0, 0, 0] = 0.0
        u[i] *= mask

    kdotu = kx * u[0] + ky * u[1] + kz * u[2]
    pu = (u[0] - kx * kdotu / k2,
          u[1] - ky * kdotu / k2,
          u[2] - kz * kdotu / k2)
    kvec = (kx, ky, kz)

    out = np.empty((6, n, n, n // 2 + 1), dtype=np.complex128)
    from convexflow.fields import SYM_COMPS
    divu = 1j * kdotu
    for slot, (i, j) in enumerate(SYM_COMPS):
        term = (0.25 * 1j * (kvec[i] * pu[j] + kvec[j] * pu[i])
                + 0.75 * 1j * (kvec[i] * u[j] + kvec[j] * u[i]))
        if i == j:
            term = term - 0.5 * divu
        out[slot] = term
    return PeriodicField.from_spectral(v.grid, "sym-tensor", out, copy=False)


# ----------------------------------------------------------------------
# Oscillatory integrals and decay reports
# ----------------------------------------------------------------------

def _oversampled_size(a: PeriodicField, phi: PhaseFunction, lam: int,
                      factor: int = 4, cap: int = 320) -> int:
    """Grid size >= factor times the integrand's effective Nyquist rate."""
    from convexflow.fields import active_bandwidth
    band_a = active_bandwidth(a)
    band_per = active_bandwidth(phi.periodic_part)
    _, grad_hi = phi.gradient_range()
    k0inf = max(abs(c) for c in phi.k0) if any(phi.k0) else 0
    rate = lam * max(k0inf, int(np.ceil(grad_hi))) + band_a + band_per
    n_os = max(a.grid.n, factor * max(rate, 1))
    return int(min(n_os, cap))


def oscillatory_integral(a: PeriodicField, phi: PhaseFunction, lam: int,
                         oversample: int = 4) -> complex:
    """High-order quadrature of int_{T^3} a(x) e^{i lam phi(x)} dx.

    Both a and the periodic phase part are band-limited, so their samples
    on the oversampled grid are exact; the trapezoidal (uniform-grid) rule
    then converges superalgebraically in the oversampling factor.
    """
    if a.rank != "scalar":
        raise ValueError("amplitude must be a scalar field")
    lam = int(lam)
    if lam <= 0:
        raise ValueError("lambda must be a positive integer")
    n_os = _oversampled_size(a, phi, lam, factor=oversample)
    amp = a.data[0] if n_os == a.grid.n else upsample_values(a, n_os)[0]
    ph = phi.values(n_fine=n_os)
    vol = (2.0 * np.pi) ** 3
    val = np.mean(amp * np.exp(1j * lam * ph)) * vol
    return complex(val)


@dataclass
class DecayReport:
    """Log-log least-squares fit of value(lambda) with the raw samples."""

    lambdas: list
    values: list
    slope: float
    intercept: float
    r2: float

    def to_json(self, path=None) -> str:
        payload = {
            "lambda": list(map(int, self.lambdas)),
            "value": list(map(float, self.values)),
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
        }
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def loglog_fit(xs, ys) -> tuple:
    """(slope, intercept, r2) of a least-squares line in log-log space."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), float(r2)


def stationary_phase_decay_report(a: PeriodicField, phi: PhaseFunction,
                                  lambdas) -> DecayReport:
    """Fit the decay of ||inv_div(Re(a e^{i lam phi}))||_C0 against lambda.

    Each lambda must be resolvable on the amplitude's grid:
    lam * c0 * max|k0| < n/3, else the sampled oscillation aliases and the
    fitted slope is meaningless.  Needs at least 4 lambdas, increasing.
    """
    lambdas = [int(l) for l in lambdas]
    if len(lambdas) < 2:
        raise ValueError("cannot fit a decay slope from fewer than 2 lambdas")
    if len(lambdas) < 4:
        raise ValueError("decay fits require at least 4 lambda samples")
    if any(l2 <= l1 for l1, l2 in zip(lambdas, lambdas[1:])):
        raise ValueError("lambda list must be strictly increasing")
    grid = a.grid
    k0inf = max(abs(c) for c in phi.k0)
    for lam in lambdas:
        if lam * phi.c0 * k0inf >= grid.n / 3.0:
            raise ValueError(
                f"lambda = {lam} under-resolved: lam*c0*max|k0| = "
                f"{lam * phi.c0 * k0inf:.1f} >= n/3 = {grid.n / 3.0:.1f}")
    ph = phi.values()
    amp = a.data[0]
    values = []
    for lam in lambdas:
        osc = amp * np.cos(lam * ph)
        fld = PeriodicField.from_real(grid, "scalar", osc[None], copy=False)
        vec = np.zeros((3, grid.n, grid.n, grid.n))
        vec[0] = fld.data[0]
        r = inv_div(PeriodicField.from_real(grid, "vector", vec, copy=False))
        values.append(r.c0())
        r.drop_spec()
    slope, intercept, r2 = loglog_fit(lambdas, values)
    return DecayReport(lambdas=lambdas, values=values, slope=slope,
                       intercept=intercept, r2=r2)
