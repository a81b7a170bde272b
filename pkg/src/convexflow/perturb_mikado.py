"""Advected Mikado perturbation: one strictness-improving convex step.

Given a strict subsolution (v, p, R) and a dissipation level delta below the
least eigenvalue of R, the step transports a Mikado family along the flow of
v and adds an oscillatory velocity at frequency lam:

    Phi solves  dPhi/dt + (v . grad) Phi = 0,  Phi(., t0) = x,
    Rtilde = DPhi (R - delta Id) DPhi^T,
    w_o    = DPhi^{-1} W(Rtilde, lam Phi),
    w      = curl(DPhi^T U(Rtilde, lam Phi)) / lam,   w_c = w - w_o,

where W is the Mikado velocity of the advected stress and U its vector
potential (curl_xi U = W mode by mode).  The cofactor identity
curl(DPhi^T U(lam Phi)) = lam det(DPhi) DPhi^{-1} (curl_xi U)(lam Phi) makes
w exactly divergence free and equal to w_o up to the commutator of the curl
with the slowly varying amplitudes, which is the corrector w_c = O(1/lam).

The new triple keeps the pressure bitwise and closes the stress in two
pieces, both divergence-compatible by construction:

    G    = d_t (v + w) + div((v+w) (x) (v+w)) + grad p       (mean free)
    R11  = -inv_div(G)                                        (trace free)
    R12  = fint(v (x) v + R) - delta Id - fint(vbar (x) vbar) (constant)
    Rbar = delta Id + R11 + R12.

R11 is pointwise trace free, so tr Rbar is spatially constant by
construction; R12 is a constant matrix chosen so the energy tensor
fint(vbar (x) vbar + Rbar) equals fint(v (x) v + R) exactly.  For lam large
both corrections are O(lam^(alpha-1)) and the output approaches a strong
subsolution at dissipation delta.

Time derivatives: the slow field v is differentiated with the same
three-point frame stencil the residual audit uses.  The oscillatory w is
differentiated by a short centered probe of width tau: the flow map is
advanced by +-tau from each frame and w is re-evaluated there, which keeps
the O(lam) transport cancellation inside the difference.  When the
background is static (v = 0 and R time independent) d_t w vanishes
identically and the audit residual of the output sits at round-off; for
time-dependent backgrounds the audit uses the coarse frame stencil and its
O(dt^2 lam^3) floor is reported, not asserted.

Resolvability gate: the composed oscillation e^{i lam m . Phi} has local
frequency lam |DPhi^T m|, so the step demands

    lam * max_m |m|_2 * sup_x |DPhi^T|_op < n / 3

leaving a one-third band for products with the slowly varying amplitudes
(n / 2 suffices when the flow is the identity and the amplitudes are
constant, where no slow-fast products arise).  A violation raises
ResolutionError: families are synthesized exactly or not at all, never
filtered or oversampled onto a too-coarse grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from convexflow import fields as fieldops
from convexflow.decompose import NsetDescriptor, _moment_matrix, vec_sym
from convexflow.fields import (GridSpec, PeriodicField, SYM_COMPS,
                               _dealias_mask, _hermitian_weight, _ksq,
                               _wavenumbers, curl, divergence, gradient,
                               sym_eigenvalues)
from convexflow.invdiv import inv_div
from convexflow.mikado import (MikadoFamily, _check_grid, _paint_modes,
                               build_mikado)
from convexflow.subsolution import (SubsolutionFrame, SubsolutionTrajectory,
                                    _time_derivative, residual_audit)

__all__ = [
    "DET_TOL", "INVERSE_TOL", "ResolutionError", "FlowMap", "solve_flow",
    "advected_hull", "MikadoStepResult", "mikado_step", "strict_to_strong",
]

DET_TOL = 1e-6        # relative unit-determinant residual of DPhi
INVERSE_TOL = 1e-8    # sup |DPhi DPhi^{-1} - Id| tolerance
HULL_INFLATION = 0.10  # relative widening of the advected-stress hull
STREAM_N = 256        # grid size from which inv_div is evaluated slot-wise


class ResolutionError(ValueError):
    """The requested oscillation cannot be represented on this grid.

    Carries `lam`, `required` (the grid size the gate would need) and
    `available` (the grid size at hand).
    """

    def __init__(self, message, lam=None, required=None, available=None):
        super().__init__(message)
        self.lam = lam
        self.required = required
        self.available = available


# ---------------------------------------------------------------------------
# Pointwise 3x3 helpers (leading axes (3, 3), broadcasting grid axes)
# ---------------------------------------------------------------------------

def _eye_block():
    e = np.zeros((3, 3, 1, 1, 1))
    e[0, 0] = e[1, 1] = e[2, 2] = 1.0
    return e


def _matmul(a, b):
    return np.einsum("ip...,pj...->ij...", a, b)


def _matvec(a, v):
    return np.einsum("ij...,j...->i...", a, v)


def _transpose(a):
    return np.swapaxes(a, 0, 1)


def _det3(a):
    return (a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
            - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
            + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]))


def _inv3(a):
    """Pointwise inverse through the adjugate; exact up to the division."""
    det = _det3(a)
    inv = np.empty_like(a)
    inv[0, 0] = a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1]
    inv[0, 1] = a[0, 2] * a[2, 1] - a[0, 1] * a[2, 2]
    inv[0, 2] = a[0, 1] * a[1, 2] - a[0, 2] * a[1, 1]
    inv[1, 0] = a[1, 2] * a[2, 0] - a[1, 0] * a[2, 2]
    inv[1, 1] = a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]
    inv[1, 2] = a[0, 2] * a[1, 0] - a[0, 0] * a[1, 2]
    inv[2, 0] = a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]
    inv[2, 1] = a[0, 1] * a[2, 0] - a[0, 0] * a[2, 1]
    inv[2, 2] = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    inv /= det
    return inv


def _mat_from_sym6(data6):
    shape = (3, 3) + data6.shape[1:]
    out = np.empty(shape)
    for slot, (i, j) in enumerate(SYM_COMPS):
        out[i, j] = data6[slot]
        if i != j:
            out[j, i] = data6[slot]
    return out


def _sym6_from_mat(m):
    return np.stack([0.5 * (m[i, j] + m[j, i]) for (i, j) in SYM_COMPS])


def _sandwich6(j, sym6):
    """Components of J S J^T for symmetric S given as 6 components."""
    return _sym6_from_mat(_matmul(_matmul(j, _mat_from_sym6(sym6)),
                                  _transpose(j)))


def _opnorm_sup(j):
    """sup over the grid of the operator norm of a pointwise 3x3 field."""
    if j.shape[2:] == (1, 1, 1):
        g = _matmul(_transpose(j), j)[..., 0, 0, 0]
        return float(math.sqrt(np.linalg.eigvalsh(g).max()))
    g6 = _sym6_from_mat(_matmul(_transpose(j), j))
    ev = sym_eigenvalues(g6)
    return float(math.sqrt(max(ev[2].max(), 0.0)))


# ---------------------------------------------------------------------------
# Flow map
# ---------------------------------------------------------------------------

class _VelocityTrack:
    """Piecewise-linear-in-time sampler of a velocity frame sequence."""

    def __init__(self, datas, times):
        self.datas = datas
        self.times = np.asarray(times, dtype=float)

    def __call__(self, t):
        times = self.times
        if len(times) == 1 or t <= times[0]:
            lo, hi, s = 0, 0, 0.0
        elif t >= times[-1]:
            lo, hi, s = len(times) - 1, len(times) - 1, 0.0
        else:
            hi = int(np.searchsorted(times, t, side="right"))
            lo = hi - 1
            s = (t - times[lo]) / (times[hi] - times[lo])
        if s == 0.0:
            return self.datas[lo]
        return (1.0 - s) * self.datas[lo] + s * self.datas[hi]

    @property
    def vmax(self):
        return max(float(np.sqrt((d * d).sum(axis=0)).max())
                   for d in self.datas)


def _transport_rhs(ddata, vdata, wave, mask, n):
    """-(v + (v . grad) D) with a dealiased advection product."""
    kx, ky, kz = wave
    out = np.empty_like(ddata)
    for p in range(3):
        spec = sfft.rfftn(ddata[p])
        adv = vdata[0] * sfft.irfftn(1j * kx * spec, s=(n, n, n))
        adv += vdata[1] * sfft.irfftn(1j * ky * spec, s=(n, n, n))
        adv += vdata[2] * sfft.irfftn(1j * kz * spec, s=(n, n, n))
        out[p] = -sfft.irfftn(sfft.rfftn(adv) * mask, s=(n, n, n)) - vdata[p]
    return out


def _rk4_step(ddata, t, h, vel, wave, mask, n):
    k1 = _transport_rhs(ddata, vel(t), wave, mask, n)
    k2 = _transport_rhs(ddata + 0.5 * h * k1, vel(t + 0.5 * h), wave, mask, n)
    k3 = _transport_rhs(ddata + 0.5 * h * k2, vel(t + 0.5 * h), wave, mask, n)
    k4 = _transport_rhs(ddata + h * k3, vel(t + h), wave, mask, n)
    return ddata + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class FlowMap:
    """Lagrangian flow of a velocity field, stored as displacements.

    Phi(x, t) = x + D(x, t) with D(., times[0]) = 0 and DPhi = Id + grad D.
    The inverse Jacobian is the pointwise adjugate divided by the
    determinant, so DPhi DPhi^{-1} = Id holds to round-off by construction;
    the unit-determinant residual |det DPhi - 1| measures how well the
    integrator preserved volume along the divergence-free transport and is
    the audited accuracy figure.
    """

    grid: GridSpec
    times: np.ndarray
    displacements: list
    cfl: float
    substeps: list
    _velocity: object = field(repr=False, default=None, compare=False)

    def identity(self, i):
        """True when frame i carries the exact zero displacement."""
        d = self.displacements[i]
        return d is None or float(np.abs(d.data).max()) == 0.0

    def displacement_data(self, i):
        if self.identity(i):
            return None
        return self.displacements[i].data

    def jacobian(self, i):
        """DPhi at frame i: (3, 3, n, n, n), or (3, 3, 1, 1, 1) identity."""
        return _jacobian_from_displacement(self.displacement_data(i),
                                           self.grid)

    def jacobian_inverse(self, i, jac=None):
        jac = self.jacobian(i) if jac is None else jac
        return _inv3(jac)

    def determinant(self, i, jac=None):
        jac = self.jacobian(i) if jac is None else jac
        return _det3(jac)

    def phi_data(self, i):
        """Phi = x + D as raw samples, or None for the identity frame."""
        d = self.displacement_data(i)
        if d is None:
            return None
        x = self.grid.meshgrid()
        return np.stack([x[0] + d[0], x[1] + d[1], x[2] + d[2]])

    def probe_displacement(self, i, tau):
        """Displacement advanced by one Runge-Kutta step of width tau."""
        if self._velocity is None:
            raise ValueError("flow map has no velocity track for probes")
        n = self.grid.n
        d = self.displacement_data(i)
        ddata = np.zeros((3, n, n, n)) if d is None else d.copy()
        wave = _wavenumbers(n)
        mask = _dealias_mask(n)
        out = _rk4_step(ddata, float(self.times[i]), tau, self._velocity,
                        wave, mask, n)
        return out

    def audit(self):
        """Measured invariants: determinant, inverse, initial identity."""
        det_resid = 0.0
        inv_resid = 0.0
        eye = _eye_block()
        for i in range(len(self.times)):
            jac = self.jacobian(i)
            det_resid = max(det_resid,
                            float(np.abs(self.determinant(i, jac) - 1.0).max()))
            prod = _matmul(jac, self.jacobian_inverse(i, jac))
            inv_resid = max(inv_resid, float(np.abs(prod - eye).max()))
        return {
            "det_residual": det_resid,
            "inverse_residual": inv_resid,
            "initial_identity": self.identity(0),
        }

    def validate(self):
        report = self.audit()
        if not report["initial_identity"]:
            raise ValueError("flow map must start from the identity")
        if report["det_residual"] > DET_TOL:
            raise ValueError(
                f"flow map determinant residual {report['det_residual']:.3e} "
                f"exceeds {DET_TOL:.1e}; refine the time step or the grid")
        if report["inverse_residual"] > INVERSE_TOL:
            raise ValueError(
                f"flow map inverse residual {report['inverse_residual']:.3e} "
                f"exceeds {INVERSE_TOL:.1e}")
        return report


def _jacobian_from_displacement(ddata, grid):
    if ddata is None:
        return _eye_block()
    n = grid.n
    wave = _wavenumbers(n)
    out = np.empty((3, 3, n, n, n))
    for p in range(3):
        spec = sfft.rfftn(ddata[p])
        for j in range(3):
            out[p, j] = sfft.irfftn(1j * wave[j] * spec, s=(n, n, n))
        out[p, p] += 1.0
    return out


def solve_flow(velocities, times=None, *, cfl=0.5, velocity_fn=None):
    """Integrate the displacement transport d_t D + (v . grad) D = -v.

    Classical fourth-order Runge-Kutta in time, spectral derivatives in
    space, 2/3-rule dealiasing of the advection product.  Each frame
    interval is divided so that step * sup|v| <= cfl * dx.  `velocities` is
    a vector field or a list of them at `times` (linear interpolation
    supplies stage values); `velocity_fn(t)`, when given, overrides the
    interpolation and the list only fixes the output times and the grid.

    Exact special cases: v = 0 keeps D = 0 bitwise, a spatially constant
    velocity c gives D = -c (t - t0) to round-off (the advection term
    vanishes identically in both).
    """
    if isinstance(velocities, PeriodicField):
        velocities = [velocities]
    if not velocities:
        raise ValueError("solve_flow needs at least one velocity frame")
    grid = velocities[0].grid
    for v in velocities:
        if v.rank != "vector" or v.grid.n != grid.n:
            raise ValueError("velocity frames must be vectors on one grid")
    if times is None:
        if len(velocities) > 1:
            raise ValueError("multiple velocity frames need explicit times")
        times = np.array([0.0])
    times = np.asarray(times, dtype=float)
    if len(times) != len(velocities):
        raise ValueError("one time per velocity frame")
    if len(times) > 1 and np.diff(times).min() <= 0.0:
        raise ValueError("times must be strictly increasing")

    datas = [v.data for v in velocities]
    track = _VelocityTrack(datas, times)
    if velocity_fn is None:
        vel = track
    else:
        def vel(t, raw=velocity_fn):
            out = raw(t)
            return out.data if isinstance(out, PeriodicField) else \
                np.asarray(out, dtype=float)
    n = grid.n
    vmax = track.vmax
    wave = _wavenumbers(n)
    mask = _dealias_mask(n)

    displacements = [None]
    substeps = []
    ddata = None
    for i in range(1, len(times)):
        span = times[i] - times[i - 1]
        m = max(1, int(math.ceil(span * max(vmax, 1e-300) / (cfl * grid.dx))))
        if vmax == 0.0 and velocity_fn is None:
            substeps.append(0)
            displacements.append(None)
            continue
        h = span / m
        if ddata is None:
            ddata = np.zeros((3, n, n, n))
        for s in range(m):
            ddata = _rk4_step(ddata, times[i - 1] + s * h, h, vel, wave,
                              mask, n)
        substeps.append(m)
        displacements.append(
            PeriodicField.from_real(grid, "vector", ddata, copy=True))

    flow = FlowMap(grid=grid, times=times, displacements=displacements,
                   cfl=cfl, substeps=substeps, _velocity=vel)
    flow.validate()
    return flow


# ---------------------------------------------------------------------------
# Advected stress hull and amplitude fields
# ---------------------------------------------------------------------------

def advected_hull(rt6_frames, inflate=HULL_INFLATION, moving=False):
    """Descriptor set certainly containing every sampled advected stress.

    Diagonal samples (off-diagonal components at round-off) give a per-axis
    diagonal box; anything else gives a global eigenvalue band.  Intervals
    are widened by `inflate`/2 of their width on each side plus a round-off
    pad, so the decomposition stays valid slightly beyond the samples.

    With `moving=True` the diagonal shortcut is disabled: a nontrivial flow
    shears the advected stress off the diagonal axis between samples, so
    the decomposition must span the full symmetric space even when the
    sampled matrices happen to be diagonal.
    """
    scale = max(float(np.abs(r).max()) for r in rt6_frames)
    off = max(float(np.abs(r[3:]).max()) for r in rt6_frames)
    pad_eps = 1e-9 * max(scale, 1e-300)
    if not moving and off <= 1e-12 * max(scale, 1e-300):
        lo = np.array([min(float(r[a].min()) for r in rt6_frames)
                       for a in range(3)])
        hi = np.array([max(float(r[a].max()) for r in rt6_frames)
                       for a in range(3)])
        pad = 0.5 * inflate * (hi - lo) + pad_eps
        return NsetDescriptor.diagonal_box(lo - pad, hi + pad)
    lo = math.inf
    hi = -math.inf
    for r in rt6_frames:
        ev = sym_eigenvalues(r)
        lo = min(lo, float(ev[0].min()))
        hi = max(hi, float(ev[2].max()))
    pad = 0.5 * inflate * (hi - lo) + pad_eps
    return NsetDescriptor.eigenvalue_band(lo - pad, hi + pad)


def _coefficient_fields(basis, rt6):
    """Affine decomposition coefficients of a symmetric field, pointwise."""
    vec = rt6.copy()
    vec[3:] *= math.sqrt(2.0)
    shift = vec_sym(basis.anchor_matrix)
    vec -= shift.reshape((6,) + (1,) * (rt6.ndim - 1))
    c = np.tensordot(basis.linear_map, vec, axes=1)
    c += basis.anchor_coefficients.reshape((-1,) + (1,) * (rt6.ndim - 1))
    return c


def _sqrt_gamma(basis, rt6):
    """sqrt of the coefficient fields, raising when they stop being exact.

    Two guards: the coefficients must stay nonnegative (the stress must sit
    inside the decomposition cone) and the weighted directions must rebuild
    the input exactly (sum_k gamma_k khat khat^T = Rtilde pointwise).  The
    second catches stresses outside the span of the direction family, e.g.
    off-diagonal matrices fed to a diagonal-box basis, which the affine
    coefficient map would otherwise silently project away.
    """
    c = _coefficient_fields(basis, rt6)
    floor = -1e-12 * max(1.0, float(np.abs(c).max()))
    cmin = float(c.min())
    if cmin < floor:
        t = int(np.argmin(c.reshape(c.shape[0], -1).min(axis=1)))
        k = basis.directions[t]
        raise ValueError(
            f"advected stress leaves the decomposition cone: coefficient "
            f"for direction {tuple(int(x) for x in k)} reaches {cmin:.3e}")
    moments = _moment_matrix(np.asarray(basis.directions, dtype=float))
    scale = max(float(np.abs(rt6).max()), 1e-300)
    npts = int(np.prod(rt6.shape[1:], dtype=np.int64)) if rt6.ndim > 1 else 1
    cflat = c.reshape(c.shape[0], npts)
    rflat = rt6.reshape(6, npts)
    block = 1 << 21
    worst = 0.0
    for lo_ix in range(0, npts, block):
        sl = slice(lo_ix, min(lo_ix + block, npts))
        rec = moments @ cflat[:, sl]
        rec[3:] /= math.sqrt(2.0)
        worst = max(worst, float(np.abs(rec - rflat[:, sl]).max()))
        del rec
    if worst > 1e-8 * scale:
        raise ValueError(
            f"advected stress leaves the decomposition span: rebuilding it "
            f"from {len(basis.directions)} directions misses by {worst:.3e} "
            f"(sup scale {scale:.3e}); the direction family cannot "
            f"represent this stress")
    return np.sqrt(np.maximum(c, 0.0))


def _constant_sym6(rt6, scale):
    """Collapse a spatially constant 6-component field to one matrix."""
    flat = rt6.reshape(6, -1)
    mean = flat.mean(axis=1)
    spread = float(np.abs(flat - mean[:, None]).max())
    if spread <= 1e-12 * max(scale, 1e-300):
        return mean
    return None


# ---------------------------------------------------------------------------
# Oscillation synthesis
# ---------------------------------------------------------------------------

def _paint_scalar(spec, reps, coeffs, n):
    """Scalar-spectrum variant of the family mode painter."""
    m = reps.copy()
    c = coeffs.copy()
    flip = m[:, 2] < 0
    m[flip] *= -1
    c[flip] = np.conj(c[flip])
    ix, iy, iz = m[:, 0] % n, m[:, 1] % n, m[:, 2]
    np.add.at(spec, (ix, iy, iz), c)
    zz = iz == 0
    if zz.any():
        np.add.at(spec, ((-m[zz, 0]) % n, (-m[zz, 1]) % n, 0),
                  np.conj(c[zz]))


def _mode_potentials(reps, coeffs, direction):
    """Per-mode potential coefficients i m x (c q) / |m|^2."""
    k = np.asarray(direction, dtype=float)
    w_vec = coeffs[:, None] * k[None, :]
    m = reps.astype(float)
    m2 = (m * m).sum(axis=1, keepdims=True)
    return 1j * np.cross(m, w_vec) / m2


def _tube_scalar_identity(reps, coeffs, lam, grid):
    """psi(lam x) synthesized exactly at the scaled lattice modes."""
    n = grid.n
    spec = np.zeros((n, n, n // 2 + 1), dtype=np.complex128)
    _paint_scalar(spec, lam * reps, coeffs, n)
    return sfft.irfftn(spec * float(n) ** 3, s=(n, n, n))


def _tube_vector_identity(reps, vec_coeffs, lam, grid):
    n = grid.n
    spec = np.zeros((3, n, n, n // 2 + 1), dtype=np.complex128)
    _paint_modes(spec, lam * reps, vec_coeffs, n)
    out = np.empty((3, n, n, n))
    for p in range(3):
        out[p] = sfft.irfftn(spec[p] * float(n) ** 3, s=(n, n, n))
    return out


def _tube_sums_composed(reps, coeffs, upots, lam, phi):
    """psi(lam Phi) and U(lam Phi) summed mode class by mode class."""
    shape = phi.shape[1:]
    psi = np.zeros(shape)
    upot = np.zeros((3,) + shape)
    for row, c, u in zip(reps, coeffs, upots):
        phase = lam * (row[0] * phi[0] + row[1] * phi[1] + row[2] * phi[2])
        osc = np.exp(1j * phase)
        psi += 2.0 * (c * osc).real
        for p in range(3):
            upot[p] += 2.0 * (u[p] * osc).real
    return psi, upot


def _oscillation_fields(family, sqrt_gamma, lam, grid, phi, jac, jinv):
    """(w_o, w) at one time; w = curl(DPhi^T U)/lam is exactly div free.

    sqrt_gamma holds per-tube amplitude square roots, scalars or scalar
    fields; phi is None for the identity flow, where the synthesis paints
    the scaled lattice modes exactly instead of summing composed phases.
    """
    n = grid.n
    wsum = np.zeros((3, n, n, n))
    usum = np.zeros((3, n, n, n))
    for t, (tube, reps, coeffs) in enumerate(
            zip(family.tubes, family.modes, family.coefficients)):
        g = sqrt_gamma[t]
        constant = np.ndim(g) == 0
        if constant and float(g) == 0.0:
            continue
        q = np.asarray(tube.direction, dtype=float)
        upots = _mode_potentials(reps, coeffs, q)
        if phi is None:
            psi = _tube_scalar_identity(reps, coeffs, lam, grid)
            upot = _tube_vector_identity(reps, upots, lam, grid)
        else:
            psi, upot = _tube_sums_composed(reps, coeffs, upots, lam, phi)
        amp = float(g) if constant else g
        wsum += (amp * psi) * q[:, None, None, None]
        usum += amp * upot
        del psi, upot
    if jac.shape[2:] == (1, 1, 1):
        wo = wsum
        a = usum
    else:
        wo = _matvec(jinv, wsum)
        a = _matvec(_transpose(jac), usum)
        del wsum, usum
    w_o = PeriodicField.from_real(grid, "vector", wo, copy=False)
    a_field = PeriodicField.from_real(grid, "vector", a, copy=False)
    w = curl(a_field) * (1.0 / lam)
    w.data
    w.drop_spec()
    return w_o, w


# ---------------------------------------------------------------------------
# Streamed quadratic and inverse divergence (memory plumbing for big grids)
# ---------------------------------------------------------------------------

def _div_outer_stream(vdata, grid):
    """div(v (x) v) computed row by row to bound peak memory."""
    n = grid.n
    kx, ky, kz = _wavenumbers(n)
    wave = (kx, ky, kz)
    out = np.empty((3, n, n, n))
    for a in range(3):
        acc = np.zeros((n, n, n // 2 + 1), dtype=np.complex128)
        for b in range(3):
            acc += (1j * wave[b]) * sfft.rfftn(vdata[a] * vdata[b])
        out[a] = sfft.irfftn(acc, s=(n, n, n))
        del acc
    return out


def _mean_outer(vdata):
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(i, 3):
            out[i, j] = out[j, i] = float((vdata[i] * vdata[j]).mean())
    return out


def _div_sym_stream(r6data, grid):
    """div R of a symmetric tensor, one scalar spectrum at a time."""
    n = grid.n
    wave = _wavenumbers(n)
    scale = float(n) ** 3
    slot_of = {}
    for slot, (i, j) in enumerate(SYM_COMPS):
        slot_of[i, j] = slot_of[j, i] = slot
    out = np.empty((3, n, n, n))
    for a in range(3):
        acc = np.zeros((n, n, n // 2 + 1), dtype=np.complex128)
        for b in range(3):
            acc += (1j * wave[b]) * sfft.rfftn(r6data[slot_of[a, b]]) / scale
        out[a] = sfft.irfftn(acc * scale, s=(n, n, n))
        del acc
    return out


def _hminus1_rows(rows, grid):
    """H^-1 norm of stacked real component rows, one spectrum at a time.

    Matches hminus1_norm on the corresponding field while keeping the peak
    complex footprint at a single scalar spectrum.
    """
    n = grid.n
    k2 = _ksq(n).copy()
    k2[0, 0, 0] = 1.0
    wgt = _hermitian_weight(n) / k2
    scale = float(n) ** 3
    total = 0.0
    for row in rows:
        c = sfft.rfftn(row) / scale
        mag2 = (c.real ** 2 + c.imag ** 2) * wgt
        mag2[0, 0, 0] = 0.0
        total += float(mag2.sum())
        del c, mag2
    return (2.0 * math.pi) ** 1.5 * math.sqrt(total)


def _inv_div_streamed(gspec, grid):
    """Slot-wise evaluation of the trace-free inverse divergence.

    Same formula as inv_div, materializing one symmetric slot at a time so
    the peak complex footprint stays near two scalar spectra; used on grids
    where the all-at-once layout would not fit.  Returns real samples
    (6, n, n, n).
    """
    n = grid.n
    kx, ky, kz = _wavenumbers(n)
    kvec = (kx, ky, kz)
    k2 = _ksq(n).copy()
    k2[0, 0, 0] = 1.0
    mask = fieldops._nyquist_free_mask(n)

    def u_comp(i):
        u = -gspec[i] / k2
        u[0, 0, 0] = 0.0
        u *= mask
        return u

    kdotu = kx * u_comp(0)
    kdotu += ky * u_comp(1)
    kdotu += kz * u_comp(2)
    out = np.empty((6, n, n, n))
    for slot, (i, j) in enumerate(SYM_COMPS):
        ui = u_comp(i)
        uj = ui if j == i else u_comp(j)
        pui = ui - kvec[i] * kdotu / k2
        puj = pui if j == i else uj - kvec[j] * kdotu / k2
        term = (0.25j * (kvec[i] * puj + kvec[j] * pui)
                + 0.75j * (kvec[i] * uj + kvec[j] * ui))
        del pui, puj
        if i == j:
            term -= 0.5j * kdotu
        out[slot] = sfft.irfftn(term * float(n) ** 3, s=(n, n, n))
        del term, ui, uj
    return out


def _neg_inv_div(gdata, grid):
    """-inv_div(G) as a symmetric field, dispatching on the grid size."""
    g = PeriodicField.from_real(grid, "vector", gdata, copy=False)
    if grid.n < STREAM_N:
        r11 = inv_div(g) * (-1.0)
        r11.data
        resid = float(np.abs(divergence(r11).data + gdata
                             - gdata.mean(axis=(1, 2, 3))[:, None, None, None]
                             ).max())
        r11.drop_spec()
        return r11, resid
    data6 = -_inv_div_streamed(g.spec, grid)
    return PeriodicField.from_real(grid, "sym-tensor", data6, copy=False), None


# ---------------------------------------------------------------------------
# The perturbation step
# ---------------------------------------------------------------------------

@dataclass
class MikadoStepResult:
    """Perturbed trajectory plus the measured step diagnostics."""

    trajectory: SubsolutionTrajectory
    lam: int
    delta: float
    family: MikadoFamily
    flow: FlowMap
    diagnostics: dict


def _frames_of(traj):
    return list(getattr(traj, "frames", traj))


def _interp_rows(datas, times, t):
    """Linear interpolation of slow frame data in time, extrapolating at
    the ends with the edge slope (single frame: constant)."""
    times = np.asarray(times, dtype=float)
    if len(times) == 1:
        return datas[0]
    hi = int(np.clip(np.searchsorted(times, t, side="right"), 1,
                     len(times) - 1))
    lo = hi - 1
    s = (t - times[lo]) / (times[hi] - times[lo])
    return (1.0 - s) * datas[lo] + s * datas[hi]


def _gate(lam, lam0, c0, n, relaxed):
    margin = n / 2.0 if relaxed else n / 3.0
    product = lam * lam0 * c0
    if product >= margin:
        required = int(math.ceil(product * (2.0 if relaxed else 3.0)))
        raise ResolutionError(
            f"oscillation lam={lam} with mode radius {lam0:.2f} and flow "
            f"stretch {c0:.3f} needs frequency headroom {product:.1f} < "
            f"{margin:.1f} = n/{2 if relaxed else 3}; grid n={n} cannot "
            f"represent it (need n >= {required})",
            lam=lam, required=required, available=n)
    return margin, product


def mikado_step(traj, delta, lam, *, alpha=0.05, bandwidth=16, tail_tol=None,
                family=None, flow=None, time_probe=None, cfl=0.5):
    """One advected-Mikado perturbation at oscillation frequency lam.

    Preconditions: 0 < delta < delta0 (the least eigenvalue of R along the
    trajectory) and lam inside the resolvability gate (module docstring).
    The trajectory must have one frame or at least three (the shared time
    stencil needs interior points).

    Postconditions, all measured into `diagnostics`:
      * pbar is p bitwise (the same field object).
      * div(vbar) at round-off: w = curl(DPhi^T U)/lam exactly.
      * tr Rbar spatially constant by construction (R11 is trace free).
      * fint(vbar (x) vbar + Rbar) = fint(v (x) v + R) exactly (R12 does
        the bookkeeping); `energy_drift_rel` records the float error.
      * |R11|, |w_c| = O(lam^(alpha-1)) on resolved backgrounds; the decay
        is measured by callers sweeping lam, not asserted per step.

    alpha only labels the targeted decay rate in the diagnostics; no
    regularity scale enters the discrete construction.
    """
    frames = _frames_of(traj)
    if len(frames) == 2:
        raise ValueError("time stencils need one frame or at least three")
    grid = frames[0].v.grid
    n = grid.n
    times = np.array([f.t for f in frames])
    ladder = getattr(traj, "ladder", None)

    delta0 = min(f.eigen_range()[0] for f in frames)
    if not 0.0 < delta < delta0:
        raise ValueError(
            f"delta must lie in (0, delta0) with delta0 = {delta0:.6e}; "
            f"got {delta:.6e}")

    if flow is None:
        flow = solve_flow([f.v for f in frames], times, cfl=cfl)
    identity_all = all(flow.identity(i) for i in range(len(frames)))

    # Advected stresses Rtilde = DPhi (R - delta Id) DPhi^T per frame.
    rt6 = []
    consts = []
    jacs = []
    for i, f in enumerate(frames):
        shifted = f.r.data.copy()
        shifted[:3] -= delta
        if flow.identity(i):
            jacs.append(None)
            rt = shifted
        else:
            jac = flow.jacobian(i)
            jacs.append(jac)
            rt = _sandwich6(jac, shifted)
        del shifted
        cst = _constant_sym6(rt, float(np.abs(rt).max()))
        if cst is not None:
            rt = cst
        rt6.append(rt)
        consts.append(cst)
        del rt
    all_const = all(c is not None for c in consts)

    vmax = max(f.v.c0() for f in frames)
    if family is None:
        hull = advected_hull(rt6, moving=vmax > 0.0)
        family = build_mikado(hull, bandwidth,
                              tail_tol=1.0 if tail_tol is None else tail_tol)
    _check_grid(family, grid)

    lam = int(lam)
    if lam < 1:
        raise ValueError("lam must be a positive integer")
    lam0 = max(float(np.sqrt((reps.astype(float) ** 2).sum(axis=1)).max())
               for reps in family.modes)
    c0 = 1.0
    if not identity_all:
        c0 = max(_opnorm_sup(j) for j in jacs if j is not None)
    relaxed = identity_all and all_const
    margin, product = _gate(lam, lam0, c0, n, relaxed)

    r_steady = len(frames) == 1 or all(
        np.array_equal(f.r.data, frames[0].r.data) for f in frames[1:])
    steady = vmax == 0.0 and r_steady
    tau = None

    # Oscillatory velocity per frame, then its time derivative.
    w_o_frames = []
    w_frames = []
    basis = family.basis
    for i in range(len(frames)):
        sg = _sqrt_gamma(basis, consts[i] if consts[i] is not None
                         else rt6[i])
        jac = jacs[i] if jacs[i] is not None else _eye_block()
        jinv = _inv3(jac) if jacs[i] is not None else _eye_block()
        phi = flow.phi_data(i)
        w_o, w = _oscillation_fields(family, sg, lam, grid, phi, jac, jinv)
        w_o_frames.append(w_o)
        w_frames.append(w)

    dtw = [None] * len(frames)
    if not steady:
        tau = (time_probe if time_probe is not None
               else 1e-3 / (lam * lam0 * vmax + 1.0))
        rdatas = [f.r.data for f in frames]
        for i in range(len(frames)):
            side = []
            for sgn in (1.0, -1.0):
                d = flow.probe_displacement(i, sgn * tau)
                jac = _jacobian_from_displacement(d, grid)
                rs = _interp_rows(rdatas, times, times[i] + sgn * tau).copy()
                rs[:3] -= delta
                rtp = _sandwich6(jac, rs)
                cst = _constant_sym6(rtp, float(np.abs(rtp).max()))
                sg = _sqrt_gamma(basis, cst if cst is not None else rtp)
                phi = None
                if float(np.abs(d).max()) > 0.0:
                    x = grid.meshgrid()
                    phi = np.stack([x[0] + d[0], x[1] + d[1], x[2] + d[2]])
                _, wside = _oscillation_fields(family, sg, lam, grid, phi,
                                               jac, _inv3(jac))
                side.append(wside.data)
                del d, jac
            dtw[i] = (side[0] - side[1]) / (2.0 * tau)
            del side

    # Slow time derivative of v with the shared frame stencil.
    dt = float(times[1] - times[0]) if len(frames) > 1 else 0.0
    dv = _time_derivative([f.v for f in frames], dt)

    # Assemble the perturbed frames.
    out_frames = []
    diag_acc = {
        "wo_sup": 0.0, "wc_sup": 0.0, "div_w_sup": 0.0,
        "r11_sup": 0.0, "r12_opnorm": 0.0, "moment_gap_rel": 0.0,
        "v_hminus1": 0.0, "tensor_hminus1": 0.0, "energy_drift_rel": 0.0,
        "min_eig_rbar": math.inf, "aniso_ratio": 0.0,
        "trace_ratio_lo": math.inf, "trace_ratio_hi": -math.inf,
    }
    invdiv_resid = None
    eye3 = np.eye(3)
    for i, f in enumerate(frames):
        w = w_frames[i]
        w_o = w_o_frames[i]
        wc_data = w.data - w_o.data
        diag_acc["wo_sup"] = max(diag_acc["wo_sup"], w_o.c0())
        diag_acc["wc_sup"] = max(diag_acc["wc_sup"],
                                 float(np.abs(wc_data).max()))
        del wc_data
        diag_acc["div_w_sup"] = max(diag_acc["div_w_sup"],
                                    float(np.abs(divergence(w).data).max()))
        w.drop_spec()

        # Moment closure of the oscillation against the advected target.
        mo = _mean_outer(w_o.data)
        target = np.empty((3, 3))
        rmean = f.r.mean()
        for slot, (a, b) in enumerate(SYM_COMPS):
            target[a, b] = target[b, a] = rmean[slot]
        target -= delta * eye3
        gap = np.linalg.norm(mo - target) / max(np.linalg.norm(target),
                                                1e-300)
        diag_acc["moment_gap_rel"] = max(diag_acc["moment_gap_rel"],
                                         float(gap))

        vbar_data = f.v.data + w.data
        vbar = PeriodicField.from_real(grid, "vector", vbar_data, copy=False)
        w_o_frames[i] = None
        w_frames[i] = None
        del w, w_o

        gdata = _div_outer_stream(vbar_data, grid)
        if f.p.c0() > 0.0:
            gdata += gradient(f.p).data
        if len(frames) > 1:
            gdata += dv[i].data
        if dtw[i] is not None:
            gdata += dtw[i]
            dtw[i] = None
        r11, resid = _neg_inv_div(gdata, grid)
        if resid is not None:
            invdiv_resid = max(invdiv_resid or 0.0, resid)
        del gdata

        mvv_in = _mean_outer(f.v.data)
        mvv_out = _mean_outer(vbar_data)
        min_r = np.empty((3, 3))
        for slot, (a, b) in enumerate(SYM_COMPS):
            min_r[a, b] = min_r[b, a] = rmean[slot]
        r12 = mvv_in + min_r - delta * eye3 - mvv_out
        r12 = 0.5 * (r12 + r12.T)
        diag_acc["r12_opnorm"] = max(
            diag_acc["r12_opnorm"],
            float(np.abs(np.linalg.eigvalsh(r12)).max()))

        rbar_data = r11.data.copy()
        diag_acc["r11_sup"] = max(diag_acc["r11_sup"],
                                  float(np.abs(r11.data).max()))
        del r11
        shift = delta * eye3 + r12
        for slot, (a, b) in enumerate(SYM_COMPS):
            rbar_data[slot] += shift[a, b]
        rbar = PeriodicField.from_real(grid, "sym-tensor", rbar_data,
                                       copy=False)

        out = SubsolutionFrame.build(f.t, vbar, f.p, rbar, check=False)
        out_frames.append(out)

        ev = sym_eigenvalues(out.rring.data)
        aniso = float(np.abs(np.stack([ev[0], ev[2]])).max())
        lo_ring = float(ev[0].min())
        del ev
        rho = out.rho
        diag_acc["min_eig_rbar"] = min(diag_acc["min_eig_rbar"],
                                       lo_ring + rho)
        diag_acc["aniso_ratio"] = max(
            diag_acc["aniso_ratio"], aniso / max(rho, 1e-300))
        ratio = rho / delta
        diag_acc["trace_ratio_lo"] = min(diag_acc["trace_ratio_lo"], ratio)
        diag_acc["trace_ratio_hi"] = max(diag_acc["trace_ratio_hi"], ratio)

        diag_acc["v_hminus1"] = max(
            diag_acc["v_hminus1"],
            _hminus1_rows(vbar_data - f.v.data, grid))
        tens6 = rbar_data - f.r.data
        for slot, (a, b) in enumerate(SYM_COMPS):
            tens6[slot] += (vbar_data[a] * vbar_data[b]
                            - f.v.data[a] * f.v.data[b])
        diag_acc["tensor_hminus1"] = max(diag_acc["tensor_hminus1"],
                                         _hminus1_rows(tens6, grid))
        del tens6

        et_in = f.energy_tensor()
        et_out = out.energy_tensor()
        drift = np.linalg.norm(et_out - et_in) / max(
            np.linalg.norm(et_in), 1e-300)
        diag_acc["energy_drift_rel"] = max(diag_acc["energy_drift_rel"],
                                           float(drift))

    out_traj = SubsolutionTrajectory.build(out_frames, ladder=ladder)

    floor_sup = floor_h = None
    if len(out_frames) >= 3:
        rep = residual_audit(out_traj)
        floor_sup = max(rep.linf)
        floor_h = max(rep.hminus1)
    elif len(out_frames) == 1:
        fr = out_frames[0]
        e = _div_outer_stream(fr.v.data, grid)
        if fr.p.c0() > 0.0:
            e += gradient(fr.p).data
        e += _div_sym_stream(fr.r.data, grid)
        floor_sup = float(np.abs(e).max())
        floor_h = _hminus1_rows(e, grid)
        del e

    diagnostics = {
        "delta": float(delta), "lam": lam, "alpha": float(alpha),
        "bandwidth": family.bandwidth, "family_tail": family.tail,
        "lam0": lam0, "c0": c0, "gate_margin": margin,
        "gate_product": product, "relaxed_gate": relaxed,
        "steady": steady, "time_probe": tau,
        "invdiv_residual": invdiv_resid,
        "residual_floor_sup": floor_sup,
        "residual_floor_hminus1": floor_h,
        "classification": out_traj.classification,
        **diag_acc,
    }
    return MikadoStepResult(trajectory=out_traj, lam=lam, delta=float(delta),
                            family=family, flow=flow,
                            diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Strict to strong
# ---------------------------------------------------------------------------

def strict_to_strong(traj, delta, sigma, *, alpha=0.05, bandwidth=16,
                     tail_tol=None, lam_start=1, ladder=None):
    """Double the oscillation frequency until the output certifies strong.

    The certificate demands, with rhobar = tr Rbar / 3:
      * classification at least strong (trace constant, |ring(Rbar)|_op
        within the coarse radius of the ladder),
      * 3/4 delta <= rhobar <= 5/4 delta on every frame,
      * |ring(Rbar)|_op <= r3 rhobar pointwise (the fine radius),
      * both closeness figures below sigma: |vbar - v| and the energy
        tensor distance |vbar (x) vbar + Rbar - v (x) v - R|, in the
        H^{-1} norm (sigma = inf makes these vacuous).

    Frequencies double from lam_start until either every condition holds
    (returns the passing MikadoStepResult with its certificate) or the
    resolvability gate refuses the next frequency, which raises
    ResolutionError carrying the last measured margins.
    """
    frames = _frames_of(traj)
    ladder = ladder if ladder is not None else getattr(traj, "ladder", None)
    if ladder is None:
        from convexflow.subsolution import default_ladder
        ladder = default_ladder()
    lam = int(lam_start)
    family = None
    flow = None
    history = []
    while True:
        try:
            result = mikado_step(traj, delta, lam, alpha=alpha,
                                 bandwidth=bandwidth, tail_tol=tail_tol,
                                 family=family, flow=flow)
        except ResolutionError as err:
            detail = ""
            if history:
                last = history[-1]
                detail = (f"; last frequency lam={last['lam']} failed "
                          + ", ".join(f"{k} (margin {m:.3e})"
                                      for k, m in last["failed"]))
            raise ResolutionError(
                f"resolution exhausted before a strong certificate: {err}"
                + detail, lam=err.lam, required=err.required,
                available=err.available) from err
        family = result.family
        flow = result.flow
        d = result.diagnostics
        failed = []
        if d["classification"] not in ("strong", "adapted"):
            failed.append(("classification >= strong", 0.0))
        if d["trace_ratio_lo"] < 0.75:
            failed.append(("rhobar >= 3/4 delta",
                           0.75 - d["trace_ratio_lo"]))
        if d["trace_ratio_hi"] > 1.25:
            failed.append(("rhobar <= 5/4 delta",
                           d["trace_ratio_hi"] - 1.25))
        if d["aniso_ratio"] > ladder.r3:
            failed.append(("|ring(Rbar)| <= r3 rhobar",
                           d["aniso_ratio"] - ladder.r3))
        if d["v_hminus1"] > sigma:
            failed.append(("|vbar - v|_{H^-1} < sigma",
                           d["v_hminus1"] - sigma))
        if d["tensor_hminus1"] > sigma:
            failed.append(("energy tensor distance < sigma",
                           d["tensor_hminus1"] - sigma))
        history.append({"lam": lam, "failed": failed,
                        "aniso_ratio": d["aniso_ratio"],
                        "r11_sup": d["r11_sup"]})
        if not failed:
            certificate = {
                "lam": lam, "rounds": len(history),
                "aniso_ratio": d["aniso_ratio"], "r3": ladder.r3,
                "trace_ratio_lo": d["trace_ratio_lo"],
                "trace_ratio_hi": d["trace_ratio_hi"],
                "v_hminus1": d["v_hminus1"],
                "tensor_hminus1": d["tensor_hminus1"],
                "sigma": sigma, "history": history,
            }
            result.diagnostics["certificate"] = certificate
            return result
        lam *= 2
