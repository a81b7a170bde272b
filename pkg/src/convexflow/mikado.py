"""Disjoint periodic tube flows with prescribed first and second moments.

A Mikado family realizes, for symmetric matrices R in the validity set of a
rank-one cone basis, the stationary divergence-free field

    W(R, x) = sum_k Gamma_k(R) psi_k(x) k,        Gamma_k = sqrt(c_k(R)),

on T^3 = [0, 2pi)^3, where R = sum_k c_k(R) k (x) k is the basis identity and
each pipe profile psi_k concentrates near a closed line {p_k + t k}.  Profiles
are band-limited trigonometric polynomials built so that the moment contracts
hold exactly at every bandwidth, not merely up to truncation error:

    fint W         = 0                    (the zero mode is never used),
    div W          = 0                    (every mode of psi_k is normal to k),
    fint W (x) W   = sum_k c_k k (x) k    (unit second moments, vanishing
                                           cross moments; see below).

Three spectral mechanisms produce the exactness.  First, psi_k uses only
modes m with m . k = 0, so (k . grad) psi_k = 0 and each summand of W is
divergence free on its own.  Second, after truncation and tapering the
coefficients are rescaled so that fint psi_k^2 = 1 holds to round-off.
Third, two tubes interact only through the modes shared by their transverse
planes (a single lattice line for skew directions, the whole plane for
parallel ones); on every shared line the coefficient vectors of the sharing
tubes are Gram-Schmidt orthogonalized, which zeroes each pairwise cross
moment fint psi_i psi_j identically.  Because the tubes are geometrically
disjoint, the ideal profiles are already nearly orthogonal there, so the
correction removes only O(tail^2) energy.

What remains bandwidth dependent is fidelity: the distance between psi_k and
the ideal compactly supported bump.  It is reported as the spectral tail
(energy fraction of the sampled template outside the retained modes) and, at
the family level, as the residual of div(W (x) W), which vanishes only in the
limit of perfectly disjoint supports.  Both improve monotonically under
bandwidth doubling and both are measured, never assumed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import fields as fieldops
from .decompose import (
    DecompositionBasis,
    build_nash_basis,
    evaluate_coefficients,
)
from .fields import PeriodicField

TWO_PI = 2.0 * math.pi

# Shape constant of the radial template g(rho) = A (1 - beta u^2) e^{-1/(1-u^2)},
# u = rho / r.  beta = I1 / I2 with I_j = int_0^1 u^(2j-1) e^{-1/(1-u^2)} du
# makes the radial mean int_0^r g rho drho vanish identically, so the template
# carries no transverse zero mode to leading order.
BUMP_SHAPE = 3.8268546733168596

_PLACEMENT_SEED = 20260821

# Squared-norm collapse threshold for Gram-Schmidt residuals (norm ratio
# 1e-8).  Healthy projections remove O(tail^2) energy and stay near ratio 1;
# numerically parallel restrictions collapse to roundoff, ratio ~1e-16.
_COLLAPSE_RATIO = 1e-16

# Coordinate-axis fast path: three orthogonal lines, pairwise distance pi
# (the maximum possible for orthogonal axis lines on the 2pi torus).
_AXES_POINTS = {
    (1, 0, 0): (0.0, math.pi, math.pi),
    (0, 1, 0): (0.0, 0.0, 0.0),
    (0, 0, 1): (math.pi, 0.0, 0.0),
}


class PlacementError(ValueError):
    """Tube placement cannot meet the requested separation."""


class BandwidthError(ValueError):
    """Requested bandwidth cannot deliver the requested profile fidelity."""


# ---------------------------------------------------------------------------
# integer lattice geometry
# ---------------------------------------------------------------------------


def _egcd(a: int, b: int):
    """Extended gcd: returns (g, x, y) with a x + b y = g >= 0."""
    old_r, r = a, b
    old_x, x = 1, 0
    old_y, y = 0, 1
    while r:
        q = old_r // r
        old_r, r = r, old_r - q * r
        old_x, x = x, old_x - q * x
        old_y, y = y, old_y - q * y
    if old_r < 0:
        old_r, old_x, old_y = -old_r, -old_x, -old_y
    return old_r, old_x, old_y


def primitive_direction(k):
    """Primitive integer vector q and content c with k = c q, c >= 1."""
    k = tuple(int(x) for x in k)
    if k == (0, 0, 0):
        raise ValueError("zero direction has no primitive form")
    c = math.gcd(math.gcd(abs(k[0]), abs(k[1])), abs(k[2]))
    return tuple(x // c for x in k), c


def _canonical_class(m):
    """Representative of {m, -m} whose first nonzero entry is positive."""
    for x in m:
        if x:
            return m if x > 0 else tuple(-y for y in m)
    return m


def _lattice_rank2_basis(rows):
    """Basis of the rank-2 integer lattice generated by `rows` (row HNF)."""
    m = [list(int(x) for x in r) for r in rows]
    r = 0
    for c in range(3):
        while True:
            nz = [i for i in range(r, len(m)) if m[i][c] != 0]
            if not nz:
                break
            i0 = min(nz, key=lambda i: abs(m[i][c]))
            m[r], m[i0] = m[i0], m[r]
            done = True
            for i in range(r + 1, len(m)):
                if m[i][c]:
                    q = m[i][c] // m[r][c]
                    m[i] = [a - q * b for a, b in zip(m[i], m[r])]
                    if m[i][c]:
                        done = False
            if done:
                break
        if r < len(m) and m[r][c] != 0:
            if m[r][c] < 0:
                m[r] = [-a for a in m[r]]
            r += 1
        if r == len(m):
            break
    basis = [np.array(row, dtype=np.int64) for row in m[:r] if any(row)]
    if len(basis) != 2:
        raise ValueError("generators do not span a rank-2 lattice")
    return basis[0], basis[1]


def _gauss_reduce(b1, b2):
    """Gauss lattice reduction of a 2-basis to (near-)shortest vectors."""
    b1, b2 = b1.copy(), b2.copy()
    while True:
        if b1 @ b1 > b2 @ b2:
            b1, b2 = b2, b1
        t = int(round((b1 @ b2) / (b1 @ b1)))
        if t == 0:
            break
        b2 = b2 - t * b1
    return (np.array(_canonical_class(tuple(b1)), dtype=np.int64),
            np.array(_canonical_class(tuple(b2)), dtype=np.int64))


def transverse_basis(direction):
    """Reduced integer basis (b1, b2) of the dual plane {m : m . k = 0}.

    The basis spans the full transverse mode lattice of a tube in direction
    k (only the primitive part of k matters) and |b1 x b2| = |q|, the
    covolume of the plane lattice.
    """
    q, _ = primitive_direction(direction)
    g12, a, b = _egcd(q[0], q[1])
    _, c, d = _egcd(g12, q[2])
    v = np.array([a * c, b * c, d], dtype=np.int64)
    eye = np.eye(3, dtype=np.int64)
    gens = [eye[i] - q[i] * v for i in range(3)]
    b1, b2 = _lattice_rank2_basis(gens)
    return _gauss_reduce(b1, b2)


def _plane_cell(direction):
    """Real-space cell basis (a1, a2) dual to the plane lattice.

    Columns a_i lie in the transverse plane of `direction` and satisfy
    a_i . b_j = 2 pi delta_ij; the tube's transverse torus is
    {s1 a1 + s2 a2 : s in [0,1)^2}.
    """
    b1, b2 = transverse_basis(direction)
    bmat = np.stack([b1, b2], axis=1).astype(float)
    acell = TWO_PI * bmat @ np.linalg.inv(bmat.T @ bmat)
    return (b1, b2), acell


# ---------------------------------------------------------------------------
# periodic line-line distances (closed forms)
# ---------------------------------------------------------------------------


def _perp_projector(direction):
    k = np.asarray(direction, dtype=float)
    khat = k / np.linalg.norm(k)
    return np.eye(3) - np.outer(khat, khat)


_SHIFT_CUBE = np.array(
    [(i, j, l) for i in range(-3, 4) for j in range(-3, 4) for l in range(-3, 4)],
    dtype=float,
)


def tube_distance(dir_i, p_i, dir_j, p_j):
    """Distance in T^3 between the closed lines {p + t k} of two tubes.

    Skew pair (k_i x k_j = c != 0): every periodic image offsets the gap
    along c by multiples of 2 pi gcd(c), giving

        d = (2 pi g / |c|) dist_{S^1}( (p_j - p_i) . c / (2 pi g) ),

    where dist_{S^1}(u) is the distance of u to the nearest integer.  For
    parallel lines the minimum runs over the projected image lattice
    P (2 pi Z^3) of base-point offsets.
    """
    qi, _ = primitive_direction(dir_i)
    qj, _ = primitive_direction(dir_j)
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    c = np.cross(qi, qj).astype(np.int64)
    if c.any():
        g = math.gcd(math.gcd(abs(int(c[0])), abs(int(c[1]))), abs(int(c[2])))
        per = TWO_PI * g
        x = float((p_j - p_i) @ c)
        u = (x / per) % 1.0
        return per * min(u, 1.0 - u) / float(np.linalg.norm(c))
    proj = _perp_projector(qi)
    delta = (p_j - p_i)[None, :] + TWO_PI * _SHIFT_CUBE
    return float(np.sqrt(((delta @ proj.T) ** 2).sum(axis=1).min()))


def self_distance(direction):
    """Distance between a tube axis and its nearest distinct periodic image."""
    q, _ = primitive_direction(direction)
    proj = _perp_projector(q)
    img = TWO_PI * _SHIFT_CUBE @ proj.T
    norms = (img ** 2).sum(axis=1)
    return float(np.sqrt(norms[norms > 1e-18].min()))


def certify_tube_distances(tubes):
    """Minimum separation and gap certificate for a tube list.

    Returns (d_min, gap_min) where d_min is the smallest axis-to-axis
    distance (periodic images included) and gap_min the smallest value of
    distance - r_i - r_j over pairs, respectively distance - 2 r_i against a
    tube's own images.  Positive gap_min certifies disjoint supports.
    """
    d_min = math.inf
    gap = math.inf
    for i, ti in enumerate(tubes):
        ds = self_distance(ti.direction)
        d_min = min(d_min, ds)
        gap = min(gap, ds - 2.0 * ti.radius)
        for tj in tubes[i + 1:]:
            d = tube_distance(ti.direction, ti.base_point, tj.direction, tj.base_point)
            d_min = min(d_min, d)
            gap = min(gap, d - ti.radius - tj.radius)
    return d_min, gap


# ---------------------------------------------------------------------------
# placement
# ---------------------------------------------------------------------------


def _pairwise_min(dirs, points, idx, candidates):
    """Min distance of candidate base points for tube idx to all other tubes.

    `candidates` has shape (C, 3); the return value is the (C,) array of
    minima over the other tubes (self images are position independent and
    handled by the caller).
    """
    qi, _ = primitive_direction(dirs[idx])
    best = np.full(candidates.shape[0], np.inf)
    for j, kj in enumerate(dirs):
        if j == idx or points[j] is None:
            continue
        qj, _ = primitive_direction(kj)
        c = np.cross(qi, qj).astype(np.int64)
        if c.any():
            g = math.gcd(math.gcd(abs(int(c[0])), abs(int(c[1]))), abs(int(c[2])))
            per = TWO_PI * g
            x = (points[j][None, :] - candidates) @ c.astype(float)
            u = (x / per) % 1.0
            d = per * np.minimum(u, 1.0 - u) / float(np.linalg.norm(c))
        else:
            proj = _perp_projector(qi)
            delta = points[j][None, None, :] - candidates[:, None, :] \
                + TWO_PI * _SHIFT_CUBE[None, :, :]
            d = np.sqrt(((delta @ proj.T) ** 2).sum(axis=2).min(axis=1))
        best = np.minimum(best, d)
    return best


def _candidate_points(direction, halton, count):
    """Candidate base points for one direction: cell lattice plus low
    discrepancy fill, mapped through the transverse cell basis."""
    _, acell = _plane_cell(direction)
    ticks = np.arange(8) / 8.0
    s_lat = np.array([(a, b) for a in ticks for b in ticks])
    s_hal = halton.random(count)
    s = np.vstack([s_lat, s_hal])
    return s @ acell.T


def place_tubes(directions, *, sweeps=16, seed=_PLACEMENT_SEED):
    """Base points maximizing the minimum pairwise axis distance.

    Deterministic two-phase search: greedy insertion (most constrained
    directions first) over lattice plus Halton candidates in each tube's
    transverse cell, then worst-first single-tube re-placement sweeps with
    global and local candidate pools.  Duplicate directions collapse to a
    single tube slot.  Returns (points, d_each) where d_each[i] is the
    realized minimum distance of tube i to every other tube and to its own
    periodic images.
    """
    dirs = [tuple(int(x) for x in k) for k in directions]
    unique = []
    slot = {}
    for k in dirs:
        if k not in slot:
            slot[k] = len(unique)
            unique.append(k)
    halton = qmc.Halton(d=2, scramble=False, seed=None)
    halton.fast_forward(1)
    selfs = np.array([self_distance(k) for k in unique])
    order = sorted(range(len(unique)),
                   key=lambda i: (-sum(x * x for x in unique[i]), unique[i]))
    points = [None] * len(unique)
    for rank, i in enumerate(order):
        cands = _candidate_points(unique[i], halton, 96)
        if rank == 0:
            points[i] = cands[0]
            continue
        score = np.minimum(_pairwise_min(unique, points, i, cands), selfs[i])
        points[i] = cands[int(np.argmax(score))]
    rng = np.random.default_rng(seed)
    for sweep in range(sweeps):
        current = np.array([
            min(_pairwise_min(unique, points, i, points[i][None, :])[0], selfs[i])
            for i in range(len(unique))
        ])
        for i in np.argsort(current):
            local = []
            for scale in (0.5, 0.15, 0.04):
                jitter = rng.normal(scale=scale, size=(24, 3))
                local.append(points[i][None, :] + jitter)
            cands = np.vstack([points[i][None, :],
                               _candidate_points(unique[i], halton, 64),
                               *local])
            score = np.minimum(_pairwise_min(unique, points, i, cands), selfs[i])
            best = int(np.argmax(score))
            if score[best] > score[0] + 1e-12:
                points[i] = cands[best]
    d_each = np.array([
        min(_pairwise_min(unique, points, i, points[i][None, :])[0], selfs[i])
        for i in range(len(unique))
    ])
    pts = [np.mod(points[slot[k]], TWO_PI) for k in dirs]
    return pts, np.array([d_each[slot[k]] for k in dirs])


# ---------------------------------------------------------------------------
# radial template and tube spectra
# ---------------------------------------------------------------------------


def bump_template(u):
    """Zero-radial-mean bump (1 - beta u^2) e^{-1/(1-u^2)} on 0 <= u < 1."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = u < 1.0
    with np.errstate(divide="ignore", over="ignore"):
        ui = u[inside]
        out[inside] = (1.0 - BUMP_SHAPE * ui * ui) * np.exp(-1.0 / (1.0 - ui * ui))
    return out


@dataclass(frozen=True)
class TubeGeometry:
    """Axis and support radius of one periodic tube.

    The support {x : dist(x, {p + t k}) <= radius} is certified disjoint
    from every other tube of the family, periodic images included.
    """

    direction: tuple
    base_point: tuple
    radius: float

    def distance_to(self, other):
        return tube_distance(self.direction, self.base_point,
                             other.direction, other.base_point)


@dataclass(frozen=True)
class RadialProfile:
    """Radial samples of one pipe profile g_k on [0, r_k).

    amplitude is the overall scale A fixed by the exact normalization
    fint psi_k^2 = 1 of the band-limited profile; shape is the template
    constant beta making int_0^r g rho drho = 0.
    """

    radius: float
    amplitude: float
    shape: float
    samples: np.ndarray

    @classmethod
    def template(cls, radius, amplitude, n=192):
        rho = np.arange(n) * (radius / n)
        return cls(radius=float(radius), amplitude=float(amplitude),
                   shape=BUMP_SHAPE,
                   samples=amplitude * bump_template(rho / radius))

    def radial_mean(self):
        """Relative radial mean |int g rho drho| / int |g| rho drho.

        Gauss-Legendre quadrature on the analytic template; the integrand
        is smooth and vanishes to all orders at both endpoints, so 128
        nodes resolve the cancellation far below the 1e-10 contract.
        """
        nodes, weights = np.polynomial.legendre.leggauss(128)
        rho = 0.5 * self.radius * (nodes + 1.0)
        w = 0.5 * self.radius * weights
        g = self(rho)
        num = float(np.sum(w * g * rho))
        den = float(np.sum(w * np.abs(g) * rho))
        return abs(num) / den

    def __call__(self, rho):
        u = np.asarray(rho, dtype=float) / self.radius
        return self.amplitude * bump_template(u)


def _tube_spectrum(direction, base_point, radius, bandwidth, fft_size=None):
    """Raw transverse spectrum of one tube before tapering.

    Samples the radial template on the tube's transverse torus cell and
    reads off coefficients at the plane lattice modes m = n1 b1 + n2 b2.
    Returns (reps, coeffs, energy_all): canonical mode classes (M, 3) with
    0 < |m| <= bandwidth, their complex coefficients (phase carries the base
    point), and the total oscillatory energy of the sampled template for
    tail accounting.
    """
    (b1, b2), acell = _plane_cell(direction)
    gram = np.array([[b1 @ b1, b1 @ b2], [b1 @ b2, b2 @ b2]], dtype=float)
    lam_min = np.linalg.eigvalsh(gram)[0]
    nmax = int(bandwidth / math.sqrt(lam_min)) + 1
    if fft_size is None:
        fft_size = 256
        while fft_size < 4 * nmax:
            fft_size *= 2
    if fft_size < 2 * nmax + 2:
        raise ValueError("fft_size too small for the requested bandwidth")
    p = np.asarray(base_point, dtype=float)
    s0 = np.array([b1 @ p, b2 @ p]) / TWO_PI
    s = np.arange(fft_size) / fft_size
    u1 = (s - s0[0] + 0.5) % 1.0 - 0.5
    u2 = (s - s0[1] + 0.5) % 1.0 - 0.5
    g11 = float(acell[:, 0] @ acell[:, 0])
    g12 = float(acell[:, 0] @ acell[:, 1])
    g22 = float(acell[:, 1] @ acell[:, 1])
    dist2 = np.full((fft_size, fft_size), np.inf)
    for j1 in (-1.0, 0.0, 1.0):
        for j2 in (-1.0, 0.0, 1.0):
            x = u1 + j1
            y = u2 + j2
            q = (g11 * x * x)[:, None] + (2.0 * g12) * np.outer(x, y) \
                + (g22 * y * y)[None, :]
            np.minimum(dist2, q, out=dist2)
    f = bump_template(np.sqrt(dist2) / radius)
    c = np.fft.fft2(f) / fft_size ** 2
    energy = np.abs(c) ** 2
    energy_all = float(energy.sum() - energy[0, 0])
    reps = []
    coeffs = []
    for n1 in range(0, nmax + 1):
        lo = -nmax if n1 > 0 else 1
        for n2 in range(lo, nmax + 1):
            m = n1 * b1 + n2 * b2
            m2 = int(m @ m)
            if m2 == 0 or m2 > bandwidth * bandwidth:
                continue
            mt = tuple(int(x) for x in m)
            rep = _canonical_class(mt)
            s1, s2 = (n1, n2) if rep == mt else (-n1, -n2)
            reps.append(rep)
            coeffs.append(c[s1 % fft_size, s2 % fft_size])
    reps = np.array(reps, dtype=np.int64).reshape(len(reps), 3)
    return reps, np.array(coeffs, dtype=complex), energy_all


def _taper_weights(reps, bandwidth, taper_start):
    """Raised-cosine roll-off from taper_start * bandwidth to bandwidth."""
    mags = np.sqrt((reps.astype(float) ** 2).sum(axis=1)) / bandwidth
    w = np.ones(len(reps))
    roll = mags > taper_start
    t = (mags[roll] - taper_start) / (1.0 - taper_start)
    w[roll] = np.cos(0.5 * math.pi * np.minimum(t, 1.0)) ** 2
    return w


def _orthogonalize(dirs, reps, coeffs):
    """Zero every pairwise cross moment by Gram-Schmidt on shared modes.

    Two tubes share the lattice line Z (q_i x q_j) when skew and their whole
    plane when parallel.  Disjoint supports make the ideal shared-mode
    vectors nearly orthogonal already, so the sequential projections remove
    only O(tail^2) energy while enforcing sum_m psi_i^(m) conj(psi_j^(m)) = 0
    exactly.  Line groups are processed first; the rank-one plane projections
    for parallel pairs preserve them because the projector is itself line
    orthogonal to every third sharer.

    When the bandwidth is far too small for the radii, the surviving in-band
    coefficients are far-tail residue and the restrictions of two tubes to a
    shared line can be numerically parallel.  The projection then leaves pure
    roundoff, and keeping that noise would poison every later tube on the
    line (the projection coefficient divides by the noise norm).  Any
    residual whose squared norm drops below _COLLAPSE_RATIO times its
    pre-projection value is therefore set to exactly zero and never used as
    a projection basis; a zero restriction has exactly zero cross moments
    and the lost energy is charged to the tube's tail.
    """
    primitive = [primitive_direction(k)[0] for k in dirs]
    lines = {}
    for i, rep_i in enumerate(reps):
        for a, m in enumerate(rep_i):
            ell = _canonical_class(primitive_direction(m)[0])
            lines.setdefault(ell, {}).setdefault(i, []).append(a)
    for ell in sorted(lines):
        members = lines[ell]
        if len(members) < 2:
            continue
        done = []
        for i in sorted(members):
            idx = np.array(members[i], dtype=int)
            stride = reps[i][idx] @ np.array(ell)
            order = np.argsort(stride)
            idx = idx[order]
            v = coeffs[i][idx]
            pre = float(np.vdot(v, v).real)
            for u_idx, u in done:
                nu = float(np.vdot(u, u).real)
                v = v - (np.vdot(u, v) / nu) * u
            if float(np.vdot(v, v).real) <= _COLLAPSE_RATIO * pre:
                coeffs[i][idx] = 0.0
            else:
                coeffs[i][idx] = v
                done.append((idx, v.copy()))
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            if primitive[i] != primitive[j]:
                continue
            key_i = {tuple(m): a for a, m in enumerate(reps[i])}
            common = [(key_i[tuple(m)], a) for a, m in enumerate(reps[j])
                      if tuple(m) in key_i]
            ai = np.array([a for a, _ in common], dtype=int)
            aj = np.array([a for _, a in common], dtype=int)
            u = coeffs[i][ai]
            nu = float(np.vdot(u, u).real)
            if nu <= 0.0:
                continue
            w = coeffs[j][aj]
            pre = float(np.vdot(w, w).real)
            w = w - (np.vdot(u, w) / nu) * u
            if float(np.vdot(w, w).real) <= _COLLAPSE_RATIO * pre:
                coeffs[j][aj] = 0.0
            else:
                coeffs[j][aj] = w
    return coeffs


# ---------------------------------------------------------------------------
# family construction
# ---------------------------------------------------------------------------


@dataclass
class MikadoFamily:
    """Rank-one cone basis with one certified tube and profile per direction.

    tails[i] is the spectral tail of tube i: the energy fraction of the
    sampled template lost to truncation, tapering and cross-moment
    orthogonalization.  min_distance and margin certify the geometry:
    margin > 0 means every pair of tube supports is separated by at least
    margin, periodic images included.
    """

    basis: DecompositionBasis
    tubes: list
    profiles: list
    bandwidth: int
    tail_tol: float
    taper_start: float
    tails: np.ndarray
    min_distance: float
    margin: float
    modes: list = field(repr=False, default=None)
    coefficients: list = field(repr=False, default=None)

    @property
    def directions(self):
        return [t.direction for t in self.tubes]

    @property
    def tail(self):
        return float(self.tails.max())

    def to_json(self):
        return {
            "basis": self.basis.to_json(),
            "bandwidth": self.bandwidth,
            "tail_tol": self.tail_tol,
            "taper_start": self.taper_start,
            "tubes": [
                {
                    "direction": list(t.direction),
                    "base_point": list(t.base_point),
                    "radius": t.radius,
                }
                for t in self.tubes
            ],
            "amplitudes": [p.amplitude for p in self.profiles],
        }

    def dumps(self):
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, d):
        """Rebuild a family from stored geometry.

        Spectra are re-synthesized deterministically from the tube geometry;
        the stored amplitudes double as a consistency check of the rebuild.
        """
        basis = DecompositionBasis.from_json(d["basis"])
        tubes = [
            TubeGeometry(direction=tuple(t["direction"]),
                         base_point=tuple(t["base_point"]),
                         radius=float(t["radius"]))
            for t in d["tubes"]
        ]
        fam = _assemble(basis, tubes, int(d["bandwidth"]), float(d["tail_tol"]),
                        float(d["taper_start"]), check_tail=False)
        stored = np.asarray(d["amplitudes"], dtype=float)
        rebuilt = np.array([p.amplitude for p in fam.profiles])
        if not np.allclose(stored, rebuilt, rtol=1e-9, atol=0.0):
            raise ValueError("stored amplitudes disagree with re-synthesis")
        return fam

    @classmethod
    def loads(cls, text):
        return cls.from_json(json.loads(text))


def _assemble(basis, tubes, bandwidth, tail_tol, taper_start, check_tail=True):
    """Synthesize spectra for fixed geometry and wrap them in a family."""
    dirs = [t.direction for t in tubes]
    reps = []
    coeffs = []
    energies = []
    for t in tubes:
        r, c, e_all = _tube_spectrum(t.direction, t.base_point, t.radius, bandwidth)
        if len(r) == 0:
            raise BandwidthError(
                f"direction {t.direction} has no transverse mode with "
                f"|m| <= {bandwidth}; increase the bandwidth")
        c = c * _taper_weights(r, bandwidth, taper_start)
        reps.append(r)
        coeffs.append(c)
        energies.append(e_all)
    coeffs = _orthogonalize(dirs, reps, coeffs)
    tails = np.empty(len(tubes))
    amplitudes = np.empty(len(tubes))
    for i, c in enumerate(coeffs):
        kept = 2.0 * float((np.abs(c) ** 2).sum())
        if kept <= 0.0:
            raise BandwidthError(
                f"direction {dirs[i]} lost all modes to cross-moment "
                f"orthogonalization at bandwidth {bandwidth}; increase it")
        tails[i] = max(0.0, 1.0 - kept / energies[i])
        amplitudes[i] = 1.0 / math.sqrt(kept)
        coeffs[i] = c * amplitudes[i]
    if check_tail and tails.max() > tail_tol:
        worst = int(np.argmax(tails))
        raise BandwidthError(
            f"profile tail {tails[worst]:.3e} for direction {dirs[worst]} "
            f"exceeds tail_tol {tail_tol:.1e} at bandwidth {bandwidth}; "
            f"increase the bandwidth, enlarge the tube radii, or pass an "
            f"explicit looser tail_tol")
    profiles = [RadialProfile.template(t.radius, a)
                for t, a in zip(tubes, amplitudes)]
    d_min, gap = certify_tube_distances(tubes)
    if gap <= 0.0:
        raise PlacementError(
            f"tube supports overlap (gap {gap:.3e}); use smaller radii")
    return MikadoFamily(basis=basis, tubes=tubes, profiles=profiles,
                        bandwidth=int(bandwidth), tail_tol=float(tail_tol),
                        taper_start=float(taper_start), tails=tails,
                        min_distance=float(d_min), margin=float(gap),
                        modes=reps, coefficients=coeffs)


def build_mikado(nset, bandwidth, *, tail_tol=1e-8, min_radius=None,
                 taper_start=0.875, sweeps=16, basis=None):
    """Mikado family for every R in the validity set `nset`.

    Builds (or accepts) a rank-one cone basis on nset, places one tube per
    direction with certified pairwise separation, sets each radius to one
    third of the tube's realized minimum distance, and synthesizes
    band-limited profiles with exact moments.  Raises PlacementError when
    the placement cannot reach min_radius (smaller radii or a smaller
    direction family are needed) and BandwidthError when the profile tail
    exceeds tail_tol (a larger bandwidth, larger radii, or an explicit
    looser tail_tol are needed).
    """
    if basis is None:
        basis = build_nash_basis(nset)
    if basis.kind != "nash-cone":
        raise ValueError("Mikado families require a rank-one cone basis")
    dirs = [tuple(int(x) for x in k) for k in basis.directions]
    if set(dirs) == set(_AXES_POINTS) and len(dirs) == 3:
        points = [np.array(_AXES_POINTS[k]) for k in dirs]
        d_each = np.array([
            min(min(tube_distance(k, points[i], dirs[j], points[j])
                    for j in range(len(dirs)) if j != i),
                self_distance(k))
            for i, k in enumerate(dirs)
        ])
    else:
        points, d_each = place_tubes(dirs, sweeps=sweeps)
    radii = d_each / 3.0
    if min_radius is not None and radii.min() < min_radius:
        worst = int(np.argmin(radii))
        raise PlacementError(
            f"best placement gives radius {radii[worst]:.4f} for direction "
            f"{dirs[worst]}, below the requested minimum {min_radius:.4f}; "
            f"use smaller radii or a smaller direction family")
    tubes = [TubeGeometry(direction=k, base_point=tuple(float(x) for x in p),
                          radius=float(r))
             for k, p, r in zip(dirs, points, radii)]
    return _assemble(basis, tubes, bandwidth, tail_tol, taper_start)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _check_grid(family, grid):
    if grid.n < 2 * family.bandwidth + 2:
        raise ValueError(
            f"grid n={grid.n} cannot represent bandwidth {family.bandwidth}; "
            f"need n >= {2 * family.bandwidth + 2}")


def _paint_modes(spec, reps, vec_coeffs, n):
    """Accumulate canonical mode classes into an rfft half-spectrum.

    Classes with m_z < 0 are flipped to their conjugate representative; the
    m_z = 0 plane receives both members of each class explicitly so the
    stored coefficients stay Hermitian and the real transform is exact.
    """
    m = reps.copy()
    c = vec_coeffs.copy()
    flip = m[:, 2] < 0
    m[flip] *= -1
    c[flip] = np.conj(c[flip])
    ix, iy, iz = m[:, 0] % n, m[:, 1] % n, m[:, 2]
    for comp in range(3):
        np.add.at(spec[comp], (ix, iy, iz), c[:, comp])
    zz = iz == 0
    if zz.any():
        jx, jy = (-m[zz, 0]) % n, (-m[zz, 1]) % n
        for comp in range(3):
            np.add.at(spec[comp], (jx, jy, 0), np.conj(c[zz, comp]))


def evaluate_W_from_coefficients(family, gamma, grid):
    """Superposition sum_k gamma_k psi_k k; exactly linear in gamma."""
    _check_grid(family, grid)
    gamma = np.asarray(gamma, dtype=float)
    n = grid.n
    spec = np.zeros((3, n, n, n // 2 + 1), dtype=np.complex128)
    for g, tube, reps, coeffs in zip(gamma, family.tubes, family.modes,
                                     family.coefficients):
        if g == 0.0:
            continue
        k = np.asarray(tube.direction, dtype=float)
        vec = (g * coeffs)[:, None] * k[None, :]
        _paint_modes(spec, reps, vec, n)
    return PeriodicField.from_spectral(grid, "vector", spec, copy=False)


def _gamma_of(family, r):
    ev = evaluate_coefficients(family.basis, r)
    c = ev.as_array()
    floor = -1e-12 * max(1.0, float(np.abs(c).max()))
    if c.min() < floor:
        k = family.basis.directions[int(np.argmin(c))]
        raise ValueError(
            f"R leaves the decomposition cone: coefficient for direction "
            f"{tuple(int(x) for x in k)} is {c.min():.3e} < 0"
            + ("" if ev.inside else " (R is outside the validity set)"))
    return np.sqrt(np.maximum(c, 0.0))


def evaluate_W(family, r, grid):
    """Mikado velocity field W(R, .) on a grid.

    Postconditions (grid n >= 2 bandwidth + 2, measured by moment_report):
    fint W = 0 and fint W (x) W = R to round-off, div W = 0 spectrally.
    A negative decomposition coefficient means R left the cone and raises.
    """
    return evaluate_W_from_coefficients(family, _gamma_of(family, r), grid)


def evaluate_potential(family, r, grid):
    """Vector potential U with curl U = W(R, .) exactly and div U = 0.

    Mode by mode U^(m) = i m x W^(m) / |m|^2, the curl inverse on the
    complement of the (absent) zero mode.
    """
    _check_grid(family, grid)
    gamma = _gamma_of(family, r)
    n = grid.n
    spec = np.zeros((3, n, n, n // 2 + 1), dtype=np.complex128)
    for g, tube, reps, coeffs in zip(gamma, family.tubes, family.modes,
                                     family.coefficients):
        if g == 0.0:
            continue
        k = np.asarray(tube.direction, dtype=float)
        w_vec = (g * coeffs)[:, None] * k[None, :]
        m = reps.astype(float)
        m2 = (m * m).sum(axis=1, keepdims=True)
        u_vec = 1j * np.cross(m, w_vec) / m2
        _paint_modes(spec, reps, u_vec, n)
    return PeriodicField.from_spectral(grid, "vector", spec, copy=False)


def moment_report(family, r, grid=None):
    """Measured moment and divergence residuals of W(R, .) on a grid.

    The taper zeroes the band edge |m| = bandwidth, so live modes satisfy
    |m_axis| <= bandwidth - 1 and the quadratics are alias free once
    n >= 4 bandwidth - 2, which is enforced; with grid=None the smallest
    admissible power-of-two grid is used.  Returns a dict with the realized
    second moment error, mean, divergence of W relative to its sup norm,
    and the divergence of W (x) W relative to the squared sup norm.
    """
    if grid is None:
        n = 8
        while n < 4 * family.bandwidth - 2:
            n *= 2
        grid = fieldops.GridSpec(n)
    if grid.n < 4 * family.bandwidth - 2:
        raise ValueError(
            f"moment_report needs n >= {4 * family.bandwidth - 2} for "
            f"alias-free quadratics at bandwidth {family.bandwidth}")
    r = r.entries if hasattr(r, "entries") else np.asarray(r, dtype=float)
    n = grid.n
    w = evaluate_W(family, r, grid)
    mean_abs = float(np.abs(w.mean()).max())
    div_w = float(np.abs(fieldops.divergence(w).data).max())
    data = w.data
    w.drop_spec()
    sup = float(np.abs(data).max())
    second = np.empty((3, 3))
    for i in range(3):
        for j in range(i, 3):
            second[i, j] = second[j, i] = float((data[i] * data[j]).mean())
    rel = np.linalg.norm(second - r) / max(np.linalg.norm(r), 1e-300)
    # div(W (x) W) streamed one row at a time to bound peak memory: the
    # products are alias free on this grid, so raw transforms are exact.
    ks = [np.fft.fftfreq(n, d=1.0 / n).astype(np.float64)] * 2
    kx = ks[0][:, None, None]
    ky = ks[1][None, :, None]
    kz = np.arange(n // 2 + 1, dtype=np.float64)[None, None, :]
    wave = (kx, ky, kz)
    div_ww = 0.0
    for a in range(3):
        acc = np.zeros((n, n, n // 2 + 1), dtype=np.complex128)
        for b in range(3):
            acc += (1j * wave[b]) * np.fft.rfftn(data[a] * data[b])
        back = np.fft.irfftn(acc, s=(n, n, n), axes=(0, 1, 2))
        div_ww = max(div_ww, float(np.abs(back).max()))
    return {
        "sup_w": sup,
        "mean_abs": mean_abs,
        "second_moment_rel": float(rel),
        "div_w_rel": div_w / max(sup, 1e-300),
        "div_ww_rel": div_ww / max(sup * sup, 1e-300),
    }
