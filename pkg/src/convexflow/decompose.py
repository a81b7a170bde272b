"""Exact positive decompositions of symmetric 3x3 matrices.

Two families are provided, both with coefficient maps affine in R so that
positivity is certifiable in closed form and derivatives are exact:

* cone decomposition   R = sum_k c_k(R) k (x) k     over integer directions k,
* ball decomposition   R = 1/2 sum_k g_k(R) (Id - khat (x) khat)   over a fixed
  family of directions with |k|^2 = 5, valid on a Frobenius ball around Id.

The coefficient maps have the form c(R) = c* + G vec(R - R*), where vec is the
Frobenius-isometric embedding of symmetric matrices into R^6, G is a right
inverse of the moment matrix M = [vec(k x k)]_k (so reconstruction is exact for
every symmetric R, inside or outside the validity set), and c* > 0 solves
M c* = vec(R*) at the reference matrix R*.  Because the map is affine, its
exact minimum over common compact SPD sets (points, Frobenius balls,
eigenvalue bands, diagonal boxes) has a closed form, which is what the
builders certify.  When certification fails for every direction family in the
escalation ladder, the builder raises with an explicit violating matrix.
"""

import json
import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.optimize import linprog
from scipy.stats import norm, qmc

_SQRT2 = math.sqrt(2.0)

# Index convention for the vec embedding: diagonal first, then off-diagonals
# scaled by sqrt(2) so that |vec(S)|_2 = |S|_F.
_OFF_PAIRS = ((0, 1), (0, 2), (1, 2))


def vec_sym(s):
    """Frobenius-isometric 6-vector of a symmetric 3x3 matrix."""
    s = np.asarray(s, dtype=float)
    return np.array([s[0, 0], s[1, 1], s[2, 2],
                     _SQRT2 * s[0, 1], _SQRT2 * s[0, 2], _SQRT2 * s[1, 2]])


def unvec_sym(v):
    """Inverse of vec_sym."""
    v = np.asarray(v, dtype=float)
    a, b, c = v[3] / _SQRT2, v[4] / _SQRT2, v[5] / _SQRT2
    return np.array([[v[0], a, b], [a, v[1], c], [b, c, v[2]]])


def _check_symmetric(entries, what="matrix"):
    entries = np.asarray(entries, dtype=float)
    if entries.shape != (3, 3):
        raise ValueError(f"{what} must be 3x3, got shape {entries.shape}")
    scale = max(np.abs(entries).max(), 1.0)
    if np.abs(entries - entries.T).max() > 1e-12 * scale:
        raise ValueError(f"{what} must be symmetric")
    return 0.5 * (entries + entries.T)


@dataclass(frozen=True)
class SpdMatrix:
    """Symmetric positive definite 3x3 matrix; definiteness is checked."""

    entries: np.ndarray

    def __post_init__(self):
        sym = _check_symmetric(self.entries, "SpdMatrix")
        eigs = np.linalg.eigvalsh(sym)
        if eigs.min() <= 0.0:
            raise ValueError(f"matrix is not positive definite: eigenvalues {eigs}")
        object.__setattr__(self, "entries", sym)

    @property
    def eigenvalues(self):
        return np.linalg.eigvalsh(self.entries)


def _as_symmetric(r):
    if isinstance(r, SpdMatrix):
        return r.entries
    return _check_symmetric(r, "input matrix")


# ---------------------------------------------------------------------------
# Compact SPD set descriptors
# ---------------------------------------------------------------------------

_KINDS = ("point", "frobenius-ball", "eigenvalue-band", "diagonal-box")


@dataclass
class NsetDescriptor:
    """Compact subset of the SPD cone over which positivity is certified.

    kind 'point'           : the single matrix `center`.
    kind 'frobenius-ball'  : {R : |R - center|_F <= radius}.
    kind 'eigenvalue-band' : {R : lo * Id <= R <= hi * Id} (spectral bounds).
    kind 'diagonal-box'    : {diag(d) : lo_j <= d_j <= hi_j}.
    """

    kind: str
    center: np.ndarray = None
    radius: float = 0.0
    lo: np.ndarray = None
    hi: np.ndarray = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown descriptor kind {self.kind!r}")
        if self.kind in ("point", "frobenius-ball"):
            self.center = _check_symmetric(self.center, "descriptor center")
            if self.kind == "frobenius-ball" and self.radius <= 0.0:
                raise ValueError("ball radius must be positive")
        elif self.kind == "eigenvalue-band":
            lo, hi = float(np.ravel(self.lo)[0]), float(np.ravel(self.hi)[0])
            if not lo <= hi:
                raise ValueError("eigenvalue band requires lo <= hi")
            self.lo, self.hi = lo, hi
            self.center = 0.5 * (lo + hi) * np.eye(3)
        else:
            self.lo = np.asarray(self.lo, dtype=float).reshape(3)
            self.hi = np.asarray(self.hi, dtype=float).reshape(3)
            if not np.all(self.lo <= self.hi):
                raise ValueError("diagonal box requires lo <= hi componentwise")
            self.center = np.diag(0.5 * (self.lo + self.hi))

    # -- factories ----------------------------------------------------------

    @classmethod
    def point(cls, center):
        return cls(kind="point", center=center)

    @classmethod
    def ball(cls, center, radius):
        return cls(kind="frobenius-ball", center=center, radius=float(radius))

    @classmethod
    def eigenvalue_band(cls, lo, hi):
        return cls(kind="eigenvalue-band", lo=lo, hi=hi)

    @classmethod
    def diagonal_box(cls, lo, hi):
        return cls(kind="diagonal-box", lo=lo, hi=hi)

    # -- geometry -----------------------------------------------------------

    def eigenvalue_bounds(self):
        """Interval certainly containing every eigenvalue of every member."""
        if self.kind == "point":
            eigs = np.linalg.eigvalsh(self.center)
            return float(eigs[0]), float(eigs[-1])
        if self.kind == "frobenius-ball":
            eigs = np.linalg.eigvalsh(self.center)
            return float(eigs[0] - self.radius), float(eigs[-1] + self.radius)
        if self.kind == "eigenvalue-band":
            return self.lo, self.hi
        return float(self.lo.min()), float(self.hi.max())

    def is_diagonal(self):
        """Whether every member of the set is a diagonal matrix."""
        if self.kind == "diagonal-box":
            return True
        if self.kind == "point":
            return bool(np.abs(self.center - np.diag(np.diag(self.center))).max() < 1e-14)
        return False

    def contains(self, r, tol=1e-9):
        r = _as_symmetric(r)
        if self.kind == "point":
            return bool(np.linalg.norm(r - self.center) <= tol)
        if self.kind == "frobenius-ball":
            return bool(np.linalg.norm(r - self.center) <= self.radius + tol)
        if self.kind == "eigenvalue-band":
            eigs = np.linalg.eigvalsh(r)
            return bool(eigs[0] >= self.lo - tol and eigs[-1] <= self.hi + tol)
        if np.abs(r - np.diag(np.diag(r))).max() > tol:
            return False
        d = np.diag(r)
        return bool(np.all(d >= self.lo - tol) and np.all(d <= self.hi + tol))

    def halton_points(self, n):
        """Deterministic low-discrepancy samples of the set, shape (n, 3, 3)."""
        if n < 1:
            raise ValueError("need at least one sample")
        if self.kind == "point":
            return np.repeat(self.center[None, :, :], n, axis=0)
        if self.kind == "frobenius-ball":
            u = qmc.Halton(d=7, scramble=False).random(n + 1)[1:]
            z = norm.ppf(u[:, :6])
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            rad = self.radius * u[:, 6] ** (1.0 / 6.0)
            out = np.empty((n, 3, 3))
            for i in range(n):
                out[i] = self.center + unvec_sym(rad[i] * z[i])
            return out
        if self.kind == "eigenvalue-band":
            u = qmc.Halton(d=6, scramble=False).random(n + 1)[1:]
            eigs = self.lo + (self.hi - self.lo) * u[:, :3]
            alpha = 2.0 * np.pi * u[:, 3]
            cbeta = 2.0 * u[:, 4] - 1.0
            gamma = 2.0 * np.pi * u[:, 5]
            out = np.empty((n, 3, 3))
            for i in range(n):
                q = _euler_zyz(alpha[i], math.acos(np.clip(cbeta[i], -1, 1)), gamma[i])
                out[i] = (q * eigs[i]) @ q.T
            return out
        u = qmc.Halton(d=3, scramble=False).random(n + 1)[1:]
        d = self.lo + (self.hi - self.lo) * u
        out = np.zeros((n, 3, 3))
        out[:, 0, 0], out[:, 1, 1], out[:, 2, 2] = d[:, 0], d[:, 1], d[:, 2]
        return out

    # -- serialization ------------------------------------------------------

    def to_json(self):
        d = {"kind": self.kind}
        if self.kind in ("point", "frobenius-ball"):
            d["center"] = self.center.tolist()
        if self.kind == "frobenius-ball":
            d["radius"] = self.radius
        if self.kind == "eigenvalue-band":
            d["lo"], d["hi"] = self.lo, self.hi
        if self.kind == "diagonal-box":
            d["lo"], d["hi"] = self.lo.tolist(), self.hi.tolist()
        return d

    @classmethod
    def from_json(cls, d):
        kind = d["kind"]
        if kind == "point":
            return cls.point(np.array(d["center"]))
        if kind == "frobenius-ball":
            return cls.ball(np.array(d["center"]), d["radius"])
        if kind == "eigenvalue-band":
            return cls.eigenvalue_band(d["lo"], d["hi"])
        return cls.diagonal_box(np.array(d["lo"]), np.array(d["hi"]))


def _euler_zyz(alpha, beta, gamma):
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    rz1 = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz2 = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rz1 @ ry @ rz2


# ---------------------------------------------------------------------------
# Exact minima of affine coefficient maps over descriptor sets
# ---------------------------------------------------------------------------

def _min_terms(descriptor, rows, anchor_matrix):
    """Per-row exact minima of row . (vec R - vec R*) over the descriptor.

    Returns (terms, witnesses): terms[k] = min over the set, witnesses[k] an
    argmin matrix inside the set.  Both exact: the descriptor sets are convex
    and the map is linear, so the minimizers are boundary points in closed
    form (ball: antipodal cap point; band: spectral projector combination;
    box: corner).
    """
    rows = np.asarray(rows, dtype=float)
    kcount = rows.shape[0]
    vstar = vec_sym(anchor_matrix)
    terms = np.empty(kcount)
    witnesses = np.empty((kcount, 3, 3))
    kind = descriptor.kind
    vcen = vec_sym(descriptor.center)
    for k in range(kcount):
        row = rows[k]
        if kind == "point":
            terms[k] = row @ (vcen - vstar)
            witnesses[k] = descriptor.center
        elif kind == "frobenius-ball":
            nrm = np.linalg.norm(row)
            terms[k] = row @ (vcen - vstar) - descriptor.radius * nrm
            if nrm > 0:
                witnesses[k] = descriptor.center - unvec_sym(
                    descriptor.radius * row / nrm)
            else:
                witnesses[k] = descriptor.center
        elif kind == "eigenvalue-band":
            s = unvec_sym(row)
            sig, u = np.linalg.eigh(s)
            lo, hi = descriptor.lo, descriptor.hi
            terms[k] = (lo * sig.clip(min=0).sum()
                        + hi * sig.clip(max=0).sum() - row @ vstar)
            diag = np.where(sig < 0, hi, lo)
            witnesses[k] = (u * diag) @ u.T
        else:
            w = row[:3]
            corner = np.where(w >= 0, descriptor.lo, descriptor.hi)
            terms[k] = float(w @ corner) - row @ vstar
            witnesses[k] = np.diag(corner)
    return terms, witnesses


# ---------------------------------------------------------------------------
# Basis object
# ---------------------------------------------------------------------------

@dataclass
class DecompositionBasis:
    """Direction family plus affine coefficient map with certified validity.

    kind 'nash-cone':     R = sum_k c_k(R) k (x) k.
    kind 'beltrami-ball': R = 1/2 sum_{k in family j} c_k(R) (Id - khat khat)
                          for each family j separately; directions come in
                          +-k pairs with identical coefficient rows.
    """

    kind: str
    directions: np.ndarray
    family: np.ndarray
    lambda0_or_lambdabar: float
    anchor_matrix: np.ndarray
    anchor_coefficients: np.ndarray
    linear_map: np.ndarray
    validity: NsetDescriptor
    certified: bool
    certified_floor: float
    sampled_floor: float = None
    kinf: int = 0

    def coefficients(self, r):
        """Affine coefficients c* + G vec(R - R*); exact for any symmetric R."""
        r = _as_symmetric(r)
        return self.anchor_coefficients + self.linear_map @ (
            vec_sym(r) - vec_sym(self.anchor_matrix))

    def reconstruction(self, r):
        """Right-hand side of the kind's identity at R (for validation)."""
        c = self.coefficients(r)
        return self.reconstruction_from(c)

    def reconstruction_from(self, c):
        out = np.zeros((3, 3))
        if self.kind == "nash-cone":
            for ck, k in zip(c, self.directions):
                out += ck * np.outer(k, k)
            return out
        fam = self.family
        recon = {}
        for j in np.unique(fam):
            acc = np.zeros((3, 3))
            for ck, k in zip(c[fam == j], self.directions[fam == j]):
                khat = k / np.linalg.norm(k)
                acc += 0.5 * ck * (np.eye(3) - np.outer(khat, khat))
            recon[j] = acc
        return recon

    def to_json(self):
        return {
            "kind": self.kind,
            "directions": self.directions.tolist(),
            "family": self.family.tolist(),
            "lambda0_or_lambdabar": self.lambda0_or_lambdabar,
            "anchor_matrix": self.anchor_matrix.tolist(),
            "anchor_coefficients": self.anchor_coefficients.tolist(),
            "linear_map": self.linear_map.tolist(),
            "validity": self.validity.to_json(),
            "certified": self.certified,
            "certified_floor": self.certified_floor,
            "sampled_floor": self.sampled_floor,
            "kinf": self.kinf,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            kind=d["kind"],
            directions=np.array(d["directions"], dtype=int),
            family=np.array(d["family"], dtype=int),
            lambda0_or_lambdabar=d["lambda0_or_lambdabar"],
            anchor_matrix=np.array(d["anchor_matrix"]),
            anchor_coefficients=np.array(d["anchor_coefficients"]),
            linear_map=np.array(d["linear_map"]),
            validity=NsetDescriptor.from_json(d["validity"]),
            certified=d["certified"],
            certified_floor=d["certified_floor"],
            sampled_floor=d["sampled_floor"],
            kinf=d["kinf"],
        )

    def dumps(self):
        return json.dumps(self.to_json())

    @classmethod
    def loads(cls, text):
        return cls.from_json(json.loads(text))


@dataclass(frozen=True)
class RadiusLadder:
    """Nested radii r0 > r1 > r2 > r3 controlling validity and step sizes."""

    r0: float
    r1: float
    r2: float
    r3: float

    def __post_init__(self):
        if not (0.0 < self.r0 < 1.0):
            raise ValueError("r0 must lie in (0, 1)")
        if min(self.r1, self.r2, self.r3) <= 0.0:
            raise ValueError("all radii must be positive")
        if self.r1 > self.r0 / 4.0:
            raise ValueError("ladder requires r1 <= r0/4")
        if not self.r2 < self.r1 / 2.0:
            raise ValueError("ladder requires r2 < r1/2")
        if not self.r3 < self.r2 / 2.0:
            raise ValueError("ladder requires r3 < r2/2")


class InfeasibleSetError(ValueError):
    """No direction family in the ladder keeps coefficients positive.

    Carries `violating_sample` (a matrix of the requested set with a negative
    coefficient under the best map found) and `floor` (the exact, negative,
    certified minimum of that map over the set).
    """

    def __init__(self, message, violating_sample, floor):
        super().__init__(message)
        self.violating_sample = violating_sample
        self.floor = floor


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def direction_family(kinf):
    """All nonzero integer vectors with |k|_inf <= kinf, one per +-k pair."""
    seen = set()
    dirs = []
    for k in product(range(-kinf, kinf + 1), repeat=3):
        if k == (0, 0, 0):
            continue
        key = k if k > tuple(-x for x in k) else tuple(-x for x in k)
        if key in seen:
            continue
        seen.add(key)
        dirs.append(key)
    return np.array(sorted(dirs), dtype=int)


def _moment_matrix(dirs):
    return np.stack([vec_sym(np.outer(k, k)) for k in dirs], axis=1)


def _margin_anchor(m, offsets, target):
    """Anchor c* >= 0 with M c* = target maximizing min_k (c*_k - offsets_k)."""
    kcount = m.shape[1]
    res = linprog(
        c=np.r_[np.zeros(kcount), -1.0],
        A_eq=np.c_[m, np.zeros(6)], b_eq=target,
        A_ub=np.c_[-np.eye(kcount), np.ones(kcount)], b_ub=-offsets,
        bounds=[(0, None)] * kcount + [(None, None)],
        method="highs")
    if res.status != 0:
        return None, -np.inf
    return res.x[:kcount], float(res.x[-1])


def _validate_on_samples(basis, samples, tol=1e-10):
    """Reconstruction and positivity on sample matrices (build-time check)."""
    worst_rel = 0.0
    floor = np.inf
    for r in samples:
        c = basis.coefficients(r)
        floor = min(floor, float(c.min()))
        rec = basis.reconstruction_from(c)
        if basis.kind == "nash-cone":
            rel = np.linalg.norm(rec - r) / max(np.linalg.norm(r), 1e-300)
            worst_rel = max(worst_rel, rel)
        else:
            for fam_rec in rec.values():
                rel = np.linalg.norm(fam_rec - r) / max(np.linalg.norm(r), 1e-300)
                worst_rel = max(worst_rel, rel)
    if worst_rel > tol:
        raise RuntimeError(
            f"internal reconstruction check failed: rel error {worst_rel:.3e}")
    return floor


def build_nash_basis(nset, anchor="auto", kinf_start=2, kinf_cap=4,
                     audit_samples=10000, check_samples=100):
    """Certified positive cone decomposition over the set `nset`.

    Tries the axis family for purely diagonal sets, then integer direction
    families |k|_inf <= 2, 3, ... up to `kinf_cap`.  Each candidate map is
    certified by the exact minimum of its affine coefficients over the set;
    the first family whose floor is strictly positive wins.  A deterministic
    low-discrepancy audit then rechecks the floor on `audit_samples` points
    (the sampled minimum can only exceed the certified one).

    anchor: 'auto' prefers the plain right-inverse anchor c* = G vec(R*) when
    it certifies (that choice makes the whole map linear in R, so coefficients
    scale with R); 'linear' forces it; 'margin' always re-anchors by linear
    programming to maximize the certified floor.
    """
    if not isinstance(nset, NsetDescriptor):
        raise ValueError("nset must be an NsetDescriptor")
    if anchor not in ("auto", "linear", "margin"):
        raise ValueError(f"unknown anchor mode {anchor!r}")
    lo, hi = nset.eigenvalue_bounds()
    if not (0.0 < lo <= hi < np.inf):
        raise ValueError(
            f"nset eigenvalue bounds must satisfy 0 < lo <= hi, got [{lo}, {hi}]")

    rstar = nset.center

    if nset.is_diagonal():
        basis = _axes_basis(nset, rstar)
        if basis is not None:
            basis.sampled_floor = _audit(basis, nset, audit_samples)
            _validate_on_samples(basis, nset.halton_points(check_samples))
            return basis

    best = None
    for kinf in range(kinf_start, kinf_cap + 1):
        dirs = direction_family(kinf)
        m = _moment_matrix(dirs)
        g = m.T @ np.linalg.inv(m @ m.T)
        terms, witnesses = _min_terms(nset, g, rstar)
        candidates = []
        if anchor in ("auto", "linear"):
            cstar = g @ vec_sym(rstar)
            if cstar.min() > 0.0:
                candidates.append(cstar)
            elif anchor == "linear":
                raise InfeasibleSetError(
                    "right-inverse anchor is not strictly positive for "
                    f"|k|_inf <= {kinf}", rstar, float(cstar.min()))
        if anchor == "margin" or (anchor == "auto" and not (
                candidates and float((candidates[0] + terms).min()) > 0.0)):
            cstar, _ = _margin_anchor(m, -terms, vec_sym(rstar))
            if cstar is not None:
                candidates.append(cstar)
        for cstar in candidates:
            floor_vec = cstar + terms
            floor = float(floor_vec.min())
            if best is None or floor > best[0]:
                best = (floor, kinf, dirs, g, cstar,
                        witnesses[int(np.argmin(floor_vec))])
            if floor > 0.0:
                break
        if best is not None and best[0] > 0.0:
            break

    floor, kinf, dirs, g, cstar, witness = best
    if floor <= 0.0:
        raise InfeasibleSetError(
            f"no direction family up to |k|_inf <= {kinf_cap} keeps the "
            f"coefficients positive on the set (best exact floor {floor:.3e}); "
            f"violating sample:\n{witness}",
            witness, floor)

    basis = DecompositionBasis(
        kind="nash-cone",
        directions=dirs,
        family=np.zeros(len(dirs), dtype=int),
        lambda0_or_lambdabar=float(max(np.linalg.norm(dirs, axis=1))),
        anchor_matrix=rstar,
        anchor_coefficients=cstar,
        linear_map=g,
        validity=nset,
        certified=True,
        certified_floor=floor,
        kinf=kinf,
    )
    basis.sampled_floor = _audit(basis, nset, audit_samples)
    if basis.sampled_floor < floor - 1e-9:
        raise RuntimeError("sampled floor fell below the certified floor")
    _validate_on_samples(basis, nset.halton_points(check_samples))
    return basis


def _axes_basis(nset, rstar):
    """Axis-direction basis c(R) = diag(R), exact on diagonal sets."""
    dirs = np.eye(3, dtype=int)
    g = np.zeros((3, 6))
    g[0, 0] = g[1, 1] = g[2, 2] = 1.0
    terms, witnesses = _min_terms(nset, g, rstar)
    cstar = np.diag(rstar).astype(float)
    floor_vec = cstar + terms
    floor = float(floor_vec.min())
    if floor <= 0.0:
        return None
    return DecompositionBasis(
        kind="nash-cone",
        directions=dirs,
        family=np.zeros(3, dtype=int),
        lambda0_or_lambdabar=1.0,
        anchor_matrix=rstar,
        anchor_coefficients=cstar,
        linear_map=g,
        validity=nset,
        certified=True,
        certified_floor=floor,
        kinf=1,
    )


def _audit(basis, nset, n):
    if n < 1:
        return None
    samples = nset.halton_points(n)
    vstar = vec_sym(basis.anchor_matrix)
    vecs = np.stack([vec_sym(s) for s in samples], axis=0)
    coeffs = basis.anchor_coefficients[None, :] + (vecs - vstar) @ basis.linear_map.T
    return float(coeffs.min())


# Families of directions with |k|^2 = 5 used by the ball decomposition; each
# is closed under negation and the six sign classes per family are disjoint
# from the other family's.
BALL_FAMILY_1 = ((2, 1, 0), (0, 2, 1), (1, 0, 2),
                 (2, -1, 0), (0, 2, -1), (-1, 0, 2))
BALL_FAMILY_2 = ((1, 2, 0), (0, 1, 2), (2, 0, 1),
                 (1, -2, 0), (0, 1, -2), (-2, 0, 1))


def build_beltrami_basis():
    """Ball decomposition around Id with certified validity radius.

    Both direction families are anchored at Id, where the coefficients are
    uniformly 1/4.  The coefficient map is linear (anchored at Id with the
    exact inverse of the 6x6 moment matrix), so its minimum over the ball
    |R - Id|_F <= t is exactly 1/4 - t max_k |row_k|, and the certified
    validity radius 2 r0 = 1/4 / max_k |row_k| comes from the map's operator
    norm rather than sampling.  Returns (basis, ladder) with the ladder
    r1 = r0/4, r2 = r1/4, r3 = r2/4 exactly.
    """
    dirs = []
    fams = []
    rows = []
    anchors = []
    eye = np.eye(3)
    two_r0 = np.inf
    for fam_id, reps in ((1, BALL_FAMILY_1), (2, BALL_FAMILY_2)):
        m = np.stack(
            [vec_sym(eye - np.outer(k, k) / 5.0) for k in reps], axis=1)
        g = np.linalg.inv(m)
        cstar = g @ vec_sym(eye)
        row_norms = np.linalg.norm(g, axis=1)
        two_r0 = min(two_r0, float(np.min(cstar / row_norms)))
        for i, k in enumerate(reps):
            for sign in (1, -1):
                dirs.append(tuple(sign * x for x in k))
                fams.append(fam_id)
                rows.append(g[i])
                anchors.append(cstar[i])
    r0 = 0.5 * two_r0
    basis = DecompositionBasis(
        kind="beltrami-ball",
        directions=np.array(dirs, dtype=int),
        family=np.array(fams, dtype=int),
        lambda0_or_lambdabar=math.sqrt(5.0),
        anchor_matrix=eye,
        anchor_coefficients=np.array(anchors),
        linear_map=np.array(rows),
        validity=NsetDescriptor.ball(eye, 2.0 * r0),
        certified=True,
        certified_floor=0.0,
        kinf=2,
    )
    ladder = RadiusLadder(r0=r0, r1=r0 / 4.0, r2=r0 / 16.0, r3=r0 / 64.0)
    return basis, ladder


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class CoefficientEvaluation:
    """Coefficients of one matrix in one basis, with validity flags."""

    entries: list
    inside: bool
    positive: bool

    def as_array(self):
        return np.array([c for _, c, _ in self.entries])


def evaluate_coefficients(basis, r):
    """Coefficients (k, c_k, sqrt c_k) of R in the basis.

    Evaluation is permitted for any symmetric R (the affine map is global);
    `inside` reports membership in the certified validity set and `positive`
    whether every coefficient is strictly positive.  The square-root entry is
    NaN where the coefficient is negative.
    """
    r = _as_symmetric(r)
    c = basis.coefficients(r)
    entries = []
    for k, ck in zip(basis.directions, c):
        root = math.sqrt(ck) if ck >= 0.0 else math.nan
        entries.append((tuple(int(x) for x in k), float(ck), root))
    return CoefficientEvaluation(
        entries=entries,
        inside=basis.validity.contains(r),
        positive=bool(c.min() > 0.0),
    )
