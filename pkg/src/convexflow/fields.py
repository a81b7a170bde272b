"""Periodic field algebra on the 3-torus [0, 2pi)^3.

Fields are sampled on an n^3 grid (n a power of two) and carry a lazily
synchronized half-complex spectrum (rfftn layout, integer frequencies).
The spectral convention is unit-coefficient:

    f(x) = sum_k c_k e^{i k.x},      c_k = FFT(f)[k] / n^3,

so a single mode e^{i k.x} has coefficient exactly 1.  The H^-1 norm is the
L2-consistent value

    ||f||_{H^-1} = (2pi)^{3/2} sqrt( sum_{k != 0} |c_k|^2 / |k|^2 ),

which makes ||e^{i k.x}||_{H^-1} = ||e^{i k.x}||_{L2} / |k| and gives the
Poincare bound ||f||_{H^-1} <= (2pi)^{3/2} ||f||_0 for zero-mean fields.

Ranks: "scalar" (1 component), "vector" (3), "sym-tensor" (6 components in
the order xx, yy, zz, xy, xz, yz; symmetry is structural).  Divergence of a
symmetric tensor is the row divergence (div S)_i = d_j S_ij, which for
symmetric S coincides with the column convention.

Fields are immutable: every operation returns a new field and the sample
arrays are write-locked.  Quadratic products are expected to be dealiased
by the caller through `dealias` (2/3-rule cube mask) before being fed into
stress diagnostics.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field as dataclass_field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi

RANKS = ("scalar", "vector", "sym-tensor")
_NCOMP = {"scalar": 1, "vector": 3, "sym-tensor": 6}
_RANK_CODE = {"scalar": 0, "vector": 1, "sym-tensor": 2}
_CODE_RANK = {v: k for k, v in _RANK_CODE.items()}

# Symmetric tensor component order (xx, yy, zz, xy, xz, yz) and the map
# from matrix indices to the flat slot.
SYM_COMPS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
SYM_SLOT = {(0, 0): 0, (1, 1): 1, (2, 2): 2,
            (0, 1): 3, (1, 0): 3, (0, 2): 4, (2, 0): 4, (1, 2): 5, (2, 1): 5}

_MAGIC = b"CVXFLOWFIELDv01\x00"  # 16 bytes, version folded into the tag


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """Cubic grid on [0, 2pi)^3; dt is the step for time-sampled objects."""

    n: int
    l: float = TWO_PI
    dt: float = 1.0

    def __post_init__(self):
        if not (_is_pow2(self.n) and self.n >= 8):
            raise ValueError(f"grid size must be a power of two >= 8, got {self.n}")
        if self.l != TWO_PI:
            raise ValueError("domain period is fixed at 2*pi")
        if not (self.dt > 0.0):
            raise ValueError("dt must be positive")

    @property
    def dx(self) -> float:
        return TWO_PI / self.n

    @property
    def dealias_kmax(self) -> int:
        """Largest per-axis frequency kept by the 2/3-rule cube."""
        return self.n // 3

    def axis(self) -> np.ndarray:
        return np.arange(self.n) * self.dx

    def meshgrid(self):
        """Coordinate arrays (X, Y, Z), each of shape (n, n, n)."""
        x = self.axis()
        return np.meshgrid(x, x, x, indexing="ij")


@lru_cache(maxsize=4)
def _wavenumbers(n: int):
    """Integer frequency axes for the rfftn layout on an n^3 grid.

    Returns (kx, ky, kz) broadcastable to (n, n, n//2 + 1); kx/ky run over
    0..n/2-1, -n/2..-1 and kz over 0..n/2.
    """
    kfull = np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)
    khalf = np.arange(n // 2 + 1, dtype=np.int64)
    return (kfull[:, None, None], kfull[None, :, None], khalf[None, None, :])


@lru_cache(maxsize=2)
def _ksq(n: int) -> np.ndarray:
    kx, ky, kz = _wavenumbers(n)
    return (kx * kx + ky * ky + kz * kz).astype(np.float64)


@lru_cache(maxsize=2)
def _hermitian_weight(n: int) -> np.ndarray:
    """Multiplicity of each half-spectrum bin under Hermitian symmetry."""
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w[None, None, :]


@lru_cache(maxsize=2)
def _dealias_mask(n: int) -> np.ndarray:
    kx, ky, kz = _wavenumbers(n)
    kmax = n // 3
    return ((np.abs(kx) <= kmax) & (np.abs(ky) <= kmax) & (np.abs(kz) <= kmax))


@lru_cache(maxsize=2)
def _nyquist_free_mask(n: int) -> np.ndarray:
    """Mask that drops the asymmetric Nyquist planes (k = -n/2 and kz = n/2)."""
    kx, ky, kz = _wavenumbers(n)
    half = n // 2
    return ((kx != -half) & (ky != -half) & (kz != half))


def _lock(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class PeriodicField:
    """Immutable periodic field with paired real samples and spectrum.

    Construct via `from_real` / `from_spectral` / `from_function`; both
    representations are cached on first use.  `data` has shape
    (ncomp, n, n, n) indexed [comp, ix, iy, iz]; `spec` has shape
    (ncomp, n, n, n//2+1) in the unit-coefficient convention.
    """

    __slots__ = ("grid", "rank", "_real", "_spec")

    def __init__(self, grid: GridSpec, rank: str, real=None, spec=None):
        if rank not in RANKS:
            raise ValueError(f"unknown rank {rank!r}")
        if real is None and spec is None:
            raise ValueError("need real samples or spectral coefficients")
        self.grid = grid
        self.rank = rank
        self._real = real
        self._spec = spec

    # ---------------- constructors ----------------

    @classmethod
    def from_real(cls, grid: GridSpec, rank: str, data: np.ndarray,
                  copy: bool = True) -> "PeriodicField":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        expect = (_NCOMP[rank], grid.n, grid.n, grid.n)
        if data.shape != expect:
            raise ValueError(f"shape {data.shape} != {expect} for rank {rank!r}")
        if copy:
            data = data.copy()
        return cls(grid, rank, real=_lock(data))

    @classmethod
    def from_spectral(cls, grid: GridSpec, rank: str, coeffs: np.ndarray,
                      copy: bool = True) -> "PeriodicField":
        coeffs = np.asarray(coeffs, dtype=np.complex128)
        if coeffs.ndim == 3:
            coeffs = coeffs[None]
        expect = (_NCOMP[rank], grid.n, grid.n, grid.n // 2 + 1)
        if coeffs.shape != expect:
            raise ValueError(f"shape {coeffs.shape} != {expect} for rank {rank!r}")
        if copy:
            coeffs = coeffs.copy()
        return cls(grid, rank, spec=_lock(coeffs))

    @classmethod
    def from_function(cls, grid: GridSpec, rank: str, fn) -> "PeriodicField":
        """Sample fn(X, Y, Z) -> array of ncomp components (or one scalar)."""
        X, Y, Z = grid.meshgrid()
        vals = np.asarray(fn(X, Y, Z), dtype=np.float64)
        if vals.ndim == 3:
            vals = vals[None]
        return cls.from_real(grid, rank, vals, copy=False)

    @classmethod
    def zeros(cls, grid: GridSpec, rank: str) -> "PeriodicField":
        shape = (_NCOMP[rank], grid.n, grid.n, grid.n)
        return cls.from_real(grid, rank, np.zeros(shape), copy=False)

    # ---------------- lazy synchronization ----------------

    @property
    def ncomp(self) -> int:
        return _NCOMP[self.rank]

    @property
    def data(self) -> np.ndarray:
        if self._real is None:
            n = self.grid.n
            scale = float(n) ** 3
            out = np.empty((self.ncomp, n, n, n))
            for c in range(self.ncomp):
                out[c] = sfft.irfftn(self._spec[c] * scale, s=(n, n, n))
            self._real = _lock(out)
        return self._real

    @property
    def spec(self) -> np.ndarray:
        if self._spec is None:
            n = self.grid.n
            scale = 1.0 / float(n) ** 3
            out = np.empty((self.ncomp, n, n, n // 2 + 1), dtype=np.complex128)
            for c in range(self.ncomp):
                out[c] = sfft.rfftn(self._real[c]) * scale
            self._spec = _lock(out)
        return self._spec

    def synchronized(self) -> "PeriodicField":
        """Force both representations to exist (spec invariant hook)."""
        self.data
        self.spec
        return self

    def drop_real(self) -> None:
        """Release the sample cache (memory plumbing for big pipelines)."""
        if self._spec is not None:
            self._real = None

    def drop_spec(self) -> None:
        if self._real is not None:
            self._spec = None

    # ---------------- basic queries ----------------

    def comp(self, i: int) -> np.ndarray:
        return self.data[i]

    def mean(self) -> np.ndarray:
        """Cell-average per component (= coefficient at frequency zero)."""
        if self._spec is not None:
            return self._spec[:, 0, 0, 0].real.copy()
        return self.data.mean(axis=(1, 2, 3))

    @property
    def meanfree(self) -> bool:
        c0 = self.c0()
        if c0 == 0.0:
            return True
        return bool(np.max(np.abs(self.mean())) < 1e-12 * c0)

    def c0(self) -> float:
        """Sup norm over components and grid points."""
        return float(np.max(np.abs(self.data)))

    def allclose(self, other: "PeriodicField", atol=1e-12, rtol=1e-12) -> bool:
        return (self.rank == other.rank and self.grid.n == other.grid.n and
                np.allclose(self.data, other.data, atol=atol, rtol=rtol))

    # ---------------- algebra ----------------

    def _like(self, real=None, spec=None) -> "PeriodicField":
        return PeriodicField(self.grid, self.rank,
                             real=_lock(real) if real is not None else None,
                             spec=_lock(spec) if spec is not None else None)

    def __add__(self, other):
        self._check_compat(other)
        if self._spec is not None and other._spec is not None:
            return self._like(spec=self._spec + other._spec)
        return self._like(real=self.data + other.data)

    def __sub__(self, other):
        self._check_compat(other)
        if self._spec is not None and other._spec is not None:
            return self._like(spec=self._spec - other._spec)
        return self._like(real=self.data - other.data)

    def __mul__(self, scalar):
        s = float(scalar)
        if self._spec is not None:
            return self._like(spec=self._spec * s)
        return self._like(real=self.data * s)

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def _check_compat(self, other):
        if not isinstance(other, PeriodicField):
            raise TypeError("expected a PeriodicField")
        if self.rank != other.rank or self.grid.n != other.grid.n:
            raise ValueError("rank/grid mismatch")

    # ---------------- binary dump ----------------

    def dump(self, path) -> None:
        """Write the field: 16-byte magic+version, u32 rank code, u32 n,
        u32 component count, then f64 little-endian samples with x fastest.
        """
        n = self.grid.n
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<III", _RANK_CODE[self.rank], n, self.ncomp))
            for c in range(self.ncomp):
                block = np.ascontiguousarray(
                    self.data[c].ravel(order="F"), dtype="<f8")
                fh.write(block.tobytes())

    @classmethod
    def load(cls, path, grid: GridSpec | None = None) -> "PeriodicField":
        with open(path, "rb") as fh:
            magic = fh.read(16)
            if magic != _MAGIC:
                raise ValueError("bad magic: not a field dump")
            code, n, ncomp = struct.unpack("<III", fh.read(12))
            rank = _CODE_RANK.get(code)
            if rank is None or _NCOMP[rank] != ncomp:
                raise ValueError("corrupt header (rank/component mismatch)")
            raw = np.frombuffer(fh.read(8 * ncomp * n ** 3), dtype="<f8")
        if raw.size != ncomp * n ** 3:
            raise ValueError("truncated field dump")
        if grid is None:
            grid = GridSpec(n=n)
        elif grid.n != n:
            raise ValueError("grid size mismatch with dump header")
        data = np.empty((ncomp, n, n, n))
        for c in range(ncomp):
            data[c] = raw[c * n ** 3:(c + 1) * n ** 3].reshape((n, n, n), order="F")
        return cls.from_real(grid, rank, data, copy=False)


# ======================================================================
# Spectral operations
# ======================================================================

def _axis_index(axis: int) -> int:
    if axis not in (1, 2, 3):
        raise ValueError("axis must be 1, 2 or 3")
    return axis - 1


def derivative(f: PeriodicField, axis: int) -> PeriodicField:
    """Exact spectral partial derivative along axis (1-based).

    The asymmetric Nyquist plane is zeroed so the derivative of a real field
    stays real-symmetric; output is mean-free.
    """
    a = _axis_index(axis)
    n = f.grid.n
    k = _wavenumbers(n)[a]
    out = f.spec * (1j * k)
    out = out * _nyquist_free_mask(n)
    return PeriodicField.from_spectral(f.grid, f.rank, out, copy=False)


def gradient(f: PeriodicField) -> PeriodicField:
    """Gradient of a scalar field as a vector field."""
    if f.rank != "scalar":
        raise ValueError("gradient expects a scalar field")
    n = f.grid.n
    mask = _nyquist_free_mask(n)
    ks = _wavenumbers(n)
    out = np.empty((3, n, n, n // 2 + 1), dtype=np.complex128)
    for a in range(3):
        out[a] = f.spec[0] * (1j * ks[a]) * mask
    return PeriodicField.from_spectral(f.grid, "vector", out, copy=False)


def divergence(f: PeriodicField) -> PeriodicField:
    """Divergence: vector -> scalar, sym-tensor -> vector (row convention)."""
    n = f.grid.n
    mask = _nyquist_free_mask(n)
    ks = _wavenumbers(n)
    if f.rank == "vector":
        out = (f.spec[0] * (1j * ks[0]) + f.spec[1] * (1j * ks[1])
               + f.spec[2] * (1j * ks[2])) * mask
        return PeriodicField.from_spectral(f.grid, "scalar", out[None], copy=False)
    if f.rank == "sym-tensor":
        out = np.empty((3, n, n, n // 2 + 1), dtype=np.complex128)
        for i in range(3):
            acc = np.zeros((n, n, n // 2 + 1), dtype=np.complex128)
            for j in range(3):
                acc += f.spec[SYM_SLOT[(i, j)]] * (1j * ks[j])
            out[i] = acc * mask
        return PeriodicField.from_spectral(f.grid, "vector", out, copy=False)
    raise ValueError("divergence expects a vector or sym-tensor field")


def curl(v: PeriodicField) -> PeriodicField:
    if v.rank != "vector":
        raise ValueError("curl expects a vector field")
    n = v.grid.n
    mask = _nyquist_free_mask(n)
    kx, ky, kz = _wavenumbers(n)
    s = v.spec
    out = np.empty_like(s)
    out[0] = (1j * ky * s[2] - 1j * kz * s[1]) * mask
    out[1] = (1j * kz * s[0] - 1j * kx * s[2]) * mask
    out[2] = (1j * kx * s[1] - 1j * ky * s[0]) * mask
    return PeriodicField.from_spectral(v.grid, "vector", out, copy=False)


def leray_project(v: PeriodicField) -> PeriodicField:
    """Projection onto divergence-free, zero-mean vector fields.

    v_hat -> v_hat - k (k . v_hat)/|k|^2, with the k = 0 coefficient removed.
    Idempotent; spectral divergence of the output vanishes identically.
    """
    if v.rank != "vector":
        raise ValueError("leray_project expects a vector field")
    n = v.grid.n
    kx, ky, kz = _wavenumbers(n)
    k2 = _ksq(n).copy()
    k2[0, 0, 0] = 1.0  # avoid 0/0; the k=0 bin is zeroed below
    s = v.spec
    kdot = (kx * s[0] + ky * s[1] + kz * s[2]) / k2
    out = np.empty_like(s)
    out[0] = s[0] - kx * kdot
    out[1] = s[1] - ky * kdot
    out[2] = s[2] - kz * kdot
    out[:, 0, 0, 0] = 0.0
    return PeriodicField.from_spectral(v.grid, "vector", out, copy=False)


def dealias(f: PeriodicField) -> PeriodicField:
    """2/3-rule cube mask: zero all modes with any |k_axis| > n//3."""
    out = f.spec * _dealias_mask(f.grid.n)
    return PeriodicField.from_spectral(f.grid, f.rank, out, copy=False)


@lru_cache(maxsize=8)
def _mollifier_multiplier(n: int, ell: float) -> bytes:
    """Raw bytes of the real multiplier for the bump kernel at scale ell.

    Cached as bytes to keep the lru entry hashable and immutable.
    """
    grid = GridSpec(n=n)
    x = grid.axis()
    d = np.minimum(x, TWO_PI - x)  # periodic distance to 0 along one axis
    r2 = (d[:, None, None] ** 2 + d[None, :, None] ** 2
          + d[None, None, :] ** 2) / ell ** 2
    kern = np.zeros((n, n, n))
    inside = r2 < 1.0
    kern[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    total = kern.sum()
    if total <= 0.0:
        # Kernel narrower than a cell: nothing to smooth against.
        mult = np.ones((n, n, n // 2 + 1))
    else:
        kern /= total  # discrete integral exactly 1 -> mean preserved
        mult = sfft.rfftn(kern).real
    return mult.astype(np.float64).tobytes()


def mollify(f: PeriodicField, ell: float) -> PeriodicField:
    """Convolve with a smooth compactly supported radial bump at scale ell.

    The kernel is exp(-1/(1-(r/ell)^2)) on r < ell, sampled on the grid and
    normalized to discrete integral 1, so constants and means are preserved
    exactly and the operation commutes with `derivative`.
    """
    if not ell > 0.0:
        raise ValueError("mollification scale must be positive")
    if ell > np.pi:
        raise ValueError("mollification scale exceeds the half-period")
    n = f.grid.n
    mult = np.frombuffer(_mollifier_multiplier(n, float(ell))).reshape(
        (n, n, n // 2 + 1))
    return PeriodicField.from_spectral(f.grid, f.rank, f.spec * mult, copy=False)


# ======================================================================
# Norm estimators
# ======================================================================

def holder_seminorm(f: PeriodicField, theta: float) -> float:
    """Dyadic-shift Holder seminorm estimator.

    max over axes and shifts h = dx * 2^j (h <= pi) of ||f(.+h) - f||_0/h^theta.
    A lower bound of the true seminorm; exact for band-limited fields down to
    the resolution floor.
    """
    if not (0.0 < theta < 1.0):
        raise ValueError("Holder exponent must lie in (0, 1)")
    data = f.data
    n = f.grid.n
    dx = f.grid.dx
    best = 0.0
    j = 0
    while (1 << j) <= n // 2:
        shift = 1 << j
        h = dx * shift
        for ax in range(3):
            d = np.abs(np.roll(data, -shift, axis=1 + ax) - data).max()
            est = d / h ** theta
            if est > best:
                best = est
        j += 1
    return float(best)


def c1_seminorm(f: PeriodicField) -> float:
    """[f]_1 estimate: max over axes of the sup norm of the spectral derivative."""
    return max(derivative(f, ax).c0() for ax in (1, 2, 3))


def hminus1_norm(f: PeriodicField) -> float:
    """(2pi)^{3/2} sqrt(sum_{k!=0} |c_k|^2/|k|^2); the mean is ignored."""
    n = f.grid.n
    k2 = _ksq(n).copy()
    k2[0, 0, 0] = 1.0
    w = _hermitian_weight(n)
    total = 0.0
    for c in range(f.ncomp):
        mag2 = (f.spec[c].real ** 2 + f.spec[c].imag ** 2) * w / k2
        mag2[0, 0, 0] = 0.0
        total += float(mag2.sum())
    return TWO_PI ** 1.5 * np.sqrt(total)


def l2_norm(f: PeriodicField) -> float:
    """Spectral L2 norm, (2pi)^{3/2} ell^2 norm of the coefficients."""
    n = f.grid.n
    w = _hermitian_weight(n)
    total = 0.0
    for c in range(f.ncomp):
        total += float(((f.spec[c].real ** 2 + f.spec[c].imag ** 2) * w).sum())
    return TWO_PI ** 1.5 * np.sqrt(total)


def active_bandwidth(f: PeriodicField, rel_tol: float = 1e-13) -> int:
    """Largest |k|_inf carrying relative spectral weight above rel_tol."""
    n = f.grid.n
    kx, ky, kz = _wavenumbers(n)
    kinf = np.maximum(np.abs(kx), np.maximum(np.abs(ky), np.abs(kz)))
    mag = np.max(np.abs(f.spec), axis=0)
    peak = mag.max()
    if peak == 0.0:
        return 0
    active = mag > rel_tol * peak
    return int(kinf[active].max()) if active.any() else 0


def resolution_floor(f: PeriodicField) -> float:
    """Smallest trusted length scale in grid units.

    Half-wavelength of the finest active mode, n/(2 k_act) cells, capped at
    the half-period n/2 for featureless fields.
    """
    k_act = active_bandwidth(f)
    n = f.grid.n
    if k_act == 0:
        return n / 2.0
    return min(n / (2.0 * k_act), n / 2.0)


@dataclass
class NormReport:
    """Bundle of norm estimates for one field."""

    c0: float
    c1: float
    holder: dict = dataclass_field(default_factory=dict)
    hminus1: float = 0.0
    resolution_floor: float = 0.0

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write("quantity,value\n")
        buf.write(f"c0,{self.c0:.17g}\n")
        buf.write(f"c1,{self.c1:.17g}\n")
        for theta in sorted(self.holder):
            buf.write(f"holder_{theta:g},{self.holder[theta]:.17g}\n")
        buf.write(f"hminus1,{self.hminus1:.17g}\n")
        buf.write(f"resolution_floor,{self.resolution_floor:.17g}\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def norm_report(f: PeriodicField, thetas=(0.1, 1.0 / 3.0, 0.5, 0.9)) -> NormReport:
    return NormReport(
        c0=f.c0(),
        c1=c1_seminorm(f),
        holder={float(t): holder_seminorm(f, float(t)) for t in thetas},
        hminus1=hminus1_norm(f),
        resolution_floor=resolution_floor(f),
    )


# ======================================================================
# Symmetric-tensor helpers
# ======================================================================

def sym_outer(u: PeriodicField, w: PeriodicField | None = None) -> PeriodicField:
    """Symmetrized outer product of vector fields, (u w^T + w u^T)/2."""
    if u.rank != "vector":
        raise ValueError("sym_outer expects vector fields")
    if w is None:
        w = u
    u._check_compat(w)
    a, b = u.data, w.data
    n = u.grid.n
    out = np.empty((6, n, n, n))
    for slot, (i, j) in enumerate(SYM_COMPS):
        out[slot] = 0.5 * (a[i] * b[j] + a[j] * b[i])
    return PeriodicField.from_real(u.grid, "sym-tensor", out, copy=False)


def sym_trace(s: PeriodicField) -> PeriodicField:
    if s.rank != "sym-tensor":
        raise ValueError("sym_trace expects a sym-tensor field")
    tr = s.data[0] + s.data[1] + s.data[2]
    return PeriodicField.from_real(s.grid, "scalar", tr[None], copy=False)


def sym_traceless(s: PeriodicField) -> PeriodicField:
    if s.rank != "sym-tensor":
        raise ValueError("sym_traceless expects a sym-tensor field")
    tr3 = (s.data[0] + s.data[1] + s.data[2]) / 3.0
    out = s.data.copy()
    out[0] -= tr3
    out[1] -= tr3
    out[2] -= tr3
    return PeriodicField.from_real(s.grid, "sym-tensor", out, copy=False)


def sym_identity(grid: GridSpec, scale: float = 1.0) -> PeriodicField:
    out = np.zeros((6, grid.n, grid.n, grid.n))
    out[0] = out[1] = out[2] = scale
    return PeriodicField.from_real(grid, "sym-tensor", out, copy=False)


def sym_apply(s: PeriodicField, v: PeriodicField) -> PeriodicField:
    """Pointwise matrix-vector product S(x) v(x)."""
    if s.rank != "sym-tensor" or v.rank != "vector":
        raise ValueError("sym_apply expects (sym-tensor, vector)")
    d, u = s.data, v.data
    n = s.grid.n
    out = np.empty((3, n, n, n))
    out[0] = d[0] * u[0] + d[3] * u[1] + d[4] * u[2]
    out[1] = d[3] * u[0] + d[1] * u[1] + d[5] * u[2]
    out[2] = d[4] * u[0] + d[5] * u[1] + d[2] * u[2]
    return PeriodicField.from_real(v.grid, "vector", out, copy=False)


def sym_eigenvalues(data6: np.ndarray) -> np.ndarray:
    """Eigenvalues of symmetric 3x3 tensors given as 6 stacked components.

    data6 has shape (6, ...); returns shape (3, ...) sorted ascending.
    Closed-form (trigonometric) solution, vectorized over all points.
    Large inputs are processed in flat blocks to cap temporary storage.
    """
    tail = data6.shape[1:]
    npts = int(np.prod(tail, dtype=np.int64)) if tail else 1
    block = 1 << 21
    if npts > block:
        flat = data6.reshape(6, npts)
        out = np.empty((3, npts))
        for lo_ix in range(0, npts, block):
            sl = slice(lo_ix, min(lo_ix + block, npts))
            out[:, sl] = _sym_eigenvalues_block(flat[:, sl])
        return out.reshape((3,) + tail)
    return _sym_eigenvalues_block(data6)


def _sym_eigenvalues_block(data6: np.ndarray) -> np.ndarray:
    a, b, c, d, e, f = (data6[i] for i in range(6))  # xx yy zz xy xz yz
    q = (a + b + c) / 3.0
    p1 = d * d + e * e + f * f
    p2 = (a - q) ** 2 + (b - q) ** 2 + (c - q) ** 2 + 2.0 * p1
    p = np.sqrt(np.maximum(p2, 0.0) / 6.0)
    safe = p > 0.0
    pin = np.where(safe, p, 1.0)
    ba = (a - q) / pin
    bb = (b - q) / pin
    bc = (c - q) / pin
    bd = d / pin
    be = e / pin
    bf = f / pin
    detB = (ba * (bb * bc - bf * bf) - bd * (bd * bc - bf * be)
            + be * (bd * bf - bb * be))
    r = np.clip(detB / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    lo = np.where(safe, np.minimum(e3, np.minimum(e2, e1)), q)
    hi = np.where(safe, np.maximum(e3, np.maximum(e2, e1)), q)
    mid = np.where(safe, 3.0 * q - lo - hi, q)
    return np.stack([lo, mid, hi])


def sym_eigen_range(s: PeriodicField) -> tuple:
    """(global min eigenvalue, global max eigenvalue) over the grid."""
    ev = sym_eigenvalues(s.data)
    return float(ev[0].min()), float(ev[2].max())
