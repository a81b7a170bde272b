"""Subsolution data model: frames, classification, lifting, audits.

A subsolution is a triple (v, p, R) of periodic fields satisfying

    d_t v + div(v (x) v) + grad p = -div R,    div v = 0,

with R(x, t) positive semidefinite.  Writing rho(t) = fint tr R / 3 and
Rring = R - (tr R / 3) Id for the pointwise traceless part, the stress
splits into an isotropic energy budget and an anisotropy whose relative
size drives the classification ladder

    plain < strict < strong < adapted:

    strict   the smallest eigenvalue of R stays strictly positive,
    strong   tr R is spatially constant and |Rring|_op <= r0 rho(t),
    adapted  |Rring|_op <= r2 rhobar(t) with rhobar(t) > 0 for t > 0,
             R vanishing at t = 0, and C^1 blow-up controlled by
             [v]_1 <= M rhobar^-(2+eps), [p]_1, [R]_1 <= M rhobar^-(3/2+eps),
             |(d_t + v . grad) R| <= M rhobar^-(1+eps).

The radii come from a RadiusLadder r3 < r2 < r1 < r0 (quarter steps by
default).  strict and strong are cumulative (strong includes strict
positivity); adapted is judged on its own terms because its stress
vanishes at t = 0, which strict rejects.  The strongest passing label
wins.

Time derivatives use centered differences on the uniform frame grid with
second-order one-sided stencils at the endpoints; lift and residual_audit
share the stencil, so a lifted trajectory audits to round-off and genuine
discretization error only appears against analytically built stresses.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from convexflow import fields as fieldops
from convexflow.decompose import RadiusLadder, build_beltrami_basis
from convexflow.fields import GridSpec, PeriodicField
from convexflow.invdiv import inv_div

DIV_TOL = 1e-10          # div v residual relative to ||v||_0
PSD_TOL = 1e-10          # eigenvalue floor relative to ||R||_0
TRACE_TOL = 1e-10        # pointwise trace of Rring relative to ||R||_0
TRACE_CONST_TOL = 1e-8   # spatial variation of tr R relative to rho
STRICT_TOL = 1e-10       # strict positivity margin relative to ||R||_0
ENERGY_TOL = 1e-8        # relative slack in the energy dominance check
MEAN_TOL = 1e-12

CLASS_ORDER = ("plain", "strict", "strong", "adapted")


def default_ladder():
    """Quarter-step ladder anchored at the certified ball radius."""
    _, ladder = build_beltrami_basis()
    return ladder


# ----------------------------------------------------------------------
# frames and trajectories
# ----------------------------------------------------------------------


@dataclass
class SubsolutionFrame:
    """One time slice (v, p, R) with its isotropic/traceless split.

    rho is the spatial average of tr R / 3 and rring the pointwise
    traceless part, so R = (tr R / 3) Id + rring with tr rring = 0 exactly;
    for strong frames tr R is constant in x and R = rho Id + rring.
    """

    t: float
    v: PeriodicField
    p: PeriodicField
    r: PeriodicField
    rho: float
    rring: PeriodicField

    @classmethod
    def build(cls, t, v, p, r, check=True):
        if v.rank != "vector" or p.rank != "scalar" or r.rank != "sym-tensor":
            raise ValueError("frame needs (vector, scalar, sym-tensor) fields")
        if v.grid.n != p.grid.n or v.grid.n != r.grid.n:
            raise ValueError("frame fields live on different grids")
        trace = fieldops.sym_trace(r)
        rho = float(trace.mean()[0]) / 3.0
        rring = fieldops.sym_traceless(r)
        frame = cls(t=float(t), v=v, p=p, r=r, rho=rho, rring=rring)
        if check:
            frame.validate()
        return frame

    def validate(self):
        vsup = self.v.c0()
        div_res = fieldops.divergence(self.v).c0()
        if div_res > DIV_TOL * vsup:
            raise ValueError(
                f"velocity is not divergence-free: residual {div_res:.3e} "
                f"exceeds {DIV_TOL:.0e} * ||v||_0 = {DIV_TOL * vsup:.3e}")
        rsup = self.r.c0()
        lo, _ = fieldops.sym_eigen_range(self.r)
        if lo < -PSD_TOL * rsup:
            raise ValueError(
                f"stress is not positive semidefinite: smallest eigenvalue "
                f"{lo:.3e} below -{PSD_TOL:.0e} * ||R||_0")
        tr_ring = fieldops.sym_trace(self.rring).c0()
        if tr_ring > TRACE_TOL * max(rsup, 1e-300):
            raise ValueError("traceless part carries trace beyond round-off")

    def eigen_range(self):
        return fieldops.sym_eigen_range(self.r)

    def anisotropy(self):
        """Pointwise spectral norm of Rring, max |eigenvalue|, grid sup."""
        ev = fieldops.sym_eigenvalues(self.rring.data)
        return float(np.maximum(np.abs(ev[0]), np.abs(ev[2])).max())

    def energy_tensor(self):
        """int (v (x) v + R) dx as a symmetric 3 x 3 matrix."""
        vol = (2.0 * math.pi) ** 3
        rbar = self.r.mean()
        out = np.empty((3, 3))
        for slot, (i, j) in enumerate(fieldops.SYM_COMPS):
            out[i, j] = out[j, i] = vol * (
                float((self.v.data[i] * self.v.data[j]).mean()) + rbar[slot])
        return out

    def energy(self):
        """Generalized energy (1/2) int |v|^2 + tr R dx."""
        return 0.5 * float(np.trace(self.energy_tensor()))


@dataclass
class SubsolutionTrajectory:
    """Time-ordered frames on a uniform grid of [0, T], classified once."""

    frames: list
    classification: str
    ladder: RadiusLadder
    adapted_params: tuple = None

    @classmethod
    def build(cls, frames, ladder=None, adapted_params=None):
        times = np.array([f.t for f in frames])
        _uniform_dt(times)
        ladder = ladder if ladder is not None else default_ladder()
        report = classify(frames, ladder=ladder, adapted_params=adapted_params)
        return cls(frames=list(frames), classification=report.classification,
                   ladder=ladder, adapted_params=adapted_params)

    @property
    def times(self):
        return np.array([f.t for f in self.frames])

    @property
    def dt(self):
        return _uniform_dt(self.times)

    @property
    def grid(self):
        return self.frames[0].v.grid


def _uniform_dt(times):
    if len(times) < 2:
        return 0.0
    steps = np.diff(times)
    dt = float(steps[0])
    if dt <= 0.0 or np.abs(steps - dt).max() > 1e-9 * max(dt, 1e-300):
        raise ValueError("frames must sit on a uniform increasing time grid")
    return dt


def _time_derivative(values, dt):
    """Second-order time derivatives of a field sequence.

    Centered differences inside, one-sided three-point stencils at the
    endpoints; a single steady frame differentiates to zero.
    """
    m = len(values)
    if m == 1:
        return [0.0 * values[0]]
    if m == 2:
        raise ValueError("time derivatives need one frame or at least three")
    out = []
    for i in range(m):
        if i == 0:
            d = (-3.0 * values[0] + 4.0 * values[1] - values[2]) * (0.5 / dt)
        elif i == m - 1:
            d = (3.0 * values[-1] - 4.0 * values[-2] + values[-3]) * (0.5 / dt)
        else:
            d = (values[i + 1] - values[i - 1]) * (0.5 / dt)
        out.append(d)
    return out


def material_stress_rate(frames, dt):
    """(d_t + v . grad) R per frame, the advective rate of the stress."""
    dr = _time_derivative([f.r for f in frames], dt)
    out = []
    for f, dtr in zip(frames, dr):
        data = dtr.data.copy()
        for axis in range(3):
            grad = fieldops.derivative(f.r, axis + 1)
            data += f.v.data[axis] * grad.data
        out.append(PeriodicField.from_real(f.r.grid, "sym-tensor", data,
                                           copy=False))
    return out


# ----------------------------------------------------------------------
# classification
# ----------------------------------------------------------------------


@dataclass
class Violation:
    """A failed inequality: which frame, which rule, by how much.

    margin is requirement minus attained value, negative when violated;
    location is a grid index tuple for pointwise rules, None otherwise.
    """

    frame: int
    rule: str
    margin: float
    location: tuple = None


@dataclass
class ClassificationReport:
    classification: str
    delta0: float
    ladder: RadiusLadder
    violations: list = field(default_factory=list)
    adapted_constant: float = None


def _argmax_point(values):
    return tuple(int(i) for i in np.unravel_index(int(np.argmax(values)),
                                                  values.shape))


def classify(frames_or_traj, ladder=None, adapted_params=None):
    """Strongest class whose own conditions hold, with all failures listed.

    adapted_params = (M, eps, theta) switches on the adapted checks; M > 1
    is the rate constant, eps > 0 the exponent slack, and theta < 1/(5+2 eps)
    the target regularity.  The Holder regularity of the initial slice is
    finite on any grid and is not audited.  Classes are independent: the
    adapted conditions allow rho(0) = 0 which strict rejects.
    """
    frames = getattr(frames_or_traj, "frames", frames_or_traj)
    ladder = ladder if ladder is not None else default_ladder()
    violations = []
    rsup = max(f.r.c0() for f in frames)

    lows = [f.eigen_range()[0] for f in frames]
    delta0 = min(lows)
    strict_ok = delta0 > STRICT_TOL * rsup
    if not strict_ok:
        violations.append(Violation(
            frame=int(np.argmin(lows)),
            rule="min eigenvalue of R > 0", margin=delta0))

    strong_ok = strict_ok
    for i, f in enumerate(frames):
        tr = fieldops.sym_trace(f.r).data
        spread = float(tr.max() - tr.min())
        allowed = TRACE_CONST_TOL * abs(f.rho)
        if spread > allowed:
            strong_ok = False
            violations.append(Violation(
                frame=i, rule="tr R constant in x", margin=allowed - spread))
        ev = fieldops.sym_eigenvalues(f.rring.data)
        op = np.maximum(np.abs(ev[0]), np.abs(ev[2]))
        worst = float(op.max())
        bound = ladder.r0 * f.rho
        if worst > bound * (1.0 + 1e-12):
            strong_ok = False
            violations.append(Violation(
                frame=i, rule="|Rring| <= r0 rho", margin=bound - worst,
                location=_argmax_point(op)))

    adapted_ok = False
    fitted = None
    if adapted_params is not None:
        adapted_ok, fitted = _check_adapted(frames, ladder, adapted_params,
                                            violations)

    label = "plain"
    if strict_ok:
        label = "strict"
    if strong_ok:
        label = "strong"
    if adapted_ok:
        label = "adapted"
    return ClassificationReport(classification=label, delta0=float(delta0),
                                ladder=ladder, violations=violations,
                                adapted_constant=fitted)


def _adapted_ratios(frame, rate, eps):
    """The four rate products M must dominate, at one frame."""
    rho = frame.rho
    return (
        ("[v]_1 rate", fieldops.c1_seminorm(frame.v) * rho ** (2.0 + eps)),
        ("[p]_1 rate", fieldops.c1_seminorm(frame.p) * rho ** (1.5 + eps)),
        ("[R]_1 rate", fieldops.c1_seminorm(frame.r) * rho ** (1.5 + eps)),
        ("material stress rate", rate.c0() * rho ** (1.0 + eps)),
    )


def _check_adapted(frames, ladder, params, violations):
    m_const, eps, theta = params
    if not (m_const > 1.0 and eps > 0.0 and 0.0 < theta < 1.0 / (5.0 + 2.0 * eps)):
        raise ValueError(
            "adapted parameters need M > 1, eps > 0 and theta < 1/(5+2 eps)")
    times = np.array([f.t for f in frames])
    if len(frames) < 3:
        violations.append(Violation(frame=0, rule="adapted needs >= 3 frames",
                                    margin=-1.0))
        return False, None
    rates = material_stress_rate(frames, _uniform_dt(times))
    ok = True
    fitted = 0.0
    for i, f in enumerate(frames):
        if i == 0 and times[0] == 0.0:
            r0sup = f.r.c0()
            if r0sup > 1e-12 * max(1.0, max(g.r.c0() for g in frames)):
                ok = False
                violations.append(Violation(
                    frame=i, rule="R vanishes at t = 0", margin=-r0sup))
            continue
        if f.rho <= 0.0:
            ok = False
            violations.append(Violation(
                frame=i, rule="rhobar > 0 for t > 0", margin=f.rho))
            continue
        worst = f.anisotropy()
        bound = ladder.r2 * f.rho
        if worst > bound * (1.0 + 1e-12):
            ok = False
            violations.append(Violation(
                frame=i, rule="|Rring| <= r2 rhobar", margin=bound - worst))
        for rule, value in _adapted_ratios(f, rates[i], eps):
            fitted = max(fitted, value)
            if value > m_const:
                ok = False
                violations.append(Violation(frame=i, rule=rule,
                                            margin=m_const - value))
    return ok, fitted


def fit_adapted_constant(frames, eps):
    """Smallest M > 1 making the four adapted rate bounds hold frame-wise."""
    frames = getattr(frames, "frames", frames)
    times = np.array([f.t for f in frames])
    rates = material_stress_rate(frames, _uniform_dt(times))
    worst = 0.0
    for f, rate in zip(frames, rates):
        if f.rho <= 0.0:
            continue
        for _, value in _adapted_ratios(f, rate, eps):
            worst = max(worst, value)
    return max(worst, 1.0 + 1e-12)


# ----------------------------------------------------------------------
# lifting divergence-free trajectories
# ----------------------------------------------------------------------


def _poisson_scalar(h):
    """Zero-mean p with Laplacian p = -h, spectrally."""
    n = h.grid.n
    k2 = fieldops._ksq(n).copy()
    k2[0, 0, 0] = 1.0
    spec = h.spec[0] / k2
    spec[0, 0, 0] = 0.0
    return PeriodicField.from_spectral(h.grid, "scalar", spec[None], copy=False)


def leray_pressure(v):
    """Pressure with grad p = -(Id - P) div(v (x) v), zero mean."""
    g = fieldops.divergence(fieldops.sym_outer(v))
    return _poisson_scalar(fieldops.divergence(g))


def lift(velocities, times=None, floor=None, safety=1.1, ladder=None):
    """Strict subsolution over a divergence-free velocity trajectory.

    Solves for the traceless stress absorbing the Euler residual,
    Rring = -invdiv(d_t v + P div(v (x) v)), takes the Leray pressure, and
    pads the isotropic part per frame so R stays positive definite:

        rho(t) = safety * max_x(-lambda_min(Rring)) + floor,

    with safety 1.1 and floor 1e-3 (1 + ||v||_0^2) by default, so the
    smallest eigenvalue of R is at least 0.1 max_x(-lambda_min) + floor.
    Velocities must be divergence-free with zero spatial mean.
    """
    if isinstance(velocities, PeriodicField):
        velocities = [velocities]
    if times is None:
        if len(velocities) != 1:
            raise ValueError("several frames need explicit times")
        times = np.array([0.0])
    times = np.asarray(times, dtype=float)
    if len(times) != len(velocities):
        raise ValueError("one time stamp per velocity frame")
    dt = _uniform_dt(times)
    for v in velocities:
        if v.rank != "vector":
            raise ValueError("lift expects vector fields")
        if fieldops.divergence(v).c0() > DIV_TOL * max(v.c0(), 1e-300):
            raise ValueError("lift input is not divergence-free")
        if np.abs(v.mean()).max() > MEAN_TOL * max(v.c0(), 1.0):
            raise ValueError("lift input needs spatial mean zero")
    vsup = max(v.c0() for v in velocities)
    if floor is None:
        floor = 1e-3 * (1.0 + vsup ** 2)
    if floor <= 0.0:
        raise ValueError("floor must be positive")

    dvdt = _time_derivative(velocities, dt)
    frames = []
    for t, v, dv in zip(times, velocities, dvdt):
        g = fieldops.divergence(fieldops.sym_outer(v))
        forcing = dv + fieldops.leray_project(g)
        rring = -1.0 * inv_div(forcing)
        lo, _ = fieldops.sym_eigen_range(rring)
        rho = safety * max(0.0, -lo) + floor
        r = rring + fieldops.sym_identity(v.grid, rho)
        p = _poisson_scalar(fieldops.divergence(g))
        frames.append(SubsolutionFrame.build(t, v, p, r))
    return SubsolutionTrajectory.build(frames, ladder=ladder)


# ----------------------------------------------------------------------
# audits
# ----------------------------------------------------------------------


@dataclass
class ResidualReport:
    """Euler residual and energy bookkeeping per frame.

    linf and hminus1 measure d_t v + div(v (x) v) + grad p + div R;
    energy_tensor is int (v (x) v + R) dx and energy its half trace, the
    generalized energy (1/2) int |v|^2 + tr R dx.
    """

    times: np.ndarray
    linf: np.ndarray
    hminus1: np.ndarray
    energy_tensor: np.ndarray
    energy: np.ndarray


def residual_audit(traj):
    """Centered-difference Euler residual report; needs >= 3 frames."""
    frames = getattr(traj, "frames", traj)
    if len(frames) < 3:
        raise ValueError("residual audit needs at least 3 frames")
    times = np.array([f.t for f in frames])
    dt = _uniform_dt(times)
    dvdt = _time_derivative([f.v for f in frames], dt)
    linf = np.empty(len(frames))
    hminus1 = np.empty(len(frames))
    tensors = np.empty((len(frames), 3, 3))
    energy = np.empty(len(frames))
    for i, (f, dv) in enumerate(zip(frames, dvdt)):
        residual = (dv + fieldops.divergence(fieldops.sym_outer(f.v))
                    + fieldops.gradient(f.p) + fieldops.divergence(f.r))
        linf[i] = residual.c0()
        hminus1[i] = fieldops.hminus1_norm(residual)
        tensors[i] = f.energy_tensor()
        energy[i] = 0.5 * np.trace(tensors[i])
    return ResidualReport(times=times, linf=linf, hminus1=hminus1,
                          energy_tensor=tensors, energy=energy)


def admissibility_check(traj):
    """Energy dominance: does E(t) <= E(0) hold within ENERGY_TOL?"""
    frames = getattr(traj, "frames", traj)
    energy = np.array([f.energy() for f in frames])
    slack = ENERGY_TOL * max(abs(energy[0]), 1e-300)
    return bool(np.all(energy <= energy[0] + slack)), energy


# ----------------------------------------------------------------------
# container files
# ----------------------------------------------------------------------


def save_trajectory(traj, directory):
    """Manifest + per-frame dumps + energy CSV in one directory."""
    os.makedirs(directory, exist_ok=True)
    times = traj.times
    manifest = {
        "T": float(times[-1]),
        "dt": float(traj.dt),
        "n": int(traj.grid.n),
        "frames": len(traj.frames),
        "classification": traj.classification,
        "ladder": {"r0": traj.ladder.r0, "r1": traj.ladder.r1,
                   "r2": traj.ladder.r2, "r3": traj.ladder.r3},
        "adapted_params": (list(traj.adapted_params)
                           if traj.adapted_params else None),
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(directory, "energy.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "energy"])
        for f in traj.frames:
            writer.writerow([f"{f.t:.17g}", f"{f.energy():.17g}"])
    for i, f in enumerate(traj.frames):
        np.savez(os.path.join(directory, f"frame_{i:04d}.npz"),
                 t=f.t, v=f.v.data, p=f.p.data, r=f.r.data)


def load_trajectory(directory):
    """Rebuild a trajectory from its container; re-audits classification."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    grid = GridSpec(manifest["n"])
    ladder = RadiusLadder(**manifest["ladder"])
    params = manifest["adapted_params"]
    params = tuple(params) if params else None
    frames = []
    for i in range(manifest["frames"]):
        blob = np.load(os.path.join(directory, f"frame_{i:04d}.npz"))
        frames.append(SubsolutionFrame.build(
            float(blob["t"]),
            PeriodicField.from_real(grid, "vector", blob["v"]),
            PeriodicField.from_real(grid, "scalar", blob["p"]),
            PeriodicField.from_real(grid, "sym-tensor", blob["r"])))
    traj = SubsolutionTrajectory.build(frames, ladder=ladder,
                                       adapted_params=params)
    if traj.classification != manifest["classification"]:
        raise ValueError(
            f"stored classification {manifest['classification']!r} disagrees "
            f"with the rebuilt audit {traj.classification!r}")
    return traj
