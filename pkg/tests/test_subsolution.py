"""Subsolution frames, classification ladder, lifting, and audits.

Oracles used here:

  * the Euler residual of an analytically assembled shear trajectory,
    v = (sin x2, 0, 0) cos(2 pi t) with the traceless stress taken from the
    exact time derivative, which isolates the audit's finite-difference
    error and must shrink at second order under dt halving;
  * a Mikado family paired with its own second moment, R = c Id - W (x) W,
    whose steady residual cancels to round-off;
  * closed-form material rates for R(x, t) = (2 + t cos x1) Id advected by
    (sin x2, 0, 0);
  * the Leray relation grad p = P g - g checked on seeded random fields.

Frozen values were produced by the same constructions at commit time and
pin the audit's discretization error across refactors.
"""

import numpy as np
import pytest

from convexflow import fields as fieldops
from convexflow import subsolution as subs
from convexflow.decompose import NsetDescriptor, RadiusLadder
from convexflow.fields import GridSpec, PeriodicField
from convexflow.invdiv import inv_div
from convexflow.mikado import build_mikado, evaluate_W

N = 16

# sup-norm Euler residual of the analytic shear trajectory at
# dt = 1/8, 1/16, 1/32; the dt halving ratios sit near 4 and the
# least-squares slope is 2.045.
CONV_ERRS = (6.862915010152e-01, 1.602503893382e-01, 4.029500266348e-02)
CONV_SLOPE = 2.0450743274297


@pytest.fixture(scope="module")
def grid():
    return GridSpec(N)


@pytest.fixture(scope="module")
def coords():
    x = np.linspace(0.0, 2.0 * np.pi, N, endpoint=False)
    return np.meshgrid(x, x, x, indexing="ij")


@pytest.fixture(scope="module")
def zero_v(grid):
    return PeriodicField.from_real(grid, "vector", np.zeros((3, N, N, N)))


@pytest.fixture(scope="module")
def zero_p(grid):
    return PeriodicField.from_real(grid, "scalar", np.zeros((1, N, N, N)))


@pytest.fixture(scope="module")
def ladder():
    return subs.default_ladder()


def shear_velocity(grid, coords, t, omega=1.0):
    _, x2, _ = coords
    data = np.stack([np.sin(x2) * np.cos(omega * t),
                     np.zeros_like(x2), np.zeros_like(x2)])
    return PeriodicField.from_real(grid, "vector", data)


def analytic_shear_trajectory(grid, coords, zero_p, nframes, omega=2.0 * np.pi):
    """Frames whose stress absorbs the exact time derivative.

    div(v (x) v) vanishes for the shear, so the Euler residual of these
    frames is purely the audit's finite-difference error in d_t v.
    """
    _, x2, _ = coords
    times = np.linspace(0.0, 1.0, nframes)
    frames = []
    for t in times:
        v = shear_velocity(grid, coords, t, omega)
        dv = PeriodicField.from_real(grid, "vector",
            np.stack([-omega * np.sin(x2) * np.sin(omega * t),
                      np.zeros_like(x2), np.zeros_like(x2)]))
        rring = -1.0 * inv_div(dv)
        lo, _ = fieldops.sym_eigen_range(rring)
        r = rring + fieldops.sym_identity(grid, 1.1 * max(0.0, -lo) + 1e-3)
        frames.append(subs.SubsolutionFrame.build(t, v, zero_p, r))
    return subs.SubsolutionTrajectory.build(frames)


class TestFrameBuild:
    def test_isotropic_frame_splits_cleanly(self, grid, zero_v, zero_p):
        frame = subs.SubsolutionFrame.build(
            0.0, zero_v, zero_p, fieldops.sym_identity(grid, 2.0))
        assert np.isclose(frame.rho, 2.0)
        assert frame.rring.c0() == 0.0
        assert frame.eigen_range() == (2.0, 2.0)

    def test_rejects_compressible_velocity(self, grid, coords, zero_p):
        x1, _, _ = coords
        data = np.stack([np.sin(x1), np.zeros_like(x1), np.zeros_like(x1)])
        v = PeriodicField.from_real(grid, "vector", data)
        with pytest.raises(ValueError, match="divergence-free"):
            subs.SubsolutionFrame.build(
                0.0, v, zero_p, fieldops.sym_identity(grid, 1.0))

    def test_rejects_indefinite_stress(self, grid, zero_v, zero_p):
        data = np.zeros((6, N, N, N))
        data[0], data[1], data[2] = 1.0, 1.0, -0.2
        r = PeriodicField.from_real(grid, "sym-tensor", data)
        with pytest.raises(ValueError, match="positive semidefinite"):
            subs.SubsolutionFrame.build(0.0, zero_v, zero_p, r)

    def test_rejects_wrong_ranks(self, grid, zero_v, zero_p):
        with pytest.raises(ValueError, match="vector, scalar, sym-tensor"):
            subs.SubsolutionFrame.build(0.0, zero_p, zero_p,
                                        fieldops.sym_identity(grid))

    def test_energy_matches_closed_form(self, grid, zero_v, zero_p):
        frame = subs.SubsolutionFrame.build(
            0.0, zero_v, zero_p, fieldops.sym_identity(grid, 2.0))
        vol = (2.0 * np.pi) ** 3
        assert np.allclose(frame.energy_tensor(), 2.0 * vol * np.eye(3))
        assert np.isclose(frame.energy(), 3.0 * vol)


class TestLift:
    def test_zero_velocity_gives_floor_stress(self, zero_v):
        traj = subs.lift(zero_v)
        frame = traj.frames[0]
        assert traj.classification == "strong"
        assert np.allclose(frame.r.data[:3], 1e-3)
        assert np.abs(frame.r.data[3:]).max() == 0.0
        assert frame.p.c0() == 0.0

    def test_floor_override(self, zero_v):
        traj = subs.lift(zero_v, floor=0.5)
        assert np.isclose(traj.frames[0].rho, 0.5)
        with pytest.raises(ValueError, match="floor"):
            subs.lift(zero_v, floor=0.0)

    def test_steady_beltrami_has_no_anisotropy(self, grid, coords):
        _, _, x3 = coords
        data = np.stack([np.sin(x3), np.cos(x3), np.zeros_like(x3)])
        v = PeriodicField.from_real(grid, "vector", data)
        traj = subs.lift(v)
        frame = traj.frames[0]
        assert frame.rring.c0() < 1e-12
        lo, _ = frame.eigen_range()
        assert np.isclose(lo, 1e-3 * (1.0 + v.c0() ** 2))

    def test_minimum_eigenvalue_identity(self, grid, coords):
        times = np.linspace(0.0, 1.0, 5)
        vs = [shear_velocity(grid, coords, t) for t in times]
        traj = subs.lift(vs, times)
        floor = 1e-3 * (1.0 + max(v.c0() for v in vs) ** 2)
        for frame in traj.frames:
            neg = max(0.0, -fieldops.sym_eigen_range(frame.rring)[0])
            lo, _ = frame.eigen_range()
            assert np.isclose(lo, 0.1 * neg + floor)

    def test_lifted_trajectory_audits_to_roundoff(self, grid, coords):
        times = np.linspace(0.0, 1.0, 5)
        vs = [shear_velocity(grid, coords, t) for t in times]
        traj = subs.lift(vs, times)
        report = subs.residual_audit(traj)
        assert report.linf.max() < 1e-12
        assert report.hminus1.max() < 1e-12

    def test_rejects_bad_inputs(self, grid, coords, zero_v):
        x1, _, _ = coords
        comp = PeriodicField.from_real(grid, "vector",
            np.stack([np.sin(x1), np.zeros_like(x1), np.zeros_like(x1)]))
        with pytest.raises(ValueError, match="divergence-free"):
            subs.lift(comp)
        drift = PeriodicField.from_real(grid, "vector",
            np.stack([np.ones_like(x1), np.zeros_like(x1), np.zeros_like(x1)]))
        with pytest.raises(ValueError, match="mean zero"):
            subs.lift(drift)
        with pytest.raises(ValueError, match="at least three"):
            subs.lift([zero_v, zero_v], np.array([0.0, 1.0]))
        with pytest.raises(ValueError, match="explicit times"):
            subs.lift([zero_v, zero_v, zero_v])
        with pytest.raises(ValueError, match="uniform"):
            subs.lift([zero_v, zero_v, zero_v], np.array([0.0, 0.1, 1.0]))


class TestClassify:
    def test_constant_isotropic_is_strong(self, grid, zero_v, zero_p):
        frame = subs.SubsolutionFrame.build(
            0.0, zero_v, zero_p, fieldops.sym_identity(grid, 2.0))
        report = subs.classify([frame])
        assert report.classification == "strong"
        assert report.violations == []
        assert np.isclose(report.delta0, 2.0)

    def test_oversized_anisotropy_is_strict_only(self, grid, zero_v, zero_p,
                                                 ladder):
        s = 1.5 * ladder.r0
        data = np.zeros((6, N, N, N))
        data[0], data[1], data[2] = 1.0 + s, 1.0 - s, 1.0
        r = PeriodicField.from_real(grid, "sym-tensor", data)
        frame = subs.SubsolutionFrame.build(0.0, zero_v, zero_p, r)
        report = subs.classify([frame])
        assert report.classification == "strict"
        assert len(report.violations) == 1
        worst = report.violations[0]
        assert worst.rule == "|Rring| <= r0 rho"
        assert np.isclose(worst.margin, -0.5 * ladder.r0)
        assert worst.location is not None

    def test_shrinking_anisotropy_restores_strong(self, grid, zero_v, zero_p,
                                                  ladder):
        s = 0.5 * ladder.r0
        data = np.zeros((6, N, N, N))
        data[0], data[1], data[2] = 1.0 + s, 1.0 - s, 1.0
        r = PeriodicField.from_real(grid, "sym-tensor", data)
        frame = subs.SubsolutionFrame.build(0.0, zero_v, zero_p, r)
        assert subs.classify([frame]).classification == "strong"

    def test_varying_trace_is_strict_only(self, grid, coords, zero_v, zero_p):
        x1, _, _ = coords
        data = np.zeros((6, N, N, N))
        data[0] = data[1] = data[2] = 2.0 + 0.5 * np.sin(x1)
        r = PeriodicField.from_real(grid, "sym-tensor", data)
        frame = subs.SubsolutionFrame.build(0.0, zero_v, zero_p, r)
        report = subs.classify([frame])
        assert report.classification == "strict"
        assert [v.rule for v in report.violations] == ["tr R constant in x"]

    def test_linear_budget_is_adapted(self, grid, zero_v, zero_p):
        times = np.linspace(0.0, 1.0, 5)
        frames = [subs.SubsolutionFrame.build(
            t, zero_v, zero_p, fieldops.sym_identity(grid, t)) for t in times]
        fitted = subs.fit_adapted_constant(frames, eps=0.5)
        assert np.isclose(fitted, 1.0)
        report = subs.classify(frames, adapted_params=(1.1, 0.5, 0.1))
        assert report.classification == "adapted"
        assert np.isclose(report.adapted_constant, 1.0)
        assert [v.rule for v in report.violations] == [
            "min eigenvalue of R > 0"]

    def test_adapted_requires_vanishing_initial_stress(self, grid, zero_v,
                                                       zero_p):
        times = np.linspace(0.0, 1.0, 5)
        frames = [subs.SubsolutionFrame.build(
            t, zero_v, zero_p, fieldops.sym_identity(grid, 1.0 + t))
            for t in times]
        report = subs.classify(frames, adapted_params=(1.1, 0.5, 0.1))
        assert report.classification == "strong"
        assert "R vanishes at t = 0" in [v.rule for v in report.violations]

    def test_adapted_requires_positive_budget(self, grid, zero_v, zero_p):
        times = np.linspace(0.0, 1.0, 5)
        frames = [subs.SubsolutionFrame.build(
            t, zero_v, zero_p, fieldops.sym_identity(grid, 0.0))
            for t in times]
        report = subs.classify(frames, adapted_params=(1.1, 0.5, 0.1))
        assert report.classification == "plain"
        assert "rhobar > 0 for t > 0" in [v.rule for v in report.violations]

    def test_adapted_parameter_validation(self, grid, zero_v, zero_p):
        frame = subs.SubsolutionFrame.build(
            0.0, zero_v, zero_p, fieldops.sym_identity(grid, 1.0))
        with pytest.raises(ValueError, match="theta"):
            subs.classify([frame] * 3, adapted_params=(1.1, 0.5, 0.2))
        with pytest.raises(ValueError, match="M > 1"):
            subs.classify([frame] * 3, adapted_params=(0.9, 0.5, 0.1))

    def test_random_definite_stress_is_at_least_strict(self, grid, zero_v,
                                                       zero_p):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            a = rng.standard_normal((3, 3))
            spd = a @ a.T + 0.5 * np.eye(3)
            data = np.zeros((6, N, N, N))
            for slot, (i, j) in enumerate(fieldops.SYM_COMPS):
                data[slot] = spd[i, j]
            r = PeriodicField.from_real(grid, "sym-tensor", data)
            frame = subs.SubsolutionFrame.build(0.0, zero_v, zero_p, r)
            report = subs.classify([frame])
            assert report.classification in ("strict", "strong")
            assert report.delta0 > 0.0


class TestMaterialRate:
    def test_matches_closed_form(self, grid, coords, zero_p):
        x1, x2, _ = coords
        times = np.linspace(0.0, 1.0, 5)
        frames = []
        for t in times:
            v = PeriodicField.from_real(grid, "vector",
                np.stack([np.sin(x2), np.zeros_like(x2), np.zeros_like(x2)]))
            data = np.zeros((6, N, N, N))
            data[0] = data[1] = data[2] = 2.0 + t * np.cos(x1)
            r = PeriodicField.from_real(grid, "sym-tensor", data)
            frames.append(subs.SubsolutionFrame.build(t, v, zero_p, r))
        rates = subs.material_stress_rate(frames, times[1] - times[0])
        for idx, t in enumerate(times):
            analytic = np.cos(x1) - np.sin(x2) * t * np.sin(x1)
            for comp in range(3):
                assert np.abs(rates[idx].data[comp] - analytic).max() < 1e-12
            assert np.abs(rates[idx].data[3:]).max() == 0.0


class TestResidualAudit:
    def test_constant_stress_is_exactly_euler(self, grid, zero_v, zero_p):
        frames = [subs.SubsolutionFrame.build(
            t, zero_v, zero_p, fieldops.sym_identity(grid, 2.0))
            for t in np.linspace(0.0, 1.0, 3)]
        traj = subs.SubsolutionTrajectory.build(frames)
        report = subs.residual_audit(traj)
        assert report.linf.max() == 0.0
        assert report.hminus1.max() == 0.0

    def test_needs_three_frames(self, grid, zero_v, zero_p):
        frame = subs.SubsolutionFrame.build(
            0.0, zero_v, zero_p, fieldops.sym_identity(grid, 1.0))
        with pytest.raises(ValueError, match="3 frames"):
            subs.residual_audit([frame])

    def test_discretization_error_halves_at_second_order(
            self, grid, coords, zero_p):
        errs = []
        for nframes in (9, 17, 33):
            traj = analytic_shear_trajectory(grid, coords, zero_p, nframes)
            errs.append(subs.residual_audit(traj).linf.max())
        errs = np.array(errs)
        assert np.allclose(errs, CONV_ERRS, rtol=1e-6)
        assert np.all(errs[:-1] / errs[1:] > 3.5)
        dts = 1.0 / np.array([8.0, 16.0, 32.0])
        slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert np.isclose(slope, CONV_SLOPE, rtol=1e-6)
        assert slope > 1.95

    def test_mikado_with_own_moment_is_steady_euler(self, zero_p):
        nset = NsetDescriptor.diagonal_box((0.5, 0.5, 0.5), (2.0, 2.0, 2.0))
        family = build_mikado(nset, 16, tail_tol=1e-2)
        wgrid = GridSpec(64)
        w = evaluate_W(family, np.diag([1.0, 1.2, 0.8]), wgrid)
        c = w.c0() ** 2 + 0.1
        r = fieldops.sym_identity(wgrid, c) - fieldops.sym_outer(w)
        pz = PeriodicField.from_real(wgrid, "scalar", np.zeros((1, 64, 64, 64)))
        frames = [subs.SubsolutionFrame.build(t, w, pz, r)
                  for t in np.linspace(0.0, 1.0, 3)]
        traj = subs.SubsolutionTrajectory.build(frames)
        report = subs.residual_audit(traj)
        assert report.linf.max() < 1e-6
        for tensor, energy in zip(report.energy_tensor, report.energy):
            assert np.allclose(tensor, tensor.T)
            assert np.isclose(energy, 0.5 * np.trace(tensor))


class TestAdmissibility:
    def test_constant_budget_is_admissible(self, grid, zero_v, zero_p):
        frames = [subs.SubsolutionFrame.build(
            t, zero_v, zero_p, fieldops.sym_identity(grid, 2.0))
            for t in np.linspace(0.0, 1.0, 3)]
        ok, energy = subs.admissibility_check(
            subs.SubsolutionTrajectory.build(frames))
        assert ok
        assert np.allclose(energy, energy[0])

    def test_decaying_budget_is_admissible(self, grid, zero_v, zero_p):
        frames = [subs.SubsolutionFrame.build(
            t, zero_v, zero_p, fieldops.sym_identity(grid, 2.0 - 0.5 * t))
            for t in np.linspace(0.0, 1.0, 3)]
        ok, energy = subs.admissibility_check(
            subs.SubsolutionTrajectory.build(frames))
        assert ok
        assert energy[-1] < energy[0]

    def test_growing_budget_is_flagged(self, grid, coords):
        times = np.linspace(0.0, 1.0, 5)
        vs = [shear_velocity(grid, coords, t) for t in times]
        traj = subs.lift(vs, times)
        ok, energy = subs.admissibility_check(traj)
        assert not ok
        assert energy[-1] > energy[0]


class TestSerialization:
    def test_roundtrip_preserves_everything(self, grid, zero_v, zero_p,
                                            tmp_path):
        times = np.linspace(0.0, 1.0, 5)
        frames = [subs.SubsolutionFrame.build(
            t, zero_v, zero_p, fieldops.sym_identity(grid, t)) for t in times]
        traj = subs.SubsolutionTrajectory.build(
            frames, adapted_params=(1.1, 0.5, 0.1))
        assert traj.classification == "adapted"
        subs.save_trajectory(traj, tmp_path / "traj")
        back = subs.load_trajectory(tmp_path / "traj")
        assert back.classification == "adapted"
        assert back.adapted_params == (1.1, 0.5, 0.1)
        assert back.ladder == traj.ladder
        for mine, theirs in zip(traj.frames, back.frames):
            assert mine.t == theirs.t
            assert np.array_equal(mine.v.data, theirs.v.data)
            assert np.array_equal(mine.p.data, theirs.p.data)
            assert np.array_equal(mine.r.data, theirs.r.data)

    def test_energy_csv_matches_frames(self, grid, zero_v, zero_p, tmp_path):
        frames = [subs.SubsolutionFrame.build(
            t, zero_v, zero_p, fieldops.sym_identity(grid, 2.0 - t))
            for t in np.linspace(0.0, 1.0, 3)]
        traj = subs.SubsolutionTrajectory.build(frames)
        subs.save_trajectory(traj, tmp_path / "traj")
        rows = (tmp_path / "traj" / "energy.csv").read_text().strip().split()
        assert rows[0] == "t,energy"
        for row, frame in zip(rows[1:], traj.frames):
            t, energy = map(float, row.split(","))
            assert t == frame.t
            assert np.isclose(energy, frame.energy())

    def test_tampered_manifest_is_rejected(self, grid, zero_v, zero_p,
                                           tmp_path):
        frames = [subs.SubsolutionFrame.build(
            0.0, zero_v, zero_p, fieldops.sym_identity(grid, 2.0))]
        traj = subs.SubsolutionTrajectory.build(frames)
        subs.save_trajectory(traj, tmp_path / "traj")
        manifest = tmp_path / "traj" / "manifest.json"
        manifest.write_text(
            manifest.read_text().replace("strong", "adapted"))
        with pytest.raises(ValueError, match="disagrees"):
            subs.load_trajectory(tmp_path / "traj")


class TestLerayPressure:
    def test_gradient_recovers_curl_free_part(self, grid):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            raw = PeriodicField.from_real(
                grid, "vector", rng.standard_normal((3, N, N, N)))
            v = fieldops.leray_project(raw)
            g = fieldops.divergence(fieldops.sym_outer(v))
            p = subs.leray_pressure(v)
            assert p.mean()[0] == 0.0
            lhs = fieldops.gradient(p)
            rhs = fieldops.leray_project(g) - g
            assert (lhs - rhs).c0() < 1e-12 * g.c0()
