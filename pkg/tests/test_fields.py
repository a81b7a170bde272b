"""Field algebra and norm estimator tests.

Oracle policy: derived expectations are computed in the test body by an
independent route (finite differences, direct kernel sums, brute-force
shifts) before being compared with the module's spectral path.
"""

import numpy as np
import pytest

from convexflow.fields import (
    GridSpec, PeriodicField, NormReport,
    active_bandwidth, c1_seminorm, curl, dealias, derivative, divergence,
    gradient, hminus1_norm, holder_seminorm, l2_norm, leray_project, mollify,
    norm_report, resolution_floor, sym_eigen_range, sym_eigenvalues,
    sym_identity, sym_outer, sym_trace, sym_traceless,
)

RNG = np.random.default_rng(20260821)


def random_bandlimited(grid, rank, kmax=5, rng=RNG):
    """Random real field with spectrum supported in |k|_inf <= kmax."""
    n = grid.n
    ncomp = {"scalar": 1, "vector": 3, "sym-tensor": 6}[rank]
    data = np.zeros((ncomp, n, n, n))
    X, Y, Z = grid.meshgrid()
    for c in range(ncomp):
        for _ in range(6):
            k = rng.integers(-kmax, kmax + 1, size=3)
            amp = rng.normal()
            phase = rng.uniform(0, 2 * np.pi)
            data[c] += amp * np.cos(k[0] * X + k[1] * Y + k[2] * Z + phase)
    return PeriodicField.from_real(grid, rank, data, copy=False)


class TestGridSpec:
    def test_valid(self):
        g = GridSpec(n=32)
        assert g.dx == pytest.approx(2 * np.pi / 32)
        assert g.dealias_kmax == 10

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError):
            GridSpec(n=24)

    def test_rejects_small(self):
        with pytest.raises(ValueError):
            GridSpec(n=4)

    def test_rejects_wrong_period(self):
        with pytest.raises(ValueError):
            GridSpec(n=16, l=1.0)


class TestSynchronization:
    def test_roundtrip_random_fields(self):
        grid = GridSpec(n=32)
        for rank in ("scalar", "vector", "sym-tensor"):
            f = random_bandlimited(grid, rank, kmax=9)
            g = PeriodicField.from_spectral(grid, rank, f.spec)
            err = np.max(np.abs(g.data - f.data))
            assert err < 1e-12 * max(f.c0(), 1e-30)

    def test_mean_and_meanfree_flag(self):
        grid = GridSpec(n=16)
        f = PeriodicField.from_function(
            grid, "scalar", lambda X, Y, Z: 2.5 + np.sin(X))
        assert f.mean()[0] == pytest.approx(2.5, abs=1e-13)
        assert not f.meanfree
        g = PeriodicField.from_function(grid, "scalar",
                                        lambda X, Y, Z: np.sin(X))
        assert g.meanfree

    def test_immutability(self):
        grid = GridSpec(n=16)
        f = PeriodicField.zeros(grid, "scalar")
        with pytest.raises(ValueError):
            f.data[0, 0, 0, 0] = 1.0


class TestDerivative:
    def test_single_mode(self):
        grid = GridSpec(n=32)
        f = PeriodicField.from_function(grid, "scalar",
                                        lambda X, Y, Z: np.sin(X))
        d = derivative(f, 1)
        ref = PeriodicField.from_function(grid, "scalar",
                                          lambda X, Y, Z: np.cos(X))
        assert np.max(np.abs(d.data - ref.data)) < 1e-12

    def test_constant_goes_to_zero(self):
        grid = GridSpec(n=16)
        f = PeriodicField.from_real(grid, "scalar",
                                    np.full((1, 16, 16, 16), 3.0))
        assert derivative(f, 2).c0() == 0.0

    def test_against_centered_differences(self):
        # mode e^{i 3 x_2}: spectral derivative must agree with the O(h^2)
        # centered stencil up to the stencil's own truncation error.
        grid = GridSpec(n=64)
        f = PeriodicField.from_function(grid, "scalar",
                                        lambda X, Y, Z: np.cos(3 * Y))
        d = derivative(f, 2)
        h = grid.dx
        fd = (np.roll(f.data, -1, axis=2) - np.roll(f.data, 1, axis=2)) / (2 * h)
        trunc = np.max(np.abs(d.data - fd))
        # oracle: |(sin(3(y+h)) - sin(3(y-h)))/2h - 3 cos| <= 3^3 h^2/6 * 3
        assert trunc < 27 * h ** 2
        assert d.meanfree

    def test_derivative_axis_validation(self):
        grid = GridSpec(n=16)
        f = PeriodicField.zeros(grid, "scalar")
        with pytest.raises(ValueError):
            derivative(f, 0)


class TestLeray:
    def test_gradient_annihilated(self):
        grid = GridSpec(n=32)
        p = PeriodicField.from_function(grid, "scalar",
                                        lambda X, Y, Z: np.sin(X) * np.cos(2 * Z))
        g = gradient(p)
        out = leray_project(g)
        assert out.c0() < 1e-12

    def test_divfree_fixed_point(self):
        grid = GridSpec(n=32)
        v = PeriodicField.from_function(
            grid, "vector",
            lambda X, Y, Z: np.stack([np.sin(Y), np.zeros_like(X), np.zeros_like(X)]))
        out = leray_project(v)
        assert np.max(np.abs(out.data - v.data)) < 1e-12

    def test_constant_removed(self):
        grid = GridSpec(n=16)
        v = PeriodicField.from_real(grid, "vector",
                                    np.ones((3, 16, 16, 16)))
        assert leray_project(v).c0() < 1e-13

    def test_idempotent_and_divfree(self):
        grid = GridSpec(n=32)
        v = random_bandlimited(grid, "vector", kmax=8)
        pv = leray_project(v)
        ppv = leray_project(pv)
        assert np.max(np.abs(ppv.data - pv.data)) < 1e-12 * max(pv.c0(), 1.0)
        dv = divergence(pv)
        assert dv.c0() < 1e-12 * max(pv.c0(), 1.0)


class TestMollify:
    def test_constant_exact(self):
        grid = GridSpec(n=32)
        f = PeriodicField.from_real(grid, "scalar",
                                    np.full((1, 32, 32, 32), 7.0))
        out = mollify(f, 0.3)
        assert np.max(np.abs(out.data - 7.0)) < 1e-12

    def test_convergence_as_ell_shrinks(self):
        grid = GridSpec(n=64)
        f = PeriodicField.from_function(grid, "scalar",
                                        lambda X, Y, Z: np.sin(X) + np.cos(2 * Y))
        errs = [np.max(np.abs(mollify(f, ell).data - f.data))
                for ell in (0.4, 0.2, 0.1)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 0.02

    def test_single_mode_multiplier_against_direct_sum(self):
        # Oracle: apply the normalized kernel to e^{i k.x} by a direct
        # real-space sum; the module's FFT path must match.
        grid = GridSpec(n=32)
        ell = 0.8
        k = np.array([2, -1, 1])
        x = grid.axis()
        d = np.minimum(x, 2 * np.pi - x)
        r2 = (d[:, None, None] ** 2 + d[None, :, None] ** 2
              + d[None, None, :] ** 2) / ell ** 2
        kern = np.zeros((32, 32, 32))
        inside = r2 < 1
        kern[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
        kern /= kern.sum()
        X, Y, Z = grid.meshgrid()
        phase = k[0] * X + k[1] * Y + k[2] * Z
        mult_direct = float(np.sum(kern * np.cos(phase)))
        f = PeriodicField.from_real(grid, "scalar", np.cos(phase)[None])
        out = mollify(f, ell)
        assert np.max(np.abs(out.data - mult_direct * f.data)) < 1e-12

    def test_commutes_with_derivative(self):
        grid = GridSpec(n=32)
        f = random_bandlimited(grid, "scalar", kmax=6)
        a = derivative(mollify(f, 0.5), 3)
        b = mollify(derivative(f, 3), 0.5)
        assert np.max(np.abs(a.data - b.data)) < 1e-12 * max(a.c0(), 1.0)

    def test_mean_preserved(self):
        grid = GridSpec(n=32)
        f = random_bandlimited(grid, "scalar", kmax=6)
        assert mollify(f, 0.7).mean()[0] == pytest.approx(f.mean()[0], abs=1e-13)

    def test_rejects_large_ell(self):
        grid = GridSpec(n=16)
        f = PeriodicField.zeros(grid, "scalar")
        with pytest.raises(ValueError):
            mollify(f, 3.5)


class TestHolderEstimator:
    def test_constant_is_zero(self):
        grid = GridSpec(n=16)
        f = PeriodicField.from_real(grid, "scalar",
                                    np.full((1, 16, 16, 16), 2.0))
        assert holder_seminorm(f, 0.5) == 0.0

    def test_sine_near_lipschitz(self):
        # Oracle (brute force over dyadic shifts): the estimator for sin(x)
        # at shift h equals 2 sin(h/2)/h^theta; near theta=1 the j=0 shift
        # dominates and the value sits just below 1.
        grid = GridSpec(n=64)
        f = PeriodicField.from_function(grid, "scalar",
                                        lambda X, Y, Z: np.sin(X))
        theta = 0.999
        est = holder_seminorm(f, theta)
        # brute force: grid max of |sin(x+h) - sin(x)| = 2 sin(h/2) |cos|
        # evaluated at the half-shifted grid points
        x = grid.axis()
        oracle = max(
            np.max(np.abs(np.sin(x + h) - np.sin(x))) / h ** theta
            for h in grid.dx * 2.0 ** np.arange(0, 6))
        assert est == pytest.approx(oracle, rel=1e-10)
        assert 0.9 <= est <= 1.0

    def test_oscillation_scaling_slope(self):
        grid = GridSpec(n=128)
        theta = 0.4
        lams = np.array([4, 8, 16])
        vals = []
        for lam in lams:
            f = PeriodicField.from_function(
                grid, "scalar", lambda X, Y, Z, l=lam: np.sin(l * X))
            vals.append(holder_seminorm(f, theta))
        slope = np.polyfit(np.log(lams), np.log(vals), 1)[0]
        assert abs(slope - theta) < 0.05

    def test_rejects_bad_exponent(self):
        grid = GridSpec(n=16)
        f = PeriodicField.zeros(grid, "scalar")
        for theta in (0.0, 1.0, -0.3, 1.7):
            with pytest.raises(ValueError):
                holder_seminorm(f, theta)

    def test_interpolation_inequality(self):
        # [f]_theta <= 2^{1-theta} ||f||_0^{1-theta} [f]_1^theta, 10% slack.
        grid = GridSpec(n=32)
        for trial in range(5):
            f = random_bandlimited(grid, "scalar", kmax=6,
                                   rng=np.random.default_rng(300 + trial))
            c0 = f.c0()
            c1 = c1_seminorm(f)
            for theta in (0.2, 0.5, 0.8):
                lhs = holder_seminorm(f, theta)
                rhs = 2 ** (1 - theta) * c0 ** (1 - theta) * c1 ** theta
                assert lhs <= 1.1 * rhs

    def test_restricted_monotonicity(self):
        # For ||f||_0 <= 1 and shifts restricted to h <= 1 we have
        # h^theta >= h^theta' whenever theta <= theta', so the shift
        # estimator is nondecreasing in theta.
        grid = GridSpec(n=32)
        f = random_bandlimited(grid, "scalar", kmax=5)
        f = f * (1.0 / f.c0())
        data = f.data
        dx = grid.dx

        def restricted(theta):
            best = 0.0
            j = 0
            while dx * (1 << j) <= 1.0:
                h = dx * (1 << j)
                for ax in range(3):
                    d = np.abs(np.roll(data, -(1 << j), axis=1 + ax) - data).max()
                    best = max(best, d / h ** theta)
                j += 1
            return best

        thetas = [0.1, 0.3, 0.5, 0.7, 0.9]
        vals = [restricted(t) for t in thetas]
        assert all(vals[i] <= vals[i + 1] + 1e-12 for i in range(len(vals) - 1))


class TestHminus1:
    def test_single_mode(self):
        grid = GridSpec(n=32)
        f = PeriodicField.from_function(grid, "scalar",
                                        lambda X, Y, Z: np.cos(4 * X))
        assert hminus1_norm(f) == pytest.approx(l2_norm(f) / 4.0, rel=1e-12)

    def test_oscillation_inverse_lambda(self):
        grid = GridSpec(n=128)
        vals = []
        for lam in (8, 16, 32):
            f = PeriodicField.from_function(
                grid, "scalar",
                lambda X, Y, Z, l=lam: (2 + np.sin(X)) * np.cos(l * Y))
            vals.append(hminus1_norm(f))
        assert vals[0] / vals[1] == pytest.approx(2.0, rel=0.02)
        assert vals[1] / vals[2] == pytest.approx(2.0, rel=0.02)

    def test_zero_field(self):
        grid = GridSpec(n=16)
        assert hminus1_norm(PeriodicField.zeros(grid, "vector")) == 0.0

    def test_poincare_bound(self):
        grid = GridSpec(n=32)
        for trial in range(4):
            f = random_bandlimited(grid, "scalar", kmax=8,
                                   rng=np.random.default_rng(trial))
            f = f - PeriodicField.from_real(
                grid, "scalar", np.full((1, 32, 32, 32), f.mean()[0]))
            assert hminus1_norm(f) <= (2 * np.pi) ** 1.5 * f.c0() * (1 + 1e-12)


class TestDealias:
    def test_cube_mask(self):
        grid = GridSpec(n=32)  # kmax = 10
        f = PeriodicField.from_function(
            grid, "scalar", lambda X, Y, Z: np.cos(9 * X) + np.cos(12 * X))
        g = dealias(f)
        ref = PeriodicField.from_function(grid, "scalar",
                                          lambda X, Y, Z: np.cos(9 * X))
        assert np.max(np.abs(g.data - ref.data)) < 1e-12


class TestDumpFormat:
    def test_roundtrip_bitexact(self, tmp_path):
        grid = GridSpec(n=16)
        f = random_bandlimited(grid, "sym-tensor", kmax=4)
        path = tmp_path / "field.cvf"
        f.dump(path)
        g = PeriodicField.load(path)
        assert g.rank == "sym-tensor"
        assert np.array_equal(g.data, f.data)

    def test_header_and_x_fastest_layout(self, tmp_path):
        import struct
        grid = GridSpec(n=8)
        X, Y, Z = grid.meshgrid()
        f = PeriodicField.from_real(grid, "scalar", X[None])
        path = tmp_path / "layout.cvf"
        f.dump(path)
        raw = path.read_bytes()
        assert len(raw) == 16 + 12 + 8 * 8 ** 3
        rank_code, n, ncomp = struct.unpack("<III", raw[16:28])
        assert (rank_code, n, ncomp) == (0, 8, 1)
        vals = np.frombuffer(raw[28:], dtype="<f8")
        # x varies fastest: the first 8 samples sweep x at y = z = 0.
        assert np.allclose(vals[:8], grid.axis())
        assert vals[8] == pytest.approx(0.0)  # back to x=0 at y index 1

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.cvf"
        path.write_bytes(b"not a field dump at all" * 4)
        with pytest.raises(ValueError):
            PeriodicField.load(path)


class TestNormReport:
    def test_csv_roundtrip(self, tmp_path):
        grid = GridSpec(n=32)
        f = PeriodicField.from_function(grid, "scalar",
                                        lambda X, Y, Z: np.sin(2 * X))
        rep = norm_report(f, thetas=(0.5,))
        text = rep.to_csv(tmp_path / "report.csv")
        lines = dict(line.split(",") for line in text.strip().splitlines()[1:])
        assert float(lines["c0"]) == pytest.approx(f.c0())
        assert float(lines["c1"]) == pytest.approx(2.0, rel=1e-10)
        assert float(lines["hminus1"]) == pytest.approx(hminus1_norm(f))
        assert float(lines["holder_0.5"]) > 0
        assert float(lines["resolution_floor"]) == pytest.approx(8.0)

    def test_resolution_floor(self):
        grid = GridSpec(n=64)
        const = PeriodicField.from_real(grid, "scalar",
                                        np.full((1, 64, 64, 64), 1.0))
        assert resolution_floor(const) == 32.0
        f = PeriodicField.from_function(grid, "scalar",
                                        lambda X, Y, Z: np.sin(16 * X))
        assert resolution_floor(f) == pytest.approx(2.0)
        assert active_bandwidth(f) == 16


class TestSymTensorHelpers:
    def test_outer_trace_traceless(self):
        grid = GridSpec(n=16)
        v = random_bandlimited(grid, "vector", kmax=3)
        s = sym_outer(v)
        tr = sym_trace(s)
        ref = np.sum(v.data ** 2, axis=0)
        assert np.max(np.abs(tr.data[0] - ref)) < 1e-12
        dev = sym_traceless(s)
        assert sym_trace(dev).c0() < 1e-12

    def test_eigenvalues_against_lapack(self):
        rng = np.random.default_rng(7)
        m = rng.normal(size=(400, 3, 3))
        sym = (m + m.transpose(0, 2, 1)) / 2
        comps = np.stack([sym[:, 0, 0], sym[:, 1, 1], sym[:, 2, 2],
                          sym[:, 0, 1], sym[:, 0, 2], sym[:, 1, 2]])
        mine = np.sort(sym_eigenvalues(comps), axis=0)
        ref = np.sort(np.linalg.eigvalsh(sym), axis=1).T
        assert np.max(np.abs(mine - ref)) < 1e-10

    def test_eigen_range_identity(self):
        grid = GridSpec(n=16)
        s = sym_identity(grid, 2.0)
        lo, hi = sym_eigen_range(s)
        assert lo == pytest.approx(2.0)
        assert hi == pytest.approx(2.0)

    def test_curl_of_gradient_vanishes(self):
        grid = GridSpec(n=32)
        p = random_bandlimited(grid, "scalar", kmax=5)
        assert curl(gradient(p)).c0() < 1e-11 * max(p.c0(), 1.0)
