"""Energy/gradient consistency and symmetry checks for every system kind."""

import math

import numpy as np
import pytest

from feat.errors import ShapeError
from feat.systems import (
    BlendSystem,
    DoubleWellSystem,
    GaussianSystem,
    GmmSystem,
    LjClusterSystem,
    Phi4System,
    ScaledSystem,
    UmbrellaSystem,
    interpolated_energy,
    log_partition_analytic,
)


def _fd_gradient(system, x, step=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (system.energy(xp) - system.energy(xm)) / (2 * step)
    return g


def _random_point(system, rng):
    if isinstance(system, LjClusterSystem):
        return system.lattice_start(seed=int(rng.integers(2**31)))
    return 0.8 * rng.standard_normal(system.dim)


ALL_SYSTEMS = [
    GaussianSystem([0.5, -1.0], [1.0, 2.5]),
    GmmSystem.random(2, 4, 0.4, seed=3),
    DoubleWellSystem(2, 2.0),
    LjClusterSystem(3),
    Phi4System(4, m2=-1.0, lam=0.8),
    Phi4System(3, m2=-1.0, lam=0.8, umbrella_k=10.0, umbrella_mu=-0.3),
    UmbrellaSystem(DoubleWellSystem(1, 2.0), 10.0, 0.6),
    ScaledSystem(GaussianSystem([0.0], [1.0]), 20.0),
]


class TestGradients:
    @pytest.mark.parametrize("system", ALL_SYSTEMS,
                             ids=lambda s: s.describe())
    def test_gradient_matches_finite_differences(self, system):
        rng = np.random.default_rng(0)
        trials = max(1, 100 // system.dim)
        for _ in range(trials):
            x = _random_point(system, rng)
            g = system.grad(x)
            fd = _fd_gradient(system, x)
            scale = np.maximum(np.abs(fd), 1.0)
            assert np.max(np.abs(g - fd) / scale) <= 1e-6

    @pytest.mark.parametrize("system", ALL_SYSTEMS,
                             ids=lambda s: s.describe())
    def test_batch_matches_single(self, system):
        rng = np.random.default_rng(1)
        pts = np.stack([_random_point(system, rng) for _ in range(4)])
        u_batch = system.energy(pts)
        g_batch = system.grad(pts)
        for i in range(4):
            assert u_batch[i] == system.energy(pts[i])
            np.testing.assert_array_equal(g_batch[i], system.grad(pts[i]))

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ShapeError):
            GaussianSystem([0.0], [1.0]).energy(np.zeros(3))


class TestGaussian:
    def test_standard_normal_energy_at_origin(self):
        assert GaussianSystem([0.0], [1.0]).energy(np.zeros(1)) == 0.0

    def test_gradient_is_x(self):
        sys1 = GaussianSystem([0.0, 0.0], [1.0, 1.0])
        x = np.array([0.3, -2.0])
        np.testing.assert_allclose(sys1.grad(x), x)

    def test_log_partition_1d(self):
        assert math.isclose(GaussianSystem([0.0], [1.0]).log_partition(),
                            0.5 * math.log(2 * math.pi))

    def test_delta_f_closed_form(self):
        za = GaussianSystem([0.0], [1.0]).log_partition()
        zb = GaussianSystem([0.0], [4.0]).log_partition()
        assert math.isclose(-(zb - za), -math.log(2.0))


class TestGmm:
    def test_normalized_f_zero(self):
        assert GmmSystem.random(3, 8, 0.3, seed=1).log_partition() == 0.0

    @pytest.mark.parametrize("dim", [1, 2])
    def test_density_integrates_to_one(self, dim):
        system = GmmSystem.random(dim, 5, 0.35, seed=4)
        lo, hi, n = -3.5, 3.5, 351
        xs = np.linspace(lo, hi, n)
        if dim == 1:
            dens = np.exp(-system.energy(xs[:, None]))
            total = np.trapezoid(dens, xs)
        else:
            xx, yy = np.meshgrid(xs, xs)
            pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
            dens = np.exp(-system.energy(pts)).reshape(n, n)
            total = np.trapezoid(np.trapezoid(dens, xs, axis=1), xs)
        assert abs(total - 1.0) <= 1e-4

    def test_construction_seeded(self):
        a = GmmSystem.random(4, 6, 0.2, seed=9)
        b = GmmSystem.random(4, 6, 0.2, seed=9)
        np.testing.assert_array_equal(a.means, b.means)


class TestLjCluster:
    def test_pair_energy_zero_at_unit_distance(self):
        system = LjClusterSystem(2)
        x = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        centered = x.reshape(2, 3) - x.reshape(2, 3).mean(axis=0)
        trap = 0.5 * np.sum(centered**2)
        assert math.isclose(system.energy(x), trap)

    def test_permutation_invariance(self):
        system = LjClusterSystem(4)
        x = system.lattice_start(seed=3).reshape(4, 3)
        perm = x[[2, 0, 3, 1]]
        assert math.isclose(system.energy(x.ravel()),
                            system.energy(perm.ravel()), rel_tol=1e-12)

    def test_rotation_invariance(self):
        system = LjClusterSystem(4)
        x = system.lattice_start(seed=5).reshape(4, 3)
        theta = 0.73
        rot = np.array([
            [math.cos(theta), -math.sin(theta), 0.0],
            [math.sin(theta), math.cos(theta), 0.0],
            [0.0, 0.0, 1.0],
        ])
        rotated = x @ rot.T
        assert math.isclose(system.energy(x.ravel()),
                            system.energy(rotated.ravel()), rel_tol=1e-10)

    def test_translation_invariance(self):
        system = LjClusterSystem(3)
        x = system.lattice_start(seed=7)
        shifted = (x.reshape(3, 3) + np.array([1.0, -2.0, 0.5])).ravel()
        assert math.isclose(system.energy(x), system.energy(shifted),
                            rel_tol=1e-10)


class TestPhi4:
    def test_zero_field_zero_energy(self):
        system = Phi4System(4)
        assert system.energy(np.zeros(16)) == 0.0

    def test_zero_field_zero_gradient(self):
        system = Phi4System(4)
        np.testing.assert_array_equal(system.grad(np.zeros(16)), np.zeros(16))

    def test_flip_symmetry_without_umbrella(self):
        system = Phi4System(5)
        rng = np.random.default_rng(2)
        x = rng.standard_normal(25)
        assert system.energy(x) == system.energy(-x)

    def test_umbrella_breaks_flip_symmetry(self):
        system = Phi4System(4, umbrella_k=10.0, umbrella_mu=-0.3)
        x = np.full(16, 0.5)
        assert system.energy(x) != system.energy(-x)

    def test_umbrella_adds_quadratic_restraint(self):
        base = Phi4System(4)
        biased = Phi4System(4, umbrella_k=10.0, umbrella_mu=-0.3)
        rng = np.random.default_rng(6)
        x = rng.standard_normal(16)
        mag = x.mean()
        expected = base.energy(x) + 5.0 * (mag + 0.3) ** 2
        assert math.isclose(biased.energy(x), expected, rel_tol=1e-12)

    def test_translation_symmetry_on_lattice(self):
        # periodic neighbors: rolling the field leaves the energy unchanged
        system = Phi4System(4)
        rng = np.random.default_rng(8)
        phi = rng.standard_normal((4, 4))
        rolled = np.roll(phi, 2, axis=0)
        assert math.isclose(system.energy(phi.ravel()),
                            system.energy(rolled.ravel()), rel_tol=1e-12)


class TestInterpolatedEnergy:
    def setup_method(self):
        self.sys_a = GaussianSystem([0.0], [1.0])
        self.sys_b = GaussianSystem([0.0], [4.0])

    def test_endpoint_t0(self):
        x = np.array([0.7])
        blend = interpolated_energy(self.sys_a, self.sys_b, x, 0.0)
        assert blend.value == self.sys_a.energy(x)
        assert math.isclose(blend.dt,
                            self.sys_b.energy(x) - self.sys_a.energy(x))

    def test_endpoint_t1(self):
        x = np.array([-1.3])
        blend = interpolated_energy(self.sys_a, self.sys_b, x, 1.0)
        assert blend.value == self.sys_b.energy(x)

    def test_midpoint_hand_value(self):
        blend = interpolated_energy(self.sys_a, self.sys_b, np.array([1.0]), 0.5)
        assert math.isclose(blend.value, 0.5 * 0.5 + 0.5 * 0.125)

    def test_blend_system_agrees(self):
        x = np.array([0.4])
        blend = interpolated_energy(self.sys_a, self.sys_b, x, 0.3)
        frozen = BlendSystem(self.sys_a, self.sys_b, 0.3)
        assert math.isclose(frozen.energy(x), blend.value)
        np.testing.assert_allclose(frozen.grad(x), blend.grad)


class TestScaledSystem:
    def test_delta_f_preserved_under_common_scale(self):
        sys_a, sys_b = GaussianSystem([0.0], [1.0]), GaussianSystem([0.0], [4.0])
        raw = sys_b.log_partition() - sys_a.log_partition()
        wrapped = (ScaledSystem(sys_b, 20.0).log_partition()
                   - ScaledSystem(sys_a, 20.0).log_partition())
        assert math.isclose(raw, wrapped)

    def test_no_closed_form_propagates(self):
        assert log_partition_analytic(
            ScaledSystem(DoubleWellSystem(1), 2.0)) is None


class TestLogPartition:
    def test_unavailable_kinds_return_none(self):
        assert log_partition_analytic(DoubleWellSystem(1)) is None
        assert log_partition_analytic(LjClusterSystem(3)) is None
        assert log_partition_analytic(Phi4System(4)) is None
