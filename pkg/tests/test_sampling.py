"""Chain correctness (moments, detailed balance, adaptation) and the
sample-file round trip."""

import numpy as np
import pytest

from feat.errors import NumericsError, ParseError, ShapeError
from feat.sampling import (
    MalaConfig,
    SampleSet,
    exact_samples,
    log_accept_ratio,
    mala_chain,
    read_samples,
    write_samples,
)
from feat.systems import DoubleWellSystem, GaussianSystem, GmmSystem


def _tv_to_quadrature(system, samples, lo, hi, bins=60):
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(samples, bins=edges)
    p_emp = counts / counts.sum()
    xs = np.linspace(lo, hi, 4001)
    dens = np.exp(-system.energy(xs[:, None]))
    p_ref = np.empty(bins)
    for i in range(bins):
        mask = (xs >= edges[i]) & (xs <= edges[i + 1])
        p_ref[i] = np.trapezoid(dens[mask], xs[mask])
    p_ref /= p_ref.sum()
    return 0.5 * np.abs(p_emp - p_ref).sum()


class TestAcceptance:
    def test_stationary_proposal_has_unit_acceptance(self):
        # zero gradient at the point and proposal equal to the current
        # state: the ratio degenerates to exactly one
        system = GaussianSystem([0.0], [1.0])
        x = np.zeros(1)
        assert log_accept_ratio(system, x, x.copy(), 0.3) == 0.0

    def test_ratio_bounded_above_by_one(self):
        system = DoubleWellSystem(1, 2.0)
        rng = np.random.default_rng(0)
        for _ in range(200):
            x = rng.standard_normal(1)
            y = x + 0.5 * rng.standard_normal(1)
            log_alpha = log_accept_ratio(system, x, y, 0.1)
            assert min(log_alpha, 0.0) <= 0.0

    def test_non_finite_proposal_rejected(self):
        system = GaussianSystem([0.0], [1.0])
        assert log_accept_ratio(system, np.zeros(1), np.array([np.inf]),
                                0.1) == -np.inf


class TestMalaChain:
    def test_gaussian_moments(self):
        system = GaussianSystem([0.0], [1.0])
        cfg = MalaConfig(steps=100_000, burn_in_fraction=0.2, step_size=0.5,
                         seed=7)
        out = mala_chain(system, cfg, np.zeros(1))
        n_eff = len(out)
        mean = out.samples.mean()
        std = out.samples.std()
        assert abs(mean) <= 3.0 * std / np.sqrt(n_eff) * 10  # correlated chain
        assert abs(out.samples.var() - 1.0) <= 0.1

    def test_histogram_close_to_quadrature(self):
        system = GaussianSystem([0.0], [1.0])
        cfg = MalaConfig(steps=63_000, step_size=0.5, seed=8)
        out = mala_chain(system, cfg, np.zeros(1))
        assert len(out) >= 50_000
        assert _tv_to_quadrature(system, out.samples[:, 0], -4, 4) <= 0.05

    def test_double_well_histogram(self):
        system = DoubleWellSystem(1, 2.0)
        cfg = MalaConfig(steps=63_000, step_size=0.3, seed=9)
        out = mala_chain(system, cfg, np.array([1.0]))
        assert _tv_to_quadrature(system, out.samples[:, 0], -2.2, 2.2) <= 0.05

    def test_acceptance_rate_near_target(self):
        # the multiplicative rule moves the step by at most e^0.04 per
        # window, so give burn-in enough windows to settle
        system = GaussianSystem([0.0, 0.0], [1.0, 3.0])
        cfg = MalaConfig(steps=60_000, step_size=0.05, target_accept=0.6,
                         seed=10)
        out = mala_chain(system, cfg, np.zeros(2))
        assert abs(out.meta["accept_rate"] - 0.6) <= 0.1

    def test_deterministic_for_fixed_seed(self):
        system = DoubleWellSystem(1, 2.0)
        cfg = MalaConfig(steps=4000, seed=3)
        a = mala_chain(system, cfg, np.array([1.0]))
        b = mala_chain(system, cfg, np.array([1.0]))
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.grads, b.grads)

    def test_gradients_attached(self):
        system = GaussianSystem([0.0], [2.0])
        out = mala_chain(system, MalaConfig(steps=2000, seed=1), np.zeros(1))
        np.testing.assert_allclose(out.grads, system.grad(out.samples))

    def test_non_finite_start_rejected(self):
        system = DoubleWellSystem(1)
        with pytest.raises(NumericsError):
            mala_chain(system, MalaConfig(steps=10, seed=0),
                       np.array([np.inf]))

    def test_thinning(self):
        system = GaussianSystem([0.0], [1.0])
        cfg = MalaConfig(steps=10_000, burn_in_fraction=0.2, thin=5, seed=2)
        out = mala_chain(system, cfg, np.zeros(1))
        assert len(out) == 1600

    def test_config_validation(self):
        with pytest.raises(ShapeError):
            MalaConfig(burn_in_fraction=1.0)
        with pytest.raises(ShapeError):
            MalaConfig(step_size=0.0)


class TestExactSampling:
    def test_gaussian_moments(self):
        system = GaussianSystem([1.0, -2.0], [4.0, 0.25])
        out = exact_samples(system, 50_000, seed=0)
        np.testing.assert_allclose(out.samples.mean(axis=0), [1.0, -2.0],
                                   atol=0.05)
        np.testing.assert_allclose(out.samples.var(axis=0), [4.0, 0.25],
                                   rtol=0.05)

    def test_mixture_covers_modes(self):
        system = GmmSystem.random(2, 3, 0.1, seed=5)
        out = exact_samples(system, 3000, seed=1)
        # every component mean has nearby samples
        for mu in system.means:
            dist = np.linalg.norm(out.samples - mu, axis=1).min()
            assert dist < 0.5

    def test_unsupported_kind(self):
        with pytest.raises(ShapeError):
            exact_samples(DoubleWellSystem(1), 10, seed=0)


class TestSampleFiles:
    def test_empty_set_round_trip(self, tmp_path):
        path = tmp_path / "s.txt"
        write_samples(path, SampleSet(dim=3, samples=np.zeros((0, 3))))
        loaded = read_samples(path)
        assert len(loaded) == 0 and loaded.dim == 3

    def test_format_field_counts(self, tmp_path):
        path = tmp_path / "s.txt"
        sset = SampleSet(dim=3, samples=np.arange(6.0).reshape(2, 3),
                         grads=np.ones((2, 3)))
        write_samples(path, sset)
        lines = path.read_text().splitlines()
        assert lines[0] == "feat-samples v1 dim=3 n=2 grads=1"
        assert len(lines) == 3
        assert all(len(line.split()) == 6 for line in lines[1:])

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(11)
        sset = SampleSet(dim=8, samples=rng.standard_normal((100, 8)),
                         grads=rng.standard_normal((100, 8)))
        path = tmp_path / "s.txt"
        write_samples(path, sset)
        loaded = read_samples(path)
        np.testing.assert_array_equal(loaded.samples, sset.samples)
        np.testing.assert_array_equal(loaded.grads, sset.grads)

    def test_count_mismatch_names_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("feat-samples v1 dim=2 n=2 grads=0\n0.0 1.0\n")
        with pytest.raises(ParseError):
            read_samples(path)

    def test_non_finite_value_names_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("feat-samples v1 dim=1 n=1 grads=0\nnan\n")
        with pytest.raises(ParseError, match="line 2"):
            read_samples(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("something else\n")
        with pytest.raises(ParseError, match="line 1"):
            read_samples(path)
