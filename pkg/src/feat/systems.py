"""Closed-form energy systems with analytic gradients.

Each system evaluates an energy U(x) on R^d (thermal factor fixed to 1,
so densities are proportional to exp(-U)), exposes the exact gradient,
and, where a closed form exists, the log normalizing integral. Systems
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ShapeError


def _check_dim(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ShapeError(f"expected point of dim {dim}, got {x.shape[0]}")
        return x, True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ShapeError(f"expected batch of dim {dim}, got {x.shape[1]}")
        return x, False
    raise ShapeError("points must be 1-D or 2-D arrays")


class EnergySystem:
    """Base class; subclasses fill in vectorized `_energy` / `_grad`.

    Both accept an (n, d) batch and return (n,) / (n, d).
    """

    kind = "base"

    def __init__(self, dim):
        self.dim = int(dim)

    def energy(self, x):
        x, single = _check_dim(x, self.dim)
        u = self._energy(np.atleast_2d(x))
        return float(u[0]) if single else u

    def grad(self, x):
        x, single = _check_dim(x, self.dim)
        g = self._grad(np.atleast_2d(x))
        return g[0] if single else g

    def log_partition(self):
        """Exact log of the normalizing integral, or None."""
        return None

    def describe(self):
        return f"{self.kind}(d={self.dim})"


class GaussianSystem(EnergySystem):
    """Diagonal Gaussian well: U(x) = sum (x_i - mu_i)^2 / (2 var_i)."""

    kind = "gaussian"

    def __init__(self, mean, var):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        var = np.atleast_1d(np.asarray(var, dtype=np.float64))
        if mean.shape != var.shape:
            raise ShapeError("mean and var must have matching shapes")
        if np.any(var <= 0):
            raise ShapeError("variances must be positive")
        super().__init__(mean.shape[0])
        self.mean = mean
        self.var = var

    def _energy(self, x):
        z = x - self.mean
        return 0.5 * np.sum(z * z / self.var, axis=1)

    def _grad(self, x):
        return (x - self.mean) / self.var

    def log_partition(self):
        return float(np.sum(0.5 * math.log(2.0 * math.pi) + 0.5 * np.log(self.var)))

    def sample_exact(self, n, rng):
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.dim))


class GmmSystem(EnergySystem):
    """Uniformly weighted isotropic Gaussian mixture, U = -log density.

    Built as a normalized density, so the log partition is exactly zero.
    """

    kind = "gmm"

    def __init__(self, means, std):
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        if std <= 0:
            raise ShapeError("component std must be positive")
        super().__init__(means.shape[1])
        self.means = means
        self.std = float(std)

    @classmethod
    def random(cls, dim, components, std, seed, box=2.0):
        """Means drawn uniformly on [-box, box]^dim from the given seed."""
        rng = np.random.default_rng(seed)
        means = rng.uniform(-box, box, size=(components, dim))
        return cls(means, std)

    @property
    def components(self):
        return self.means.shape[0]

    def _log_component_densities(self, x):
        # (n, K) log of each component density including its normalizer
        diff = x[:, None, :] - self.means[None, :, :]
        sq = np.sum(diff * diff, axis=2)
        log_norm = -0.5 * self.dim * math.log(2.0 * math.pi * self.std**2)
        return log_norm - 0.5 * sq / self.std**2

    def _energy(self, x):
        comp = self._log_component_densities(x)
        return -(logsumexp(comp, axis=1) - math.log(self.components))

    def _grad(self, x):
        comp = self._log_component_densities(x)
        w = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))
        centered = x[:, None, :] - self.means[None, :, :]
        return np.sum(w[:, :, None] * centered, axis=1) / self.std**2

    def log_partition(self):
        return 0.0

    def sample_exact(self, n, rng):
        idx = rng.integers(0, self.components, size=n)
        return self.means[idx] + self.std * rng.standard_normal((n, self.dim))


class DoubleWellSystem(EnergySystem):
    """Separable quartic double well: U(x) = h * sum (x_i^2 - 1)^2."""

    kind = "doublewell"

    def __init__(self, dim=1, barrier=2.0):
        super().__init__(dim)
        self.barrier = float(barrier)

    def _energy(self, x):
        return self.barrier * np.sum((x * x - 1.0) ** 2, axis=1)

    def _grad(self, x):
        return self.barrier * 4.0 * x * (x * x - 1.0)


class LjClusterSystem(EnergySystem):
    """Pairwise 12-6 cluster in a harmonic trap on centered coordinates.

    The pair sum runs over ordered pairs (i != j), i.e. each unordered
    pair is counted twice; the trap is (1/2) sum_n |x_n - mean(x)|^2 and
    is therefore translation invariant.
    """

    kind = "lj-cluster"

    def __init__(self, n_particles, epsilon=1.0, sigma=1.0):
        super().__init__(3 * int(n_particles))
        self.n_particles = int(n_particles)
        self.epsilon = float(epsilon)
        self.sigma = float(sigma)

    def _pair_terms(self, pts):
        # pts: (n, N, 3); returns r (n, P) over unordered pairs and unit diffs
        i, j = np.triu_indices(self.n_particles, k=1)
        diff = pts[:, i, :] - pts[:, j, :]
        r = np.sqrt(np.sum(diff * diff, axis=2))
        return i, j, diff, r

    def _energy(self, x):
        pts = x.reshape(-1, self.n_particles, 3)
        _, _, _, r = self._pair_terms(pts)
        sr6 = (self.sigma / r) ** 6
        pair = 2.0 * np.sum(4.0 * self.epsilon * (sr6 * sr6 - sr6), axis=1)
        centered = pts - pts.mean(axis=1, keepdims=True)
        trap = 0.5 * np.sum(centered * centered, axis=(1, 2))
        return pair + trap

    def _grad(self, x):
        pts = x.reshape(-1, self.n_particles, 3)
        i, j, diff, r = self._pair_terms(pts)
        sr6 = (self.sigma / r) ** 6
        # d/dr of the ordered-pair energy 8 eps (sr12 - sr6)
        dudr = 8.0 * self.epsilon * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r
        f = (dudr / r)[:, :, None] * diff
        grad = np.zeros_like(pts)
        np.add.at(grad, (slice(None), i), f)
        np.add.at(grad, (slice(None), j), -f)
        grad += pts - pts.mean(axis=1, keepdims=True)
        return grad.reshape(x.shape)

    def lattice_start(self, jitter=0.05, seed=0):
        """Jittered cubic lattice, safe from the r -> 0 singularity."""
        side = math.ceil(self.n_particles ** (1.0 / 3.0))
        grid = np.stack(
            np.meshgrid(*([np.arange(side)] * 3), indexing="ij"), axis=-1
        ).reshape(-1, 3)[: self.n_particles]
        pts = (grid - grid.mean(axis=0)) * (1.1 * self.sigma)
        rng = np.random.default_rng(seed)
        pts = pts + jitter * rng.standard_normal(pts.shape)
        return pts.reshape(-1)


class Phi4System(EnergySystem):
    """Scalar lattice field on an L x L periodic grid.

    U = sum_x ( -2 phi_x (phi_right + phi_down) + (4 + m2) phi_x^2
                + lam phi_x^4 )
    counts each nearest-neighbor bond once. An optional harmonic
    restraint with strength k and center mu acts on the mean field value.
    """

    kind = "phi4"

    def __init__(self, side, m2=-1.0, lam=0.8, umbrella_k=None, umbrella_mu=0.0):
        super().__init__(int(side) ** 2)
        self.side = int(side)
        self.m2 = float(m2)
        self.lam = float(lam)
        self.umbrella_k = None if umbrella_k is None else float(umbrella_k)
        self.umbrella_mu = float(umbrella_mu)

    def _fields(self, x):
        return x.reshape(-1, self.side, self.side)

    def _energy(self, x):
        phi = self._fields(x)
        nbr = np.roll(phi, -1, axis=1) + np.roll(phi, -1, axis=2)
        u = np.sum(
            -2.0 * phi * nbr + (4.0 + self.m2) * phi**2 + self.lam * phi**4,
            axis=(1, 2),
        )
        if self.umbrella_k is not None:
            mag = phi.mean(axis=(1, 2))
            u = u + 0.5 * self.umbrella_k * (mag - self.umbrella_mu) ** 2
        return u

    def _grad(self, x):
        phi = self._fields(x)
        all_nbr = (
            np.roll(phi, -1, axis=1)
            + np.roll(phi, 1, axis=1)
            + np.roll(phi, -1, axis=2)
            + np.roll(phi, 1, axis=2)
        )
        g = -2.0 * all_nbr + 2.0 * (4.0 + self.m2) * phi + 4.0 * self.lam * phi**3
        if self.umbrella_k is not None:
            mag = phi.mean(axis=(1, 2))
            g = g + (
                self.umbrella_k * (mag - self.umbrella_mu) / self.dim
            )[:, None, None]
        return g.reshape(x.shape)

    def magnetization(self, x):
        x, single = _check_dim(x, self.dim)
        m = np.atleast_2d(x).mean(axis=1)
        return float(m[0]) if single else m


class UmbrellaSystem(EnergySystem):
    """Base system plus (k/2) (mean(x) - center)^2 on the coordinate mean."""

    kind = "umbrella"

    def __init__(self, base: EnergySystem, k, center):
        super().__init__(base.dim)
        self.base = base
        self.k = float(k)
        self.center = float(center)

    def _energy(self, x):
        m = x.mean(axis=1)
        return self.base._energy(x) + 0.5 * self.k * (m - self.center) ** 2

    def _grad(self, x):
        m = x.mean(axis=1)
        return self.base._grad(x) + (self.k * (m - self.center) / self.dim)[:, None]


class ScaledSystem(EnergySystem):
    """Input rescaling wrapper: U(x) = base(x / scale).

    Changes only the input scale and the gradients; the difference of log
    partitions between two systems wrapped with the same scale is
    unchanged.
    """

    kind = "scaled"

    def __init__(self, base: EnergySystem, scale):
        super().__init__(base.dim)
        self.base = base
        self.scale = float(scale)

    def _energy(self, x):
        return self.base._energy(x / self.scale)

    def _grad(self, x):
        return self.base._grad(x / self.scale) / self.scale

    def log_partition(self):
        inner = self.base.log_partition()
        if inner is None:
            return None
        return inner + self.dim * math.log(self.scale)


class BlendSystem(EnergySystem):
    """Linear blend (1 - t) U_a + t U_b frozen at one t, usable as a
    sampling target for quadrature over intermediate systems."""

    kind = "blend"

    def __init__(self, sys_a: EnergySystem, sys_b: EnergySystem, t):
        if sys_a.dim != sys_b.dim:
            raise ShapeError("systems must share a dimension")
        super().__init__(sys_a.dim)
        self.sys_a = sys_a
        self.sys_b = sys_b
        self.t = float(t)

    def _energy(self, x):
        return (1.0 - self.t) * self.sys_a._energy(x) + self.t * self.sys_b._energy(x)

    def _grad(self, x):
        return (1.0 - self.t) * self.sys_a._grad(x) + self.t * self.sys_b._grad(x)


@dataclass(frozen=True)
class InterpolatedEnergy:
    """Linear-in-t blend of two energies evaluated at one point."""

    value: float | np.ndarray
    dt: float | np.ndarray
    grad: np.ndarray


def interpolated_energy(sys_a: EnergySystem, sys_b: EnergySystem, x, t):
    """U_t = (1-t) U_a + t U_b along with its t-derivative and gradient."""
    if sys_a.dim != sys_b.dim:
        raise ShapeError("systems must share a dimension")
    if not 0.0 <= t <= 1.0:
        raise ShapeError(f"t must lie in [0, 1], got {t}")
    ua, ub = sys_a.energy(x), sys_b.energy(x)
    ga, gb = sys_a.grad(x), sys_b.grad(x)
    return InterpolatedEnergy(
        value=(1.0 - t) * ua + t * ub,
        dt=ub - ua,
        grad=(1.0 - t) * ga + t * gb,
    )


def log_partition_analytic(sys: EnergySystem):
    """Exact -F where available; None marks kinds without a closed form."""
    return sys.log_partition()
