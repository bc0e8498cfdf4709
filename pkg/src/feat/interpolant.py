"""Interpolant schedules, training losses, and the transport trainer.

A stochastic bridge I_t = alpha_t x_a + beta_t x_b + gamma_t eps is drawn
between paired endpoint samples. Two networks are regressed on it: a
velocity field toward the time derivative of the bridge, and a score
field toward the denoising target (plus endpoint gradient targets near
t = 0 and t = 1, which supply the information the clipped time range
leaves out).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numcore as nc
from .errors import ConfigError, NumericsError, ShapeError
from .sampling import SampleSet
from .systems import EnergySystem


@dataclass(frozen=True)
class Schedule:
    """Linear bridge coefficients with a sqrt-bump noise term.

    alpha_t = 1 - t, beta_t = t, gamma_t = sqrt(a t (1 - t)). The
    boundary values pin the bridge to the endpoint samples exactly.
    """

    noise_amplitude: float = 0.05

    def alpha(self, t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    def beta(self, t):
        return np.asarray(t, dtype=np.float64) + 0.0

    def gamma(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.sqrt(self.noise_amplitude * t * (1.0 - t))

    def alpha_dot(self, t):
        return np.full_like(np.asarray(t, dtype=np.float64), -1.0)

    def beta_dot(self, t):
        return np.full_like(np.asarray(t, dtype=np.float64), 1.0)

    def gamma_dot(self, t):
        t = np.asarray(t, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.noise_amplitude * (1.0 - 2.0 * t) / (2.0 * self.gamma(t))

    def gamma_cross(self, t):
        """gamma_t * d/dt gamma_t, finite on all of [0, 1]."""
        t = np.asarray(t, dtype=np.float64)
        return 0.5 * self.noise_amplitude * (1.0 - 2.0 * t)

    def velocity_weight(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))

    def score_weight(self, t):
        return self.gamma(t)


class VectorField:
    """Field on (x, t); subclasses may provide an exact divergence."""

    def __call__(self, x, t):
        raise NotImplementedError

    def divergence(self, x, t, probes=None, seed=0):
        raise NotImplementedError


class ZeroField(VectorField):
    def __init__(self, dim):
        self.dim = dim

    def __call__(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def divergence(self, x, t, probes=None, seed=0):
        x = np.asarray(x)
        return 0.0 if x.ndim == 1 else np.zeros(x.shape[0])


class MlpField(VectorField):
    """Network-backed field; divergence via exact coordinate probes for
    small dimension, else a seeded Hutchinson trace estimate."""

    EXACT_DIVERGENCE_MAX_DIM = 32

    def __init__(self, net: nc.Mlp):
        self.net = net
        self.dim = net.dim

    def __call__(self, x, t):
        return self.net.forward(x, t)

    def divergence(self, x, t, probes=None, seed=0):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xs = np.atleast_2d(x)
        if self.dim <= self.EXACT_DIVERGENCE_MAX_DIM and probes is None:
            div = np.zeros(xs.shape[0])
            for i in range(self.dim):
                e = np.zeros(self.dim)
                e[i] = 1.0
                div += self.net.jvp(xs, t, e)[:, i]
        else:
            n_probes = probes or 16
            rng = np.random.default_rng(seed)
            div = np.zeros(xs.shape[0])
            for _ in range(n_probes):
                r = rng.choice([-1.0, 1.0], size=self.dim)
                div += np.sum(self.net.jvp(xs, t, r) * r, axis=1)
            div /= n_probes
        return float(div[0]) if single else div


@dataclass
class TransportModel:
    """Learned or analytic transport: velocity, score, schedule, noise."""

    dim: int
    velocity: VectorField
    score: VectorField
    schedule: Schedule
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ShapeError("sigma must be nonnegative")

    def with_sigma(self, sigma):
        return TransportModel(self.dim, self.velocity, self.score,
                              self.schedule, sigma)


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    t_clip: float = 1e-3
    ot_pairing: bool = False
    ot_batch: int = 256
    canonicalize: bool = False
    particles: bool = False
    warmup: int = 0
    width: int = 64
    depth: int = 2
    noise_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.t_clip < 0.5:
            raise ShapeError("t_clip must lie in (0, 0.5)")
        if self.ot_batch < self.batch_size:
            self.ot_batch = self.batch_size


@dataclass
class TrainBatch:
    """One paired minibatch; t and eps are the bridge randomness."""

    x_a: np.ndarray
    x_b: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    grads_a: np.ndarray | None = None
    grads_b: np.ndarray | None = None


def draw_interpolant(schedule: Schedule, x_a, x_b, eps, t, t_clip=0.0):
    """Bridge point and its time derivative at time(s) t.

    Returns (I_t, dI_t/dt, eps). With a positive clip, times outside
    [t_clip, 1 - t_clip] are rejected; at the exact endpoints the noise
    rate diverges, so the derivative is only meaningful strictly inside.
    """
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_a.shape != x_b.shape or x_a.shape != eps.shape:
        raise ShapeError("x_a, x_b, eps must share a shape")
    t_arr = np.asarray(t, dtype=np.float64)
    if t_clip > 0 and (np.any(t_arr < t_clip) or np.any(t_arr > 1.0 - t_clip)):
        raise ShapeError(f"t outside clipped range [{t_clip}, {1.0 - t_clip}]")
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ShapeError("t must lie in [0, 1]")

    def col(v):
        return v[:, None] if (t_arr.ndim == 1 and x_a.ndim == 2) else v

    a, b, g = col(schedule.alpha(t_arr)), col(schedule.beta(t_arr)), col(schedule.gamma(t_arr))
    point = a * x_a + b * x_b + g * eps
    with np.errstate(invalid="ignore"):
        rate = (
            col(schedule.alpha_dot(t_arr)) * x_a
            + col(schedule.beta_dot(t_arr)) * x_b
            + col(schedule.gamma_dot(t_arr)) * eps
        )
    return point, rate, eps


# ---------------------------------------------------------------------------
# losses (plain values; traced versions used by the trainer live below)
# ---------------------------------------------------------------------------


def loss_velocity(model: TransportModel, batch: TrainBatch) -> float:
    point, rate, _ = draw_interpolant(model.schedule, batch.x_a, batch.x_b,
                                      batch.eps, batch.t)
    v = model.velocity(point, batch.t)
    w = model.schedule.velocity_weight(batch.t)
    return float(np.mean(w * np.sum((v - rate) ** 2, axis=1)))


def loss_score_dsm(model: TransportModel, batch: TrainBatch) -> float:
    g = model.schedule.gamma(batch.t)
    if np.any(g <= 0.0):
        raise NumericsError("sampling-range violation: gamma_t = 0 in DSM batch")
    point, _, _ = draw_interpolant(model.schedule, batch.x_a, batch.x_b,
                                   batch.eps, batch.t)
    s = model.score(point, batch.t)
    target = batch.eps / g[:, None]
    w = model.schedule.score_weight(batch.t)
    return float(np.mean(w * np.sum((s - target) ** 2, axis=1)))


def tsm_halves(model: TransportModel, batch: TrainBatch) -> tuple[float, float]:
    """Endpoint-gradient regression, split at t = 0.5.

    Early times target grad U_a(x_a) / alpha_t, late times
    grad U_b(x_b) / beta_t; each half is averaged over its own rows.
    """
    if batch.grads_a is None or batch.grads_b is None:
        raise ConfigError("TSM loss needs precomputed endpoint gradients")
    point, _, _ = draw_interpolant(model.schedule, batch.x_a, batch.x_b,
                                   batch.eps, batch.t)
    s = model.score(point, batch.t)
    early = batch.t < 0.5
    out = []
    for mask, grads, coef in (
        (early, batch.grads_a, model.schedule.alpha(batch.t)),
        (~early, batch.grads_b, model.schedule.beta(batch.t)),
    ):
        if not np.any(mask):
            out.append(0.0)
            continue
        target = grads[mask] / coef[mask][:, None]
        out.append(float(np.mean(np.sum((s[mask] - target) ** 2, axis=1))))
    return out[0], out[1]


def loss_score_tsm(model: TransportModel, batch: TrainBatch) -> float:
    lo, hi = tsm_halves(model, batch)
    return lo + hi


def minibatch_ot_pairs(x_a, x_b) -> np.ndarray:
    """Permutation pi minimizing sum_i |x_a[i] - x_b[pi[i]]|^2 exactly."""
    x_a = np.atleast_2d(np.asarray(x_a, dtype=np.float64))
    x_b = np.atleast_2d(np.asarray(x_b, dtype=np.float64))
    if x_a.shape != x_b.shape:
        raise ShapeError("OT pairing needs equal batch shapes")
    sq_a = np.sum(x_a * x_a, axis=1)[:, None]
    sq_b = np.sum(x_b * x_b, axis=1)[None, :]
    cost = np.maximum(sq_a + sq_b - 2.0 * x_a @ x_b.T, 0.0)
    _, col = linear_sum_assignment(cost)
    return col


# ---------------------------------------------------------------------------
# point-cloud canonicalization
# ---------------------------------------------------------------------------


def kabsch_rotation(points, reference):
    """Proper rotation (det +1) minimizing RMSD of points onto reference.

    Both inputs are centered (N, 3) clouds. A collinear cloud leaves the
    rotation underdetermined; that case falls back to the identity with a
    warning.
    """
    h = points.T @ reference
    u, s, vh = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        warnings.warn("degenerate covariance in alignment; using identity")
        return np.eye(3)
    d = np.sign(np.linalg.det(u @ vh))
    flip = np.diag([1.0, 1.0, d])
    return (u @ flip @ vh).T


def canonicalize(sset: SampleSet, reference, particles=False) -> SampleSet:
    """Center each sample and rotate it onto the reference cloud.

    With ``particles`` set, particle rows are first permuted by the
    minimum-cost assignment to the reference. Stored gradients receive
    the same permutation and rotation, which is exact for energies that
    are invariant under those motions.
    """
    if sset.dim % 3 != 0:
        raise ShapeError("canonicalization expects 3-D point-cloud layout")
    n_particles = sset.dim // 3
    ref = np.asarray(reference, dtype=np.float64).reshape(n_particles, 3)
    ref = ref - ref.mean(axis=0)
    out_x = np.empty_like(sset.samples)
    has_grads = sset.grads is not None and sset.grads.size
    out_g = np.empty_like(sset.grads) if has_grads else None
    for n in range(len(sset)):
        pts = sset.samples[n].reshape(n_particles, 3)
        pts = pts - pts.mean(axis=0)
        g = sset.grads[n].reshape(n_particles, 3) if has_grads else None
        if particles:
            cost = (
                np.sum(pts * pts, axis=1)[:, None]
                + np.sum(ref * ref, axis=1)[None, :]
                - 2.0 * pts @ ref.T
            )
            _, col = linear_sum_assignment(cost)
            perm = np.empty(n_particles, dtype=int)
            perm[col] = np.arange(n_particles)
            pts = pts[perm]
            if g is not None:
                g = g[perm]
        rot = kabsch_rotation(pts, ref)
        out_x[n] = (pts @ rot.T).reshape(-1)
        if g is not None:
            out_g[n] = (g @ rot.T).reshape(-1)
    meta = dict(sset.meta)
    meta["canonicalized"] = True
    return SampleSet(dim=sset.dim, samples=out_x, grads=out_g, meta=meta)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TransportModel
    trace: np.ndarray  # columns: iter, loss_v, loss_dsm, loss_tsm0, loss_tsm1
    velocity_net: nc.Mlp = None
    score_net: nc.Mlp = None


def _velocity_loss_node(net, param_nodes, feats, rate, weights):
    out = net.traced_forward(feats, param_nodes)
    sq = nc.square(nc.sub(out, nc.leaf(rate)))
    weighted = nc.mul(sq, nc.leaf(weights[:, None]))
    return nc.scale(nc.sum_all(weighted), 1.0 / feats.shape[0])


def _score_loss_nodes(net, param_nodes, feats, batch, schedule):
    """DSM plus both endpoint-target halves off one traced forward."""
    n = feats.shape[0]
    out = net.traced_forward(feats, param_nodes)
    g = schedule.gamma(batch.t)
    dsm_sq = nc.square(nc.sub(out, nc.leaf(batch.eps / g[:, None])))
    dsm = nc.scale(nc.sum_all(nc.mul(dsm_sq, nc.leaf(g[:, None]))), 1.0 / n)

    early = batch.t < 0.5
    alpha = schedule.alpha(batch.t)
    beta = schedule.beta(batch.t)
    target = np.where(
        early[:, None], batch.grads_a / alpha[:, None], batch.grads_b / beta[:, None]
    )
    tsm_sq = nc.square(nc.sub(out, nc.leaf(target)))
    halves = []
    for mask in (early, ~early):
        count = int(mask.sum())
        if count == 0:
            halves.append(nc.leaf(0.0))
            continue
        sel = nc.mul(tsm_sq, nc.leaf(mask[:, None].astype(np.float64)))
        halves.append(nc.scale(nc.sum_all(sel), 1.0 / count))
    return dsm, halves[0], halves[1]


def _draw_pair_indices(rng, n_a, n_b, x_a, x_b, cfg: TrainConfig):
    k = cfg.ot_batch if cfg.ot_pairing else cfg.batch_size
    ia = rng.integers(0, n_a, size=k)
    ib = rng.integers(0, n_b, size=k)
    if cfg.ot_pairing:
        perm = minibatch_ot_pairs(x_a[ia], x_b[ib])
        ib = ib[perm]
        if k > cfg.batch_size:
            keep = rng.choice(k, size=cfg.batch_size, replace=False)
            ia, ib = ia[keep], ib[keep]
    return ia, ib


def train_transport(cfg: TrainConfig, set_a: SampleSet, set_b: SampleSet,
                    systems: tuple[EnergySystem, EnergySystem] | None = None,
                    ) -> TrainResult:
    """Fit velocity and score networks on endpoint samples.

    Runs a velocity-only warmup for ``cfg.warmup`` iterations, then joint
    updates: the score on the denoising loss plus both endpoint-target
    halves, the velocity on its regression loss. Missing endpoint
    gradients are computed from ``systems`` when given.
    """
    if len(set_a) == 0 or len(set_b) == 0:
        raise ConfigError("both sample sets must be non-empty")
    if set_a.dim != set_b.dim:
        raise ShapeError("sample sets must share a dimension")
    dim = set_a.dim

    if cfg.canonicalize:
        reference = set_a.samples[0]
        set_a = canonicalize(set_a, reference, particles=cfg.particles)
        set_b = canonicalize(set_b, reference, particles=cfg.particles)

    grads_a, grads_b = set_a.grads, set_b.grads
    if systems is not None:
        sys_a, sys_b = systems
        if grads_a is None or not grads_a.size:
            grads_a = sys_a.grad(set_a.samples)
        if grads_b is None or not grads_b.size:
            grads_b = sys_b.grad(set_b.samples)
    if grads_a is None or not grads_a.size or grads_b is None or not grads_b.size:
        raise ConfigError("endpoint gradients unavailable; provide systems "
                          "or sample sets with stored gradients")

    schedule = Schedule(noise_amplitude=cfg.noise_amplitude)
    hidden = [cfg.width] * cfg.depth
    rng = np.random.default_rng(cfg.seed)
    v_net = nc.build_mlp(dim, hidden, seed=int(rng.integers(2**31)))
    s_net = nc.build_mlp(dim, hidden, seed=int(rng.integers(2**31)))
    v_adam = nc.AdamState.for_params(v_net.params(), lr=cfg.learning_rate)
    s_adam = nc.AdamState.for_params(s_net.params(), lr=cfg.learning_rate)

    x_a, x_b = set_a.samples, set_b.samples
    trace = np.zeros((cfg.iterations, 5))

    for it in range(cfg.iterations):
        ia, ib = _draw_pair_indices(rng, len(set_a), len(set_b), x_a, x_b, cfg)
        batch = TrainBatch(
            x_a=x_a[ia], x_b=x_b[ib],
            eps=rng.standard_normal((cfg.batch_size, dim)),
            t=rng.uniform(cfg.t_clip, 1.0 - cfg.t_clip, size=cfg.batch_size),
            grads_a=grads_a[ia], grads_b=grads_b[ib],
        )
        point, rate, _ = draw_interpolant(schedule, batch.x_a, batch.x_b,
                                          batch.eps, batch.t, cfg.t_clip)
        feats = np.concatenate([point, nc.time_features(batch.t)], axis=1)
        weights = schedule.velocity_weight(batch.t)

        v_params = v_net.param_leaves()
        v_loss = _velocity_loss_node(v_net, v_params, feats, rate, weights)
        losses = [float(v_loss.value), np.nan, np.nan, np.nan]

        warmup_phase = it < cfg.warmup
        if not warmup_phase:
            s_params = s_net.param_leaves()
            dsm, tsm0, tsm1 = _score_loss_nodes(s_net, s_params, feats, batch,
                                                schedule)
            s_loss = nc.add(nc.add(dsm, tsm0), tsm1)
            losses[1:] = [float(dsm.value), float(tsm0.value), float(tsm1.value)]

        if not all(np.isfinite(v) for v in losses if not np.isnan(v)):
            raise NumericsError(f"non-finite loss at iteration {it}")

        v_net.set_params(
            nc.adam_step(v_adam, [p.value for p in v_params],
                         nc.grad_params(v_loss, v_params))
        )
        if not warmup_phase:
            s_net.set_params(
                nc.adam_step(s_adam, [p.value for p in s_params],
                             nc.grad_params(s_loss, s_params))
            )
        trace[it] = [it, *losses]

    model = TransportModel(
        dim=dim, velocity=MlpField(v_net), score=MlpField(s_net),
        schedule=schedule,
    )
    return TrainResult(model=model, trace=trace, velocity_net=v_net,
                       score_net=s_net)


def write_loss_trace(path, trace: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("iter,loss_v,loss_dsm,loss_tsm0,loss_tsm1\n")
        for row in trace:
            fh.write(
                f"{int(row[0])},{row[1]:.10g},{row[2]:.10g},"
                f"{row[3]:.10g},{row[4]:.10g}\n"
            )
