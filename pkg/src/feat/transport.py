"""Discretized controlled dynamics and path-work functionals.

Forward paths start from endpoint-a samples and drift with the learned
velocity minus the noise-scaled score; backward paths start from
endpoint-b samples and run the time reverse. Each step contributes the
log ratio of the forward and backward Gaussian transition kernels, and
the endpoint energies close the telescope. The exponential average of
the resulting path work equals the partition-function ratio for any
drift and any step count, which is what makes the whole construction
robust to imperfect learning and discretization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericsError, ParseError, ShapeError
from .interpolant import Schedule, TransportModel, VectorField
from .systems import EnergySystem, GaussianSystem, interpolated_energy

FORWARD = "forward"
BACKWARD = "backward"

# cap on floats held per noise block when simulating large ensembles
_NOISE_BLOCK_BUDGET = 2 * 10**7


@dataclass(frozen=True)
class TimeGrid:
    """Knots t_0 = 0 <= ... <= t_M = 1.

    Simulation requires strictly positive steps; the work functional
    tolerates zero-length steps (they contribute nothing), so grids with
    duplicated knots are representable.
    """

    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        object.__setattr__(self, "knots", knots)
        if knots.ndim != 1 or knots.size < 2:
            raise ShapeError("grid needs at least two knots")
        if knots[0] != 0.0 or knots[-1] != 1.0:
            raise ShapeError("grid endpoints must be exactly 0 and 1")
        if np.any(np.diff(knots) < 0.0):
            raise ShapeError("grid knots must be non-decreasing")

    @classmethod
    def uniform(cls, n_steps: int) -> "TimeGrid":
        return cls(np.linspace(0.0, 1.0, n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.knots.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.knots)

    def require_positive_steps(self):
        if np.any(self.steps <= 0.0):
            raise ShapeError("simulation requires strictly increasing knots")


@dataclass
class PathRecord:
    direction: str
    states: np.ndarray  # (M+1, d), row i at knot t_i regardless of direction
    work: float | None = None
    seed: tuple | int | None = None
    valid: bool = True


@dataclass
class WorkLedger:
    """Per-direction corrected work ensembles plus drop diagnostics."""

    forward: np.ndarray = field(default_factory=lambda: np.zeros(0))
    backward: np.ndarray = field(default_factory=lambda: np.zeros(0))
    invalid_forward: int = 0
    invalid_backward: int = 0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.forward = np.asarray(self.forward, dtype=np.float64).ravel()
        self.backward = np.asarray(self.backward, dtype=np.float64).ravel()

    @property
    def n_forward(self):
        return self.forward.size

    @property
    def n_backward(self):
        return self.backward.size

    def drop_rate(self):
        total = (self.n_forward + self.n_backward
                 + self.invalid_forward + self.invalid_backward)
        if total == 0:
            return 0.0
        return (self.invalid_forward + self.invalid_backward) / total


def _sigma_at(model: TransportModel, t: float) -> float:
    s = model.sigma
    return float(s(t)) if callable(s) else float(s)


def _gauss_rows(x, mean, var):
    """Row-wise log density of an isotropic Gaussian with scalar variance."""
    d = x.shape[1]
    sq = np.sum((x - mean) ** 2, axis=1)
    return -0.5 * d * math.log(2.0 * math.pi * var) - sq / (2.0 * var)


def step_kernel_logpdf(x_next, x_curr, drift_sign, model: TransportModel,
                       t, dt):
    """Log transition density of one Euler step conditioned at (x_curr, t).

    drift_sign +1 gives the forward kernel, -1 the backward kernel; in
    both the velocity enters with that sign while the score drift always
    points down the learned energy.
    """
    if drift_sign not in (1, -1, 1.0, -1.0):
        raise ShapeError("drift_sign must be +1 or -1")
    if dt <= 0.0:
        raise ShapeError("dt must be positive")
    sigma = _sigma_at(model, t)
    if sigma <= 0.0:
        raise NumericsError(
            "transition kernel undefined for sigma = 0; use the ODE work"
        )
    x_next = np.asarray(x_next, dtype=np.float64)
    x_curr = np.asarray(x_curr, dtype=np.float64)
    single = x_curr.ndim == 1
    xn, xc = np.atleast_2d(x_next), np.atleast_2d(x_curr)
    drift = (drift_sign * model.velocity(xc, t)
             - sigma**2 * model.score(xc, t))
    mean = xc + drift * dt
    out = _gauss_rows(xn, mean, 2.0 * sigma**2 * dt)
    return float(out[0]) if single else out


def path_noise(seed: int, path_index: int, n_steps: int, dim: int) -> np.ndarray:
    """Counter-based per-path noise block, independent of ensemble size."""
    key = np.array([int(seed) % 2**64, int(path_index) % 2**64],
                   dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal((n_steps, dim))


def simulate_path(model: TransportModel, grid: TimeGrid, direction: str,
                  x_init, seed: int, path_index: int = 0) -> PathRecord:
    """Integrate one discretized path; sigma = 0 falls back to the ODE.

    States are stored indexed by knot, so row 0 always sits at time 0
    even for backward-generated paths.
    """
    if direction not in (FORWARD, BACKWARD):
        raise ShapeError(f"direction must be forward|backward, got {direction}")
    x = np.asarray(x_init, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ShapeError(f"x_init must have shape ({model.dim},)")
    knots = grid.knots
    n = grid.n_steps
    states = np.full((n + 1, model.dim), np.nan)
    stochastic = _sigma_at(model, knots[0]) > 0.0 or callable(model.sigma)
    noise = path_noise(seed, path_index, n, model.dim) if stochastic else None

    valid = True
    if direction == FORWARD:
        states[0] = x
        for i in range(n):
            dt = knots[i + 1] - knots[i]
            if dt == 0.0:
                states[i + 1] = states[i]
                continue
            t = knots[i]
            sigma = _sigma_at(model, t)
            drift = model.velocity(states[i], t) - sigma**2 * model.score(states[i], t)
            nxt = states[i] + drift * dt
            if sigma > 0.0:
                nxt = nxt + math.sqrt(2.0 * dt) * sigma * noise[i]
            states[i + 1] = nxt
            if not np.all(np.isfinite(nxt)):
                valid = False
                break
    else:
        states[n] = x
        for i in range(n, 0, -1):
            dt = knots[i] - knots[i - 1]
            if dt == 0.0:
                states[i - 1] = states[i]
                continue
            t = knots[i]
            sigma = _sigma_at(model, t)
            drift = -model.velocity(states[i], t) - sigma**2 * model.score(states[i], t)
            prv = states[i] + drift * dt
            if sigma > 0.0:
                prv = prv + math.sqrt(2.0 * dt) * sigma * noise[i - 1]
            states[i - 1] = prv
            if not np.all(np.isfinite(prv)):
                valid = False
                break

    return PathRecord(direction=direction, states=states,
                      seed=(seed, path_index), valid=valid)


def work_fbrnd(path: PathRecord, sys_a: EnergySystem, sys_b: EnergySystem,
               model: TransportModel, grid: TimeGrid) -> float:
    """Corrected path work from the forward/backward kernel ratio.

    The same formula applies to forward- and backward-generated paths;
    only the path law differs. Zero-length steps contribute nothing.
    """
    if not path.valid or not np.all(np.isfinite(path.states)):
        raise NumericsError("work undefined on an invalid path")
    knots = grid.knots
    if path.states.shape[0] != knots.size:
        raise ShapeError("path length does not match grid")
    u_a = sys_a.energy(path.states[0])
    u_b = sys_b.energy(path.states[-1])
    if not (math.isfinite(u_a) and math.isfinite(u_b)):
        raise NumericsError("non-finite endpoint energy")
    work = u_b - u_a
    for i in range(1, knots.size):
        dt = knots[i] - knots[i - 1]
        if dt == 0.0:
            continue
        log_fwd = step_kernel_logpdf(path.states[i], path.states[i - 1], +1,
                                     model, knots[i - 1], dt)
        log_bwd = step_kernel_logpdf(path.states[i - 1], path.states[i], -1,
                                     model, knots[i], dt)
        work += log_fwd - log_bwd
    return float(work)


def transport_works(model: TransportModel, grid: TimeGrid, direction: str,
                    starts: np.ndarray, seed: int, sys_a: EnergySystem,
                    sys_b: EnergySystem) -> tuple[np.ndarray, int]:
    """Fused ensemble simulation and work accumulation.

    Returns the works of the valid paths (in path order) and the count of
    dropped non-finite paths. Path n consumes the same noise stream as
    ``simulate_path(..., seed, path_index=n)``, so results do not depend
    on how the ensemble is partitioned.
    """
    if direction not in (FORWARD, BACKWARD):
        raise ShapeError(f"direction must be forward|backward, got {direction}")
    grid.require_positive_steps()
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    if starts.shape[1] != model.dim:
        raise ShapeError("start points must match model dimension")
    n_paths = starts.shape[0]
    n_steps = grid.n_steps
    block = max(1, int(_NOISE_BLOCK_BUDGET / max(n_steps * model.dim, 1)))
    works = np.full(n_paths, np.nan)

    for lo in range(0, n_paths, block):
        hi = min(lo + block, n_paths)
        noise = np.stack(
            [path_noise(seed, n, n_steps, model.dim) for n in range(lo, hi)]
        )
        works[lo:hi] = _block_works(model, grid, direction, starts[lo:hi],
                                    noise, sys_a, sys_b)

    valid = np.isfinite(works)
    return works[valid], int(n_paths - valid.sum())


def _block_works(model, grid, direction, x0, noise, sys_a, sys_b):
    knots = grid.knots
    n_steps = grid.n_steps
    n = x0.shape[0]
    work = np.zeros(n)
    x = x0.copy()

    if direction == FORWARD:
        t = knots[0]
        v_cur, s_cur = model.velocity(x, t), model.score(x, t)
        start_energy = sys_a.energy(x)
        for i in range(n_steps):
            dt = knots[i + 1] - knots[i]
            t_cur, t_nxt = knots[i], knots[i + 1]
            sig_c, sig_n = _sigma_at(model, t_cur), _sigma_at(model, t_nxt)
            if sig_c <= 0.0 or sig_n <= 0.0:
                raise NumericsError("ensemble works need sigma > 0")
            mean_fwd = x + (v_cur - sig_c**2 * s_cur) * dt
            x_new = mean_fwd + math.sqrt(2.0 * dt) * sig_c * noise[:, i, :]
            log_fwd = _gauss_rows(x_new, mean_fwd, 2.0 * sig_c**2 * dt)
            v_nxt, s_nxt = model.velocity(x_new, t_nxt), model.score(x_new, t_nxt)
            mean_bwd = x_new - (v_nxt + sig_n**2 * s_nxt) * dt
            log_bwd = _gauss_rows(x, mean_bwd, 2.0 * sig_n**2 * dt)
            work += log_fwd - log_bwd
            x, v_cur, s_cur = x_new, v_nxt, s_nxt
        work += sys_b.energy(x) - start_energy
    else:
        t = knots[-1]
        v_cur, s_cur = model.velocity(x, t), model.score(x, t)
        end_energy = sys_b.energy(x)
        for i in range(n_steps, 0, -1):
            dt = knots[i] - knots[i - 1]
            t_cur, t_prv = knots[i], knots[i - 1]
            sig_c, sig_p = _sigma_at(model, t_cur), _sigma_at(model, t_prv)
            if sig_c <= 0.0 or sig_p <= 0.0:
                raise NumericsError("ensemble works need sigma > 0")
            mean_bwd = x - (v_cur + sig_c**2 * s_cur) * dt
            x_new = mean_bwd + math.sqrt(2.0 * dt) * sig_c * noise[:, i - 1, :]
            log_bwd = _gauss_rows(x_new, mean_bwd, 2.0 * sig_c**2 * dt)
            v_prv, s_prv = model.velocity(x_new, t_prv), model.score(x_new, t_prv)
            mean_fwd = x_new + (v_prv - sig_p**2 * s_prv) * dt
            log_fwd = _gauss_rows(x, mean_fwd, 2.0 * sig_p**2 * dt)
            work += log_fwd - log_bwd
            x, v_cur, s_cur = x_new, v_prv, s_prv
        work += end_energy - sys_a.energy(x)

    with np.errstate(invalid="ignore"):
        bad = ~np.isfinite(work) | ~np.all(np.isfinite(x), axis=1)
    work[bad] = np.nan
    return work


def work_ode(path: PathRecord, sys_a: EnergySystem, sys_b: EnergySystem,
             model: TransportModel, grid: TimeGrid, probes=None,
             probe_seed: int = 0) -> float:
    """Deterministic-flow work: endpoint energies minus the divergence
    integral of the velocity along the path (left-endpoint rule)."""
    if not np.all(np.isfinite(path.states)):
        raise NumericsError("work undefined on an invalid path")
    knots = grid.knots
    div_integral = 0.0
    for i in range(knots.size - 1):
        dt = knots[i + 1] - knots[i]
        if dt == 0.0:
            continue
        try:
            div = model.velocity.divergence(path.states[i], knots[i],
                                            probes=probes, seed=probe_seed)
        except NotImplementedError:
            raise ConfigError(
                "velocity field does not expose a divergence"
            ) from None
        div_integral += div * dt
    u_a = sys_a.energy(path.states[0])
    u_b = sys_b.energy(path.states[-1])
    return float(u_b - u_a - div_integral)


def transport_ode_works(model: TransportModel, grid: TimeGrid, direction: str,
                        starts: np.ndarray, sys_a: EnergySystem,
                        sys_b: EnergySystem, probes=None,
                        probe_seed: int = 0) -> np.ndarray:
    """Deterministic-flow works for a whole ensemble (sigma = 0 mode).

    Explicit Euler along the velocity with a left-endpoint divergence
    quadrature, vectorized over paths; matches ``work_ode`` applied to
    ``simulate_path`` output path by path.
    """
    if direction not in (FORWARD, BACKWARD):
        raise ShapeError(f"direction must be forward|backward, got {direction}")
    grid.require_positive_steps()
    x = np.atleast_2d(np.asarray(starts, dtype=np.float64)).copy()
    if x.shape[1] != model.dim:
        raise ShapeError("start points must match model dimension")
    knots = grid.knots
    div_integral = np.zeros(x.shape[0])
    if direction == FORWARD:
        u_start = sys_a.energy(x)
        for i in range(grid.n_steps):
            dt = knots[i + 1] - knots[i]
            t = knots[i]
            div_integral += model.velocity.divergence(
                x, t, probes=probes, seed=probe_seed) * dt
            x = x + model.velocity(x, t) * dt
        return sys_b.energy(x) - u_start - div_integral
    u_end = sys_b.energy(x)
    for i in range(grid.n_steps, 0, -1):
        dt = knots[i] - knots[i - 1]
        t = knots[i]
        x = x - model.velocity(x, t) * dt
        div_integral += model.velocity.divergence(
            x, knots[i - 1], probes=probes, seed=probe_seed) * dt
    return u_end - sys_a.energy(x) - div_integral


def _legendre_nodes(n_nodes):
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    return 0.5 * (x + 1.0), 0.5 * w


def work_escorted_integral(sys_a: EnergySystem, sys_b: EnergySystem,
                           velocity: VectorField, path_fn, n_nodes: int = 64,
                           ) -> float:
    """Integral form of the corrected work along a given smooth path.

    Uses the linear energy blend for the time-dependent energy, so the
    endpoint correction vanishes identically; quadrature is fixed-order
    Gauss-Legendre.
    """
    ts, ws = _legendre_nodes(n_nodes)
    total = 0.0
    for t, w in zip(ts, ws):
        x = np.asarray(path_fn(t), dtype=np.float64)
        blend = interpolated_energy(sys_a, sys_b, x, t)
        v = velocity(x, t)
        div = velocity.divergence(x, t)
        total += w * (-div + float(np.dot(blend.grad, v)) + blend.dt)
    x0 = np.asarray(path_fn(0.0), dtype=np.float64)
    x1 = np.asarray(path_fn(1.0), dtype=np.float64)
    correction = (sys_b.energy(x1) + sys_a.energy(x0)) - (
        sys_a.energy(x0) + sys_b.energy(x1)
    )
    return float(total + correction)


def work_targeted_fep(sys_a: EnergySystem, sys_b: EnergySystem,
                      velocity: VectorField, path_fn, n_nodes: int = 64,
                      ) -> float:
    """Endpoint energies minus the divergence integral on the same path."""
    ts, ws = _legendre_nodes(n_nodes)
    div_integral = 0.0
    for t, w in zip(ts, ws):
        x = np.asarray(path_fn(t), dtype=np.float64)
        div_integral += w * velocity.divergence(x, t)
    x0 = np.asarray(path_fn(0.0), dtype=np.float64)
    x1 = np.asarray(path_fn(1.0), dtype=np.float64)
    return float(sys_b.energy(x1) - sys_a.energy(x0) - div_integral)


# ---------------------------------------------------------------------------
# analytic transport between diagonal Gaussians
# ---------------------------------------------------------------------------


class _BridgeMoments:
    """Closed-form marginals of the Gaussian bridge between two diagonal
    Gaussians under independent endpoint draws."""

    def __init__(self, sys_a: GaussianSystem, sys_b: GaussianSystem,
                 schedule: Schedule):
        self.mean_a, self.var_a = sys_a.mean, sys_a.var
        self.mean_b, self.var_b = sys_b.mean, sys_b.var
        self.schedule = schedule

    def at(self, t):
        """Moment curves at scalar t or per-sample t (broadcast to rows)."""
        sch = self.schedule
        t = np.asarray(t, dtype=np.float64)
        a, b = sch.alpha(t), sch.beta(t)
        g2 = sch.gamma(t) ** 2
        gc = sch.gamma_cross(t)
        if t.ndim == 1:
            a, b, g2, gc = a[:, None], b[:, None], g2[:, None], gc[:, None]
        mean = a * self.mean_a + b * self.mean_b
        var = a * a * self.var_a + b * b * self.var_b + g2
        mean_dot = -self.mean_a + self.mean_b
        cross = -a * self.var_a + b * self.var_b + gc
        return mean, var, mean_dot, cross


class OracleVelocity(VectorField):
    def __init__(self, moments: _BridgeMoments, dim: int):
        self._m = moments
        self.dim = dim

    def __call__(self, x, t):
        mean, var, mean_dot, cross = self._m.at(t)
        return mean_dot + (cross / var) * (np.asarray(x, dtype=np.float64) - mean)

    def divergence(self, x, t, probes=None, seed=0):
        _, var, _, cross = self._m.at(t)
        div = np.sum(cross / var, axis=-1)
        x = np.asarray(x)
        if x.ndim == 1:
            return float(div)
        return np.broadcast_to(div, (x.shape[0],)).copy()


class OracleScore(VectorField):
    def __init__(self, moments: _BridgeMoments, dim: int):
        self._m = moments
        self.dim = dim

    def __call__(self, x, t):
        mean, var, _, _ = self._m.at(t)
        return (np.asarray(x, dtype=np.float64) - mean) / var

    def divergence(self, x, t, probes=None, seed=0):
        _, var, _, _ = self._m.at(t)
        div = np.sum(1.0 / var, axis=-1)
        x = np.asarray(x)
        if x.ndim == 1:
            return float(div)
        return np.broadcast_to(div, (x.shape[0],)).copy()


def analytic_gaussian_transport(sys_a: EnergySystem, sys_b: EnergySystem,
                                schedule: Schedule | None = None,
                                sigma: float = 0.0) -> TransportModel:
    """Exact affine transport between diagonal Gaussian endpoints.

    The velocity is the conditional expectation of the bridge rate given
    the bridge point, and the score is the gradient of the bridge
    marginal's energy; both follow from the joint Gaussian law of the
    endpoint draws, the noise, and the bridge point.
    """
    if not isinstance(sys_a, GaussianSystem) or not isinstance(sys_b, GaussianSystem):
        raise ShapeError("analytic transport supports Gaussian endpoints only")
    if sys_a.dim != sys_b.dim:
        raise ShapeError("endpoint dimensions differ")
    schedule = schedule or Schedule()
    moments = _BridgeMoments(sys_a, sys_b, schedule)
    return TransportModel(
        dim=sys_a.dim,
        velocity=OracleVelocity(moments, sys_a.dim),
        score=OracleScore(moments, sys_a.dim),
        schedule=schedule,
        sigma=sigma,
    )


# ---------------------------------------------------------------------------
# work file IO
# ---------------------------------------------------------------------------


def write_works(path, ledger: WorkLedger) -> None:
    lines = []
    for key, value in sorted(ledger.provenance.items()):
        lines.append(f"# {key}={value}")
    lines.append("direction,work,valid")
    for w in ledger.forward:
        lines.append(f"forward,{w:.17g},1")
    for _ in range(ledger.invalid_forward):
        lines.append("forward,nan,0")
    for w in ledger.backward:
        lines.append(f"backward,{w:.17g},1")
    for _ in range(ledger.invalid_backward):
        lines.append("backward,nan,0")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_works(path) -> WorkLedger:
    fwd, bwd = [], []
    invalid = {FORWARD: 0, BACKWARD: 0}
    provenance = {}
    with open(path) as fh:
        header_seen = False
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            if raw.startswith("#"):
                body = raw[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    provenance[k.strip()] = v.strip()
                continue
            if not header_seen:
                if raw != "direction,work,valid":
                    raise ParseError(f"bad works header: '{raw}'", line=lineno)
                header_seen = True
                continue
            parts = raw.split(",")
            if len(parts) != 3:
                raise ParseError("expected 3 fields", line=lineno)
            direction, work_s, valid_s = parts
            if direction not in (FORWARD, BACKWARD):
                raise ParseError(f"bad direction '{direction}'", line=lineno)
            if valid_s not in ("0", "1"):
                raise ParseError(f"bad valid flag '{valid_s}'", line=lineno)
            if valid_s == "0":
                invalid[direction] += 1
                continue
            try:
                w = float(work_s)
            except ValueError:
                raise ParseError("non-numeric work", line=lineno) from None
            if not math.isfinite(w):
                raise ParseError("non-finite work marked valid", line=lineno)
            (fwd if direction == FORWARD else bwd).append(w)
    if not header_seen:
        raise ParseError("missing works header")
    return WorkLedger(
        forward=np.array(fwd), backward=np.array(bwd),
        invalid_forward=invalid[FORWARD], invalid_backward=invalid[BACKWARD],
        provenance=provenance,
    )
