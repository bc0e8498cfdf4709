"""Equilibrium endpoint sampling and sample-set persistence.

The workhorse is a Metropolis-adjusted Langevin chain whose step size is
adapted multiplicatively toward a target acceptance rate during burn-in
and frozen afterward, so the kept samples satisfy detailed balance for
exp(-U)/Z exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ParseError, ShapeError
from .systems import EnergySystem

SAMPLES_MAGIC = "feat-samples v1"
_ADAPT_WINDOW = 100


@dataclass
class MalaConfig:
    steps: int = 100_000
    burn_in_fraction: float = 0.2
    step_size: float = 0.05
    target_accept: float = 0.6
    adapt_gain: float = 0.1
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ShapeError("burn-in fraction must lie in [0, 1)")
        if self.step_size <= 0:
            raise ShapeError("step size must be positive")
        if self.thin < 1:
            raise ShapeError("thinning stride must be >= 1")


@dataclass
class SampleSet:
    """Samples from one endpoint, optionally with energy gradients."""

    dim: int
    samples: np.ndarray
    grads: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, self.dim)
        if self.grads is not None:
            self.grads = np.asarray(self.grads, dtype=np.float64)
            if self.grads.shape != self.samples.shape:
                raise ShapeError("gradient block must shape-match samples")
            if not np.all(np.isfinite(self.grads)):
                raise NumericsError("non-finite gradient in sample set")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise NumericsError("non-finite sample value")

    def __len__(self):
        return self.samples.shape[0]


def log_accept_ratio(sys: EnergySystem, x, x_new, step_size):
    """Log MALA acceptance ratio for proposal x -> x_new at step size h.

    Uses the asymmetric Gaussian proposal density with mean x - h grad U(x)
    and variance 2h per coordinate.
    """
    h = float(step_size)
    u_x, u_new = sys.energy(x), sys.energy(x_new)
    if not math.isfinite(u_new):
        return -math.inf
    m_fwd = x - h * sys.grad(x)
    m_rev = x_new - h * sys.grad(x_new)
    log_q_fwd = -np.sum((x_new - m_fwd) ** 2) / (4.0 * h)
    log_q_rev = -np.sum((x - m_rev) ** 2) / (4.0 * h)
    return (u_x - u_new) + (log_q_rev - log_q_fwd)


def mala_chain(sys: EnergySystem, cfg: MalaConfig, x0) -> SampleSet:
    """Run one chain and return thinned post-burn-in samples with gradients."""
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (sys.dim,):
        raise ShapeError(f"x0 must have shape ({sys.dim},)")
    u = sys.energy(x)
    if not math.isfinite(u):
        raise NumericsError("initialization error: non-finite energy at x0")

    rng = np.random.default_rng(cfg.seed)
    h = cfg.step_size
    burn = int(cfg.steps * cfg.burn_in_fraction)
    g = sys.grad(x)

    kept_x, kept_g = [], []
    accepted_window = 0
    accepted_total = 0
    post_steps = 0

    for step in range(cfg.steps):
        noise = rng.standard_normal(sys.dim)
        x_prop = x - h * g + math.sqrt(2.0 * h) * noise
        u_prop = sys.energy(x_prop)
        if math.isfinite(u_prop):
            g_prop = sys.grad(x_prop)
            m_fwd = x - h * g
            m_rev = x_prop - h * g_prop
            log_q_fwd = -np.sum((x_prop - m_fwd) ** 2) / (4.0 * h)
            log_q_rev = -np.sum((x - m_rev) ** 2) / (4.0 * h)
            log_alpha = (u - u_prop) + (log_q_rev - log_q_fwd)
            if math.log(rng.random()) < log_alpha:
                x, u, g = x_prop, u_prop, g_prop
                accepted_window += 1
                if step >= burn:
                    accepted_total += 1
        if step >= burn:
            post_steps += 1
            if (step - burn) % cfg.thin == 0:
                kept_x.append(x.copy())
                kept_g.append(g.copy())
        if (step + 1) % _ADAPT_WINDOW == 0:
            if step < burn:  # adaptation frozen after burn-in
                rate = accepted_window / _ADAPT_WINDOW
                h *= math.exp(cfg.adapt_gain * (rate - cfg.target_accept))
            accepted_window = 0

    meta = {
        "system": sys.describe(),
        "seed": cfg.seed,
        "chain_length": cfg.steps,
        "step_size": h,
        "accept_rate": accepted_total / max(post_steps, 1),
    }
    samples = np.array(kept_x) if kept_x else np.zeros((0, sys.dim))
    grads = np.array(kept_g) if kept_g else np.zeros((0, sys.dim))
    return SampleSet(dim=sys.dim, samples=samples, grads=grads, meta=meta)


def exact_samples(sys: EnergySystem, n: int, seed: int) -> SampleSet:
    """Draw i.i.d. samples for system kinds with a tractable density.

    Only the Gaussian and mixture systems support this; it is what the
    well-separated multimodal endpoints need, since a local chain cannot
    hop between distant modes.
    """
    sampler = getattr(sys, "sample_exact", None)
    if sampler is None:
        raise ShapeError(f"system kind '{sys.kind}' has no exact sampler")
    rng = np.random.default_rng(seed)
    samples = sampler(n, rng)
    grads = sys.grad(samples) if n else np.zeros((0, sys.dim))
    meta = {"system": sys.describe(), "seed": seed, "chain_length": 0}
    return SampleSet(dim=sys.dim, samples=samples, grads=grads, meta=meta)


def write_samples(path, sset: SampleSet) -> None:
    has_grads = sset.grads is not None and sset.grads.size
    n = len(sset)
    lines = [f"{SAMPLES_MAGIC} dim={sset.dim} n={n} grads={int(bool(has_grads))}"]
    for i in range(n):
        row = list(sset.samples[i])
        if has_grads:
            row.extend(sset.grads[i])
        lines.append(" ".join(f"{v:.17g}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_samples(path) -> SampleSet:
    with open(path) as fh:
        header = fh.readline().strip()
        fields = header.split()
        if fields[:2] != SAMPLES_MAGIC.split():
            raise ParseError(f"bad sample header: '{header}'", line=1)
        meta = dict(f.split("=", 1) for f in fields[2:] if "=" in f)
        try:
            dim = int(meta["dim"])
            n = int(meta["n"])
            has_grads = bool(int(meta["grads"]))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad sample header: {exc}", line=1) from None
        width = 2 * dim if has_grads else dim
        rows = np.zeros((n, width))
        count = 0
        for lineno, raw in enumerate(fh, start=2):
            raw = raw.strip()
            if not raw:
                continue
            if count >= n:
                raise ParseError("more data lines than declared", line=lineno)
            parts = raw.split()
            if len(parts) != width:
                raise ParseError(
                    f"expected {width} fields, got {len(parts)}", line=lineno
                )
            try:
                values = [float(p) for p in parts]
            except ValueError:
                raise ParseError("non-numeric field", line=lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite value", line=lineno)
            rows[count] = values
            count += 1
    if count != n:
        raise ParseError(f"declared n={n} but found {count} data lines")
    samples = rows[:, :dim]
    grads = rows[:, dim:] if has_grads else None
    return SampleSet(dim=dim, samples=samples, grads=grads)
