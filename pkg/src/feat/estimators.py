"""Free-energy-difference estimators over samples and work ensembles.

All exponential averages go through shifted log-sum-exp and every Fermi
factor through a log-sigmoid, because realistic work values reach
magnitudes of hundreds. The two-sided estimators share one fixed-point
core: the equilibrium acceptance-ratio estimator is its degenerate
no-transport case, a reduction the tests pin down exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_expit, logsumexp

from .errors import ConfigError, FeatError, NumericsError, ShapeError
from .sampling import MalaConfig, mala_chain
from .systems import BlendSystem, EnergySystem
from .transport import WorkLedger

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 1000
DEFAULT_BOOTSTRAP = 200


def log_mean_exp(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ShapeError("log_mean_exp of an empty array")
    return float(logsumexp(values) - math.log(values.size))


def fermi_log(z):
    """log of 1 / (1 + exp(z)), stable for large |z|."""
    return log_expit(-np.asarray(z, dtype=np.float64))


def fep_estimate(energies_a, energies_b) -> float:
    """One-sided perturbation estimate from samples of the first system.

    ``energies_a[i]`` and ``energies_b[i]`` are the two energies at the
    same sample drawn from the first system's equilibrium.
    """
    energies_a = np.asarray(energies_a, dtype=np.float64)
    energies_b = np.asarray(energies_b, dtype=np.float64)
    if energies_a.size == 0:
        raise ShapeError("fep_estimate needs at least one sample")
    if energies_a.shape != energies_b.shape:
        raise ShapeError("energy arrays must have equal length")
    return -log_mean_exp(-(energies_b - energies_a))


@dataclass(frozen=True)
class FixedPointResult:
    value: float
    constant: float
    iterations: int
    converged: bool


def _acceptance_ratio_update(works_fwd, works_bwd, c, use_means):
    log_num = float(logsumexp(log_expit(works_bwd - c)))
    log_den = float(logsumexp(log_expit(c - works_fwd)))
    # mean form differs from the sum form only by the count ratio, which
    # is exactly zero for equal ensembles
    offset = (math.log(works_bwd.size / works_fwd.size) if use_means else 0.0)
    return log_num - log_den - offset + c


def _acceptance_ratio_fixed_point(works_fwd, works_bwd, c0, use_means=False,
                                  tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                                  ) -> FixedPointResult:
    c = float(c0)
    for it in range(1, max_iter + 1):
        new = _acceptance_ratio_update(works_fwd, works_bwd, c, use_means)
        if abs(new - c) < tol:
            return FixedPointResult(new, c, it, True)
        c = new
    return FixedPointResult(c, c, max_iter, False)


def bar_equilibrium(delta_u_forward, delta_u_backward, tol=DEFAULT_TOL,
                    max_iter=DEFAULT_MAX_ITER) -> FixedPointResult:
    """Two-sided equilibrium acceptance-ratio estimate.

    ``delta_u_forward`` holds U_b - U_a on samples from the first system
    and ``delta_u_backward`` holds U_a - U_b on samples from the second.
    The iteration starts from the one-sided perturbation estimate; a
    non-converged result is flagged, never silent.
    """
    du_f = np.asarray(delta_u_forward, dtype=np.float64)
    du_b = np.asarray(delta_u_backward, dtype=np.float64)
    if du_f.size == 0 or du_b.size == 0:
        raise ShapeError("both exponent arrays must be non-empty")
    c0 = fep_estimate(np.zeros_like(du_f), du_f)
    return _acceptance_ratio_fixed_point(du_f, -du_b, c0, use_means=True,
                                         tol=tol, max_iter=max_iter)


@dataclass(frozen=True)
class IwaeValues:
    forward: float | None
    backward: float | None

    def mean(self):
        both = [v for v in (self.forward, self.backward) if v is not None]
        return sum(both) / len(both)


def iwae_estimates(ledger: WorkLedger) -> IwaeValues:
    """Finite-sample exponential-work averages per direction.

    The forward value is biased high in expectation, the backward value
    biased low; with a single path each reduces to that path's work.
    """
    if ledger.n_forward == 0 and ledger.n_backward == 0:
        raise ShapeError("ledger holds no valid works")
    fwd = -log_mean_exp(-ledger.forward) if ledger.n_forward else None
    bwd = log_mean_exp(ledger.backward) if ledger.n_backward else None
    return IwaeValues(forward=fwd, backward=bwd)


def elbo_eubo(ledger: WorkLedger):
    """Plain work means: (backward mean, forward mean)."""
    lower = float(np.mean(ledger.backward)) if ledger.n_backward else None
    upper = float(np.mean(ledger.forward)) if ledger.n_forward else None
    return lower, upper


def min_variance_estimate(ledger: WorkLedger, tol=DEFAULT_TOL,
                          max_iter=DEFAULT_MAX_ITER) -> FixedPointResult:
    """Fermi-weighted fixed point over both work ensembles.

    Sums are used as written (no count-ratio correction), and the
    constant is initialized at the average of the two one-sided values.
    """
    if ledger.n_forward < 2 or ledger.n_backward < 2:
        raise ShapeError("need at least two valid paths per direction")
    c0 = iwae_estimates(ledger).mean()
    return _acceptance_ratio_fixed_point(ledger.forward, ledger.backward, c0,
                                         use_means=False, tol=tol,
                                         max_iter=max_iter)


def bootstrap_std(values, n_resamples=DEFAULT_BOOTSTRAP, seed=0,
                  statistic=np.mean) -> float:
    """Std of a statistic over seeded resamples with replacement."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ShapeError("bootstrap needs at least two values")
    rng = np.random.default_rng(seed)
    n = values.size
    estimates = np.empty(n_resamples)
    for r in range(n_resamples):
        estimates[r] = statistic(values[rng.integers(0, n, size=n)])
    return float(np.std(estimates))


def _bootstrap_two_sided(fwd, bwd, fn, n_resamples, seed):
    rng = np.random.default_rng(seed)
    estimates = np.empty(n_resamples)
    for r in range(n_resamples):
        f = fwd[rng.integers(0, fwd.size, size=fwd.size)]
        b = bwd[rng.integers(0, bwd.size, size=bwd.size)]
        estimates[r] = fn(f, b)
    return float(np.std(estimates))


# ---------------------------------------------------------------------------
# quadrature over intermediate systems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TiResult:
    value: float
    nodes: np.ndarray
    node_means: np.ndarray


def ti_quadrature(sys_a: EnergySystem, sys_b: EnergySystem,
                  sampler_cfg: MalaConfig, n_knots: int = 21,
                  x0=None) -> TiResult:
    """Gauss-Legendre quadrature of the mean energy slope along the
    linear blend, with one chain per node (warm-started left to right)."""
    if sys_a.dim != sys_b.dim:
        raise ShapeError("systems must share a dimension")
    x, w = np.polynomial.legendre.leggauss(n_knots)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w
    start = np.zeros(sys_a.dim) if x0 is None else np.asarray(x0, dtype=np.float64)
    node_means = np.empty(n_knots)
    for j, t in enumerate(nodes):
        target = BlendSystem(sys_a, sys_b, t)
        cfg = replace(sampler_cfg, seed=sampler_cfg.seed + j)
        try:
            chain = mala_chain(target, cfg, start)
        except FeatError as exc:
            raise NumericsError(f"sampler failed at node t={t:.6f}: {exc}") from exc
        if len(chain) == 0:
            raise NumericsError(f"sampler kept no samples at node t={t:.6f}")
        slope = sys_b.energy(chain.samples) - sys_a.energy(chain.samples)
        node_means[j] = float(np.mean(slope))
        start = chain.samples[-1]
    return TiResult(value=float(np.dot(weights, node_means)), nodes=nodes,
                    node_means=node_means)


# ---------------------------------------------------------------------------
# umbrella histogram reweighting
# ---------------------------------------------------------------------------


def umbrella_reweight(counts_a, counts_b, f_a, f_b, umbrella_a, umbrella_b,
                      bin_centers) -> np.ndarray:
    """Combine two restrained histograms into the unbiased distribution.

    ``umbrella_a`` and ``umbrella_b`` are (strength, center) pairs of the
    harmonic restraints on the binned collective variable; ``f_a`` and
    ``f_b`` are the restrained systems' free energies on any common
    additive scale. Returns probabilities normalized to sum 1.
    """
    counts_a = np.asarray(counts_a, dtype=np.float64)
    counts_b = np.asarray(counts_b, dtype=np.float64)
    centers = np.asarray(bin_centers, dtype=np.float64)
    if counts_a.shape != centers.shape or counts_b.shape != centers.shape:
        raise ShapeError("histograms and bin centers must share a shape")
    n_a, n_b = counts_a.sum(), counts_b.sum()
    if n_a == 0 and n_b == 0:
        raise ShapeError("both histograms are empty")
    k1, mu1 = umbrella_a
    k2, mu2 = umbrella_b
    log_den = np.logaddexp(
        math.log(max(n_a, 1.0)) + f_a - 0.5 * k1 * (centers - mu1) ** 2
        if n_a > 0 else -np.inf,
        math.log(max(n_b, 1.0)) + f_b - 0.5 * k2 * (centers - mu2) ** 2
        if n_b > 0 else -np.inf,
    )
    total = counts_a + counts_b
    with np.errstate(divide="ignore"):
        log_num = np.log(total)
    log_p = log_num - log_den
    log_p -= logsumexp(log_p[np.isfinite(log_p)])
    probs = np.exp(log_p)
    probs[~np.isfinite(log_p)] = 0.0
    return probs / probs.sum()


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------


@dataclass
class EstimateRow:
    estimator: str
    value: float
    std: float
    iters: int
    flags: str = "-"


@dataclass
class EstimateReport:
    rows: list[EstimateRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def value(self, name):
        for row in self.rows:
            if row.estimator == name:
                return row.value
        raise KeyError(name)

    def row(self, name):
        for row in self.rows:
            if row.estimator == name:
                return row
        raise KeyError(name)


def build_report(ledger: WorkLedger, n_resamples=DEFAULT_BOOTSTRAP,
                 seed=0) -> EstimateReport:
    """Apply every estimator the ledger supports, with bootstrap errors."""
    if ledger.n_forward == 0 and ledger.n_backward == 0:
        raise ShapeError("empty-ledger")
    report = EstimateReport()
    flags = []
    if ledger.drop_rate() > 1e-3:
        flags.append("high-drop")
    base_flags = ",".join(flags) if flags else "-"

    iwae = iwae_estimates(ledger)
    lower, upper = elbo_eubo(ledger)
    if iwae.forward is not None:
        std = (bootstrap_std(ledger.forward, n_resamples, seed,
                             lambda v: -log_mean_exp(-v))
               if ledger.n_forward > 1 else math.nan)
        report.rows.append(EstimateRow("forward_iwae", iwae.forward, std, 0,
                                       base_flags))
        report.rows.append(EstimateRow(
            "eubo", upper,
            bootstrap_std(ledger.forward, n_resamples, seed + 1)
            if ledger.n_forward > 1 else math.nan, 0, base_flags))
    if iwae.backward is not None:
        std = (bootstrap_std(ledger.backward, n_resamples, seed + 2,
                             lambda v: log_mean_exp(v))
               if ledger.n_backward > 1 else math.nan)
        report.rows.append(EstimateRow("backward_iwae", iwae.backward, std, 0,
                                       base_flags))
        report.rows.append(EstimateRow(
            "elbo", lower,
            bootstrap_std(ledger.backward, n_resamples, seed + 3)
            if ledger.n_backward > 1 else math.nan, 0, base_flags))

    if ledger.n_forward >= 2 and ledger.n_backward >= 2:
        result = min_variance_estimate(ledger)
        mv_flags = list(flags)
        if not result.converged:
            mv_flags.append("nonconv")
        std = _bootstrap_two_sided(
            ledger.forward, ledger.backward,
            lambda f, b: min_variance_estimate(
                WorkLedger(forward=f, backward=b)).value,
            n_resamples, seed + 4)
        report.rows.append(EstimateRow(
            "min_variance", result.value, std, result.iterations,
            ",".join(mv_flags) if mv_flags else "-"))
        report.meta["min_variance_constant"] = f"{result.constant:.17g}"
    report.meta["n_forward"] = str(ledger.n_forward)
    report.meta["n_backward"] = str(ledger.n_backward)
    report.meta["invalid_forward"] = str(ledger.invalid_forward)
    report.meta["invalid_backward"] = str(ledger.invalid_backward)
    for key, value in ledger.provenance.items():
        report.meta.setdefault(key, str(value))
    return report


def write_report(path, report: EstimateReport) -> None:
    lines = [f"# {k}={v}" for k, v in sorted(report.meta.items())]
    lines.append("estimator,value,std,iters,flags")
    for row in report.rows:
        lines.append(
            f"{row.estimator},{row.value:.17g},{row.std:.10g},"
            f"{row.iters},{row.flags}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_report(path) -> EstimateReport:
    report = EstimateReport()
    with open(path) as fh:
        header_seen = False
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            if raw.startswith("#"):
                body = raw[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    report.meta[k.strip()] = v.strip()
                continue
            if not header_seen:
                header_seen = True
                continue
            name, value, std, iters, flags = raw.split(",", 4)
            report.rows.append(EstimateRow(name, float(value), float(std),
                                           int(iters), flags))
    return report


def summary_text(report: EstimateReport) -> str:
    width = max((len(r.estimator) for r in report.rows), default=8)
    lines = ["estimate summary", "-" * (width + 34)]
    for row in report.rows:
        lines.append(
            f"{row.estimator:<{width}}  {row.value:+12.6f}  "
            f"(std {row.std:.4g}, iters {row.iters}, flags {row.flags})"
        )
    counts = (f"paths: {report.meta.get('n_forward', '?')} forward / "
              f"{report.meta.get('n_backward', '?')} backward")
    lines.append(counts)
    return "\n".join(lines)
