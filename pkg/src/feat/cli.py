"""Configuration-driven pipeline: sample, train, work, estimate, reweight.

Configs are sectioned key=value text (INI syntax). Every stage reads and
writes file artifacts only, so later stages never recompute earlier
ones, and all randomness flows from one master seed through named
derivation labels. Artifact writes go through a temp-file rename so a
crash never leaves a half-written file.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import os
import sys

import numpy as np

from . import estimators as est
from . import interpolant as itp
from . import numcore as nc
from . import sampling as smp
from . import systems as sysmod
from . import transport as trn
from .errors import ConfigError, FeatError, NumericsError, ParseError, ShapeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

ARTIFACTS = {
    "samples_a": "samples_a.txt",
    "samples_b": "samples_b.txt",
    "model_velocity": "model_velocity.txt",
    "model_score": "model_score.txt",
    "losses": "losses.csv",
    "works": "works.csv",
    "report": "report.csv",
    "histogram": "histogram.csv",
}


def derive_seed(master: int, label: str, index: int = 0) -> int:
    """Named, collision-resistant stream seed from the master seed."""
    digest = hashlib.sha256(f"{master}:{label}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def git_blob_hash(path) -> str:
    with open(path, "rb") as fh:
        content = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def atomic_write(path, writer) -> None:
    tmp = f"{path}.tmp"
    writer(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


class Config:
    def __init__(self, parser: configparser.ConfigParser):
        self._cp = parser

    @classmethod
    def load(cls, path, overrides=()):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        cfg = cls(cp)
        for item in overrides:
            cfg.apply_override(item)
        return cfg

    def apply_override(self, item: str):
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if not self._cp.has_section(section):
            self._cp.add_section(section)
        self._cp.set(section, key, value)

    def has(self, section, key=None):
        if key is None:
            return self._cp.has_section(section)
        return self._cp.has_option(section, key)

    def get(self, section, key, default=None, required=False):
        if self._cp.has_option(section, key):
            return self._cp.get(section, key)
        if required:
            raise ConfigError(f"missing config key [{section}] {key}")
        return default

    def get_float(self, section, key, default=None, required=False):
        raw = self.get(section, key, None, required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number, got '{raw}'")

    def get_int(self, section, key, default=None, required=False):
        raw = self.get(section, key, None, required)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer, got '{raw}'")

    def get_bool(self, section, key, default=False):
        raw = self.get(section, key)
        if raw is None:
            return default
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} must be boolean, got '{raw}'")

    def get_floats(self, section, key, default=None):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return np.array([float(v) for v in raw.replace(",", " ").split()])
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number list")


def build_system(cfg: Config, section: str) -> sysmod.EnergySystem:
    kind = cfg.get(section, "kind", required=True)
    if kind == "gaussian":
        dim = cfg.get_int(section, "dim", 1)
        mean = cfg.get_floats(section, "mean", np.zeros(dim))
        var = cfg.get_floats(section, "var", np.ones(dim))
        if mean.size == 1 and dim > 1:
            mean = np.full(dim, mean[0])
        if var.size == 1 and dim > 1:
            var = np.full(dim, var[0])
        system = sysmod.GaussianSystem(mean, var)
    elif kind == "gmm":
        dim = cfg.get_int(section, "dim", required=True)
        components = cfg.get_int(section, "components", required=True)
        std = cfg.get_float(section, "std", required=True)
        seed = cfg.get_int(section, "seed", required=True)
        box = cfg.get_float(section, "box", 2.0)
        system = sysmod.GmmSystem.random(dim, components, std, seed, box)
    elif kind == "doublewell":
        system = sysmod.DoubleWellSystem(
            dim=cfg.get_int(section, "dim", 1),
            barrier=cfg.get_float(section, "barrier", 2.0),
        )
    elif kind == "lj-cluster":
        system = sysmod.LjClusterSystem(
            n_particles=cfg.get_int(section, "particles", required=True),
            epsilon=cfg.get_float(section, "epsilon", 1.0),
            sigma=cfg.get_float(section, "sigma", 1.0),
        )
    elif kind == "phi4":
        system = sysmod.Phi4System(
            side=cfg.get_int(section, "side", required=True),
            m2=cfg.get_float(section, "m2", -1.0),
            lam=cfg.get_float(section, "lambda", 0.8),
            umbrella_k=cfg.get_float(section, "umbrella_k", None),
            umbrella_mu=cfg.get_float(section, "umbrella_mu", 0.0),
        )
    else:
        raise ConfigError(f"unknown system kind '{kind}'")
    umbrella_k = cfg.get_float(section, "mean_umbrella_k", None)
    if umbrella_k is not None and kind != "phi4":
        system = sysmod.UmbrellaSystem(
            system, umbrella_k, cfg.get_float(section, "mean_umbrella_mu", 0.0)
        )
    scale = cfg.get_float(section, "scale", None)
    if scale is not None:
        system = sysmod.ScaledSystem(system, scale)
    return system


def _master_seed(cfg: Config) -> int:
    seed = cfg.get_int("run", "seed", None)
    if seed is None:
        raise ConfigError("missing config key [run] seed (seeds are mandatory)")
    return seed


def _out_dir(cfg: Config, args) -> str:
    out = args.out or cfg.get("run", "out", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _artifact(out, name):
    return os.path.join(out, ARTIFACTS[name])


def _require_artifact(path):
    if not os.path.exists(path):
        raise ConfigError(f"missing-artifact {path}")
    return path


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _mala_start(cfg: Config, system, label, master):
    init = cfg.get("sampler", "init", "zeros")
    if init == "zeros":
        return np.zeros(system.dim)
    if init == "center":
        center = cfg.get_float("sampler", "init_value", 0.0)
        rng = np.random.default_rng(derive_seed(master, f"{label}-init"))
        return np.full(system.dim, center) + 0.05 * rng.standard_normal(system.dim)
    if init == "lattice":
        if not isinstance(system, sysmod.LjClusterSystem):
            raise ConfigError("lattice init needs an lj-cluster system")
        return system.lattice_start(seed=derive_seed(master, f"{label}-init"))
    values = cfg.get_floats("sampler", "init")
    if values is None or values.size != system.dim:
        raise ConfigError("sampler init must be zeros|center|lattice or a point")
    return values


def stage_sample(cfg: Config, out: str) -> None:
    master = _master_seed(cfg)
    method = cfg.get("sampler", "method", "mala")
    for label, section, artifact in (
        ("sampling-a", "system_a", "samples_a"),
        ("sampling-b", "system_b", "samples_b"),
    ):
        system = build_system(cfg, section)
        if method == "exact":
            n = cfg.get_int("sampler", "n", required=True)
            sset = smp.exact_samples(system, n, derive_seed(master, label))
        elif method == "mala":
            mala_cfg = smp.MalaConfig(
                steps=cfg.get_int("sampler", "steps", 100_000),
                burn_in_fraction=cfg.get_float("sampler", "burn_in", 0.2),
                step_size=cfg.get_float("sampler", "step_size", 0.05),
                target_accept=cfg.get_float("sampler", "target_accept", 0.6),
                adapt_gain=cfg.get_float("sampler", "adapt_gain", 0.1),
                thin=cfg.get_int("sampler", "thin", 1),
                seed=derive_seed(master, label),
            )
            x0 = _mala_start(cfg, system, label, master)
            sset = smp.mala_chain(system, mala_cfg, x0)
            limit = cfg.get_int("sampler", "n", None)
            if limit is not None and len(sset) > limit:
                keep = np.linspace(0, len(sset) - 1, limit).astype(int)
                sset = smp.SampleSet(dim=sset.dim, samples=sset.samples[keep],
                                     grads=sset.grads[keep], meta=sset.meta)
        else:
            raise ConfigError(f"unknown sampler method '{method}'")
        atomic_write(_artifact(out, artifact),
                     lambda p, s=sset: smp.write_samples(p, s))
    print(f"sample: wrote {ARTIFACTS['samples_a']}, {ARTIFACTS['samples_b']}")


def _train_config(cfg: Config, master: int) -> itp.TrainConfig:
    return itp.TrainConfig(
        iterations=cfg.get_int("train", "iterations", 2000),
        batch_size=cfg.get_int("train", "batch_size", 256),
        learning_rate=cfg.get_float("train", "learning_rate", 1e-3),
        t_clip=cfg.get_float("train", "t_clip", 1e-3),
        ot_pairing=cfg.get_bool("train", "ot_pairing", False),
        ot_batch=cfg.get_int("train", "ot_batch", 256),
        canonicalize=cfg.get_bool("train", "canonicalize", False),
        particles=cfg.get_bool("train", "particles", False),
        warmup=cfg.get_int("train", "warmup", 0),
        width=cfg.get_int("train", "width", 64),
        depth=cfg.get_int("train", "depth", 2),
        noise_amplitude=cfg.get_float("train", "noise_amplitude", 0.05),
        seed=derive_seed(master, "training"),
    )


def stage_train(cfg: Config, out: str) -> None:
    master = _master_seed(cfg)
    set_a = smp.read_samples(_require_artifact(_artifact(out, "samples_a")))
    set_b = smp.read_samples(_require_artifact(_artifact(out, "samples_b")))
    systems = (build_system(cfg, "system_a"), build_system(cfg, "system_b"))
    result = itp.train_transport(_train_config(cfg, master), set_a, set_b,
                                 systems)
    atomic_write(_artifact(out, "model_velocity"),
                 lambda p: nc.save_model(p, result.velocity_net, "velocity"))
    atomic_write(_artifact(out, "model_score"),
                 lambda p: nc.save_model(p, result.score_net, "score"))
    atomic_write(_artifact(out, "losses"),
                 lambda p: itp.write_loss_trace(p, result.trace))
    final = result.trace[-1] if len(result.trace) else [0, math.nan]
    print(f"train: {len(result.trace)} iterations, final velocity loss "
          f"{final[1]:.6g}")


def _load_transport(cfg: Config, out: str) -> tuple[itp.TransportModel, dict]:
    v_path = _require_artifact(_artifact(out, "model_velocity"))
    s_path = _require_artifact(_artifact(out, "model_score"))
    v_net, v_kind = nc.load_model(v_path)
    s_net, s_kind = nc.load_model(s_path)
    if v_kind != "velocity" or s_kind != "score":
        raise ConfigError("checkpoint kinds do not match their roles")
    if v_net.dim != s_net.dim:
        raise ConfigError("checkpoint dimensions differ")
    schedule = itp.Schedule(cfg.get_float("train", "noise_amplitude", 0.05))
    model = itp.TransportModel(
        dim=v_net.dim,
        velocity=itp.MlpField(v_net),
        score=itp.MlpField(s_net),
        schedule=schedule,
        sigma=cfg.get_float("transport", "sigma", 0.1),
    )
    provenance = {
        "model_hash_velocity": git_blob_hash(v_path),
        "model_hash_score": git_blob_hash(s_path),
    }
    return model, provenance


def _path_starts(samples: np.ndarray, n_paths: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = samples.shape[0]
    if n >= n_paths:
        idx = rng.choice(n, size=n_paths, replace=False)
    else:
        idx = rng.integers(0, n, size=n_paths)
    return samples[idx]


def _run_works(cfg: Config, out: str, model: itp.TransportModel,
               provenance: dict) -> None:
    master = _master_seed(cfg)
    sys_a = build_system(cfg, "system_a")
    sys_b = build_system(cfg, "system_b")
    if sys_a.dim != model.dim or sys_b.dim != model.dim:
        raise ConfigError("system dimension does not match the transport")
    set_a = smp.read_samples(_require_artifact(_artifact(out, "samples_a")))
    set_b = smp.read_samples(_require_artifact(_artifact(out, "samples_b")))
    n_paths = cfg.get_int("transport", "paths", 1000)
    grid = trn.TimeGrid.uniform(cfg.get_int("transport", "steps", 100))

    starts_f = _path_starts(set_a.samples, n_paths,
                            derive_seed(master, "pathing-init", 0))
    starts_b = _path_starts(set_b.samples, n_paths,
                            derive_seed(master, "pathing-init", 1))
    works_f, bad_f = trn.transport_works(
        model, grid, trn.FORWARD, starts_f,
        derive_seed(master, "pathing", 0), sys_a, sys_b)
    works_b, bad_b = trn.transport_works(
        model, grid, trn.BACKWARD, starts_b,
        derive_seed(master, "pathing", 1), sys_a, sys_b)
    provenance = dict(provenance)
    provenance.update({
        "sigma": f"{model.sigma:.17g}",
        "steps": str(grid.n_steps),
        "paths": str(n_paths),
    })
    ledger = trn.WorkLedger(forward=works_f, backward=works_b,
                            invalid_forward=bad_f, invalid_backward=bad_b,
                            provenance=provenance)
    atomic_write(_artifact(out, "works"),
                 lambda p: trn.write_works(p, ledger))
    print(f"work: {ledger.n_forward} forward / {ledger.n_backward} backward "
          f"paths ({bad_f + bad_b} dropped)")


def stage_work(cfg: Config, out: str) -> None:
    model, provenance = _load_transport(cfg, out)
    _run_works(cfg, out, model, provenance)


def stage_estimate(cfg: Config, out: str) -> None:
    master = _master_seed(cfg)
    ledger = trn.read_works(_require_artifact(_artifact(out, "works")))
    if ledger.n_forward == 0 and ledger.n_backward == 0:
        raise ConfigError("empty-ledger")
    report = est.build_report(
        ledger,
        n_resamples=cfg.get_int("estimator", "bootstrap", 200),
        seed=derive_seed(master, "bootstrap"),
    )
    atomic_write(_artifact(out, "report"),
                 lambda p: est.write_report(p, report))
    print(est.summary_text(report))


def stage_oracle(cfg: Config, out: str) -> None:
    """Full pipeline with the analytic Gaussian transport, no training."""
    master = _master_seed(cfg)
    sys_a = build_system(cfg, "system_a")
    sys_b = build_system(cfg, "system_b")
    if not (isinstance(sys_a, sysmod.GaussianSystem)
            and isinstance(sys_b, sysmod.GaussianSystem)):
        raise ConfigError("oracle mode needs gaussian endpoints")
    n = cfg.get_int("sampler", "n", 2000)
    for label, system, artifact in (("sampling-a", sys_a, "samples_a"),
                                    ("sampling-b", sys_b, "samples_b")):
        sset = smp.exact_samples(system, n, derive_seed(master, label))
        atomic_write(_artifact(out, artifact),
                     lambda p, s=sset: smp.write_samples(p, s))
    schedule = itp.Schedule(cfg.get_float("train", "noise_amplitude", 0.05))
    model = trn.analytic_gaussian_transport(
        sys_a, sys_b, schedule, sigma=cfg.get_float("transport", "sigma", 0.2))
    descriptor = (f"analytic mean_a={sys_a.mean} var_a={sys_a.var} "
                  f"mean_b={sys_b.mean} var_b={sys_b.var}").encode()
    provenance = {"model_hash_velocity": hashlib.sha1(
        b"blob %d\0" % len(descriptor) + descriptor).hexdigest()}
    provenance["model_hash_score"] = provenance["model_hash_velocity"]
    _run_works(cfg, out, model, provenance)
    stage_estimate(cfg, out)


def stage_reweight(cfg: Config, out: str) -> None:
    set_a = smp.read_samples(_require_artifact(_artifact(out, "samples_a")))
    set_b = smp.read_samples(_require_artifact(_artifact(out, "samples_b")))
    k_a = cfg.get_float("reweight", "k_a", required=True)
    mu_a = cfg.get_float("reweight", "mu_a", required=True)
    k_b = cfg.get_float("reweight", "k_b", required=True)
    mu_b = cfg.get_float("reweight", "mu_b", required=True)
    bins = cfg.get_int("reweight", "bins", 61)
    lo = cfg.get_float("reweight", "lo", required=True)
    hi = cfg.get_float("reweight", "hi", required=True)
    delta_f = cfg.get_float("reweight", "delta_f", None)
    if delta_f is None:
        report = est.read_report(_require_artifact(_artifact(out, "report")))
        try:
            delta_f = report.value("min_variance")
        except KeyError:
            raise ConfigError("report lacks a min_variance row; "
                              "set [reweight] delta_f explicitly")

    edges = np.linspace(lo, hi, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    cv_a = set_a.samples.mean(axis=1)
    cv_b = set_b.samples.mean(axis=1)
    counts_a, _ = np.histogram(cv_a, bins=edges)
    counts_b, _ = np.histogram(cv_b, bins=edges)
    probs = est.umbrella_reweight(counts_a, counts_b, 0.0, delta_f,
                                  (k_a, mu_a), (k_b, mu_b), centers)

    def write(path):
        with open(path, "w") as fh:
            fh.write(f"# delta_f={delta_f:.17g}\n")
            fh.write("xi,count_a,count_b,prob\n")
            for c, ca, cb, p in zip(centers, counts_a, counts_b, probs):
                fh.write(f"{c:.10g},{int(ca)},{int(cb)},{p:.17g}\n")

    atomic_write(_artifact(out, "histogram"), write)
    sym = 0.5 * float(np.sum(np.abs(probs - probs[::-1])))
    print(f"reweight: wrote histogram.csv (symmetry metric {sym:.4f})")


def stage_gradcheck(cfg: Config, out: str) -> int:
    """Randomized derivative checks for the engine and the systems."""
    rng = np.random.default_rng(0)
    rows = []

    worst = 0.0
    for trial in range(20):
        net = nc.build_mlp(3, [8, 8], seed=trial, zero_final=False)
        x = rng.standard_normal((4, 3))
        t = rng.uniform(0.2, 0.8, size=4)
        feats = np.concatenate([x, nc.time_features(t)], axis=1)
        target = rng.standard_normal((4, 3))
        params = net.param_leaves()
        loss = nc.scale(nc.sum_all(nc.square(nc.sub(
            net.traced_forward(feats, params), nc.leaf(target)))), 0.25)
        grads = nc.grad_params(loss, params)
        flat = net.params()
        for arr, g in zip(flat, grads):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            step = 1e-5
            orig = arr[idx]
            arr[idx] = orig + step
            up = 0.25 * float(np.sum((net.forward(x, t) - target) ** 2))
            arr[idx] = orig - step
            dn = 0.25 * float(np.sum((net.forward(x, t) - target) ** 2))
            arr[idx] = orig
            fd = (up - dn) / (2 * step)
            scale_ref = max(abs(fd), abs(g[idx]), 1e-8)
            worst = max(worst, abs(fd - g[idx]) / scale_ref)
    rows.append(("mlp-backprop-vs-fd", worst, worst <= 1e-5))

    for system in (
        sysmod.GaussianSystem(np.array([0.3, -0.2]), np.array([1.0, 2.5])),
        sysmod.GmmSystem.random(2, 4, 0.5, seed=3),
        sysmod.DoubleWellSystem(2, 2.0),
        sysmod.LjClusterSystem(3),
        sysmod.Phi4System(4, umbrella_k=10.0, umbrella_mu=-0.3),
    ):
        worst = 0.0
        for _ in range(20):
            x = 0.5 * rng.standard_normal(system.dim)
            if isinstance(system, sysmod.LjClusterSystem):
                x = system.lattice_start(seed=int(rng.integers(2**31)))
            g = system.grad(x)
            for i in rng.choice(system.dim, size=min(3, system.dim),
                                replace=False):
                step = 1e-6
                xp, xm = x.copy(), x.copy()
                xp[i] += step
                xm[i] -= step
                fd = (system.energy(xp) - system.energy(xm)) / (2 * step)
                scale_ref = max(abs(fd), abs(g[i]), 1e-6)
                worst = max(worst, abs(fd - g[i]) / scale_ref)
        rows.append((f"grad-{system.kind}", worst, worst <= 1e-5))

    print("check                     max-rel-err  status")
    ok = True
    for name, err, passed in rows:
        ok = ok and passed
        print(f"{name:<25} {err:>11.3e}  {'pass' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

STAGES = {
    "sample": stage_sample,
    "train": stage_train,
    "work": stage_work,
    "estimate": stage_estimate,
    "reweight": stage_reweight,
    "oracle": stage_oracle,
}


def _error_slug(exc: Exception) -> str:
    """Single-token messages act as machine-readable error codes."""
    msg = str(exc)
    if msg and " " not in msg:
        return msg
    first = msg.split(" ", 1)[0]
    if first == "missing-artifact":
        return first
    return "config"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="feat",
        description="free energy difference estimation via learned transport",
    )
    parser.add_argument("subcommand", choices=sorted([*STAGES, "gradcheck"]))
    parser.add_argument("--config", required=True, help="path to config file")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override section.key=value")
    parser.add_argument("--out", default=None, help="output directory")
    args = parser.parse_args(argv)

    try:
        cfg = Config.load(args.config, args.set)
        out = _out_dir(cfg, args)
        if args.subcommand == "gradcheck":
            return stage_gradcheck(cfg, out)
        STAGES[args.subcommand](cfg, out)
        return EXIT_OK
    except (ConfigError, ParseError, ShapeError, FileNotFoundError) as exc:
        print(f'feat-error code={_error_slug(exc)} msg="{exc}"',
              file=sys.stderr)
        return EXIT_CONFIG
    except (NumericsError, FeatError) as exc:
        print(f'feat-error code=numerical msg="{exc}"', file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
