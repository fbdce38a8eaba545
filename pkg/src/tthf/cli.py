"""Declarative experiment runner.

A YAML file describes the network, data, model, training schedule and a
list of arms (TT-HF variants and FedAvg baselines).  ``run`` executes every
arm for each replicate seed and writes ``trace.csv``, ``bounds.csv`` and
``summary.csv``; ``verify-bounds`` runs only the checked arm and its bound
checks; ``compare`` aligns several ``summary.csv`` files.

Exit status: 0 on success, 1 when an enabled bound check fails, 2 on errors.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import types
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml

from . import analysis as an
from .data import (
    LabeledPool,
    load_idx,
    partition_label_skew,
    split_pool,
    synth_classification,
    synth_quadratic,
)
from .engine import (
    ADAPTIVE,
    FIXED,
    FULL,
    NO_CONSENSUS,
    SAMPLED,
    GlobalObjective,
    Hyperparameters,
    replicate_seeds,
    run_fedavg_baseline,
    run_tthf,
    trace_array,
)
from .errors import IncompatibleRuns, ParseError, TthfError, ValidationError
from .model import LEAST_SQUARES, SQUARED_SVM, LossModel, estimate_beta
from .topology import build_network

ALL_CHECKS = ("consensus_bound", "round_schedule", "dispersion_bound", "one_step", "envelope")
THEOREM_CHECKS = ("dispersion_bound", "one_step", "envelope")
DATA_KINDS = ("quadratic", "classification", "idx")
TTHF, FEDAVG = "tthf", "fedavg"
ONE_STEP_MIN_FRACTION = 0.99
ABS_SLACK = 1e-9


# -- configuration -----------------------------------------------------------


@dataclass
class NetworkConfig:
    devices: int = 25
    clusters: int = 5
    spectral_target: float = 0.7
    radius: float | None = None
    tolerance: float = 0.05


@dataclass
class DataConfig:
    kind: str = "quadratic"
    points_per_device: int = 40
    dim: int = 5
    heterogeneity: float = 1.0
    noise: float = 0.1
    num_classes: int = 10
    separation: float = 1.5
    labels_per_device: int = 3
    test_points: int = 2000
    images: str | None = None
    labels: str | None = None


@dataclass
class ModelConfig:
    kind: str = LEAST_SQUARES
    reg: float = 1.0


@dataclass
class TrainingConfig:
    gamma: float = 2.0
    alpha: float | str = "auto"
    tau: int = 10
    total_steps: int = 200
    batch_size: int | None = 16
    theorem_mode: bool = False
    init_scale: float = 0.0


@dataclass
class ConsensusConfig:
    policy: str = ADAPTIVE
    rounds: int = 1
    period: int = 5
    phi: float = 1.0


@dataclass
class ResourceConfig:
    e_d2d: float = 0.0
    e_glob: float = 1.0
    d_d2d: float = 0.0
    d_glob: float = 0.25


@dataclass
class ArmConfig:
    """One training variant.  Unset fields inherit the top-level settings."""

    name: str = TTHF
    method: str = TTHF
    tau: int | None = None
    participation: str | None = None
    policy: str | None = None
    rounds: int | None = None
    phi: float | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    replicates: int = 1
    output_dir: str = "results"
    accuracy_target: float = 0.6
    sigma_draws: int = 200
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hyperparameters: TrainingConfig = field(default_factory=TrainingConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    resource: ResourceConfig = field(default_factory=ResourceConfig)
    arms: list[ArmConfig] | None = None
    checks: list[str] | None = None


def _coerce(value, hint, key):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None:
            if type(None) in args:
                return None
            raise ValidationError(key, "must not be null")
        options = [a for a in args if a is not type(None)]
        if len(options) == 1:
            return _coerce(value, options[0], key)
        errors = []
        for a in options:
            try:
                return _coerce(value, a, key)
            except ValidationError as e:
                errors.append(str(e))
        raise ValidationError(key, "; ".join(errors))
    if origin is list:
        if not isinstance(value, list):
            raise ValidationError(key, "expected a list")
        (inner,) = typing.get_args(hint)
        return [_coerce(v, inner, f"{key}[{i}]") for i, v in enumerate(value)]
    if is_dataclass(hint):
        return _from_dict(hint, value, key)
    if hint is bool:
        if not isinstance(value, bool):
            raise ValidationError(key, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(key, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(key, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ValidationError(key, f"expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported field type {hint!r}")


def _from_dict(cls, raw, prefix=""):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError(prefix or "<root>", "expected a mapping")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls)]
    for k in raw:
        if k not in names:
            raise ValidationError(f"{prefix}.{k}" if prefix else str(k), "unknown key")
    kw = {}
    for name in names:
        if name in raw:
            kw[name] = _coerce(raw[name], hints[name], f"{prefix}.{name}" if prefix else name)
    return cls(**kw)


def _effective_policy(cfg: ExperimentConfig, arm: ArmConfig) -> str:
    return arm.policy if arm.policy is not None else cfg.consensus.policy


def _effective_phi(cfg: ExperimentConfig, arm: ArmConfig) -> float:
    return arm.phi if arm.phi is not None else cfg.consensus.phi


def _materialize(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.arms is None:
        cfg.arms = [ArmConfig()]
    for arm in cfg.arms:
        if arm.method == FEDAVG and arm.participation is None:
            arm.participation = FULL
        if arm.method == TTHF and arm.participation is None:
            arm.participation = SAMPLED
    if cfg.checks is None:
        checked = checked_arm(cfg)
        cfg.checks = []
        if checked is not None:
            cfg.checks.append("consensus_bound")
            if _effective_policy(cfg, checked) == ADAPTIVE:
                cfg.checks.append("round_schedule")
            if cfg.hyperparameters.theorem_mode:
                cfg.checks.extend(c for c in THEOREM_CHECKS if c != "one_step" or cfg.replicates >= 2)
    return cfg


def checked_arm(cfg: ExperimentConfig) -> ArmConfig | None:
    """The first TT-HF arm; bound checks run on it."""
    return next((a for a in cfg.arms or [] if a.method == TTHF), None)


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks.  Raises ``ValidationError`` naming the key."""

    def need(ok, key, msg):
        if not ok:
            raise ValidationError(key, msg)

    net, data, mod, hp, cons = cfg.network, cfg.data, cfg.model, cfg.hyperparameters, cfg.consensus
    need(cfg.replicates >= 1, "replicates", "must be at least 1")
    need(0 < cfg.accuracy_target <= 1, "accuracy_target", "must lie in (0, 1]")
    need(cfg.sigma_draws >= 1, "sigma_draws", "must be positive")
    need(net.devices >= 1 and net.clusters >= 1, "network.devices", "devices and clusters must be positive")
    need(net.devices % net.clusters == 0, "network.clusters", f"{net.devices} devices do not split into {net.clusters} equal clusters")
    need(0 < net.spectral_target < 1, "network.spectral_target", "must lie in (0, 1)")
    need(net.radius is None or net.radius > 0, "network.radius", "must be positive")
    need(net.tolerance > 0, "network.tolerance", "must be positive")

    need(data.kind in DATA_KINDS, "data.kind", f"must be one of {', '.join(DATA_KINDS)}")
    need(data.points_per_device >= 1, "data.points_per_device", "must be positive")
    need(data.dim >= 1, "data.dim", "must be positive")
    need(data.heterogeneity >= 0 and data.noise >= 0, "data.heterogeneity", "heterogeneity and noise must be nonnegative")
    need(data.num_classes >= 2, "data.num_classes", "must be at least 2")
    need(1 <= data.labels_per_device <= data.num_classes, "data.labels_per_device", "must lie in [1, num_classes]")
    need(data.test_points >= 0, "data.test_points", "must be nonnegative")
    if data.kind == "idx":
        need(data.images is not None, "data.images", "idx data needs an images path")
        need(data.labels is not None, "data.labels", "idx data needs a labels path")

    need(mod.kind in (LEAST_SQUARES, SQUARED_SVM), "model.kind", f"must be {LEAST_SQUARES} or {SQUARED_SVM}")
    need(mod.reg > 0, "model.reg", "must be positive")
    want = LEAST_SQUARES if data.kind == "quadratic" else SQUARED_SVM
    need(mod.kind == want, "model.kind", f"{data.kind} data needs the {want} model")

    need(hp.gamma > 0, "hyperparameters.gamma", "must be positive")
    if isinstance(hp.alpha, str):
        need(hp.alpha == "auto", "hyperparameters.alpha", "must be a number or 'auto'")
    else:
        need(hp.alpha > 0, "hyperparameters.alpha", "must be positive")
    need(hp.tau >= 1, "hyperparameters.tau", "must be at least 1")
    need(hp.total_steps >= 1, "hyperparameters.total_steps", "must be at least 1")
    need(hp.batch_size is None or hp.batch_size >= 1, "hyperparameters.batch_size", "must be positive or null")
    if hp.batch_size is not None and data.kind == "quadratic":
        need(hp.batch_size <= data.points_per_device, "hyperparameters.batch_size", "exceeds points_per_device")

    need(cons.policy in (NO_CONSENSUS, FIXED, ADAPTIVE), "consensus.policy", "must be none, fixed or adaptive")
    need(cons.rounds >= 0, "consensus.rounds", "must be nonnegative")
    need(cons.period >= 1, "consensus.period", "must be at least 1")
    need(cons.phi >= 0, "consensus.phi", "must be nonnegative")

    r = cfg.resource
    for k in ("e_d2d", "e_glob", "d_d2d", "d_glob"):
        need(getattr(r, k) >= 0, f"resource.{k}", "must be nonnegative")

    need(len(cfg.arms) >= 1, "arms", "need at least one arm")
    seen = set()
    for i, arm in enumerate(cfg.arms):
        key = f"arms[{i}]"
        need(arm.name not in seen, f"{key}.name", f"duplicate arm name {arm.name!r}")
        seen.add(arm.name)
        need(arm.method in (TTHF, FEDAVG), f"{key}.method", "must be tthf or fedavg")
        need(arm.tau is None or arm.tau >= 1, f"{key}.tau", "must be at least 1")
        need(arm.participation in (FULL, SAMPLED), f"{key}.participation", f"must be {FULL} or {SAMPLED}")
        if arm.method == TTHF:
            need(arm.participation == SAMPLED, f"{key}.participation", "TT-HF always samples one device per cluster")
            pol = _effective_policy(cfg, arm)
            need(pol in (NO_CONSENSUS, FIXED, ADAPTIVE), f"{key}.policy", "must be none, fixed or adaptive")
            if pol == ADAPTIVE:
                need(_effective_phi(cfg, arm) > 0, f"{key}.phi", "the adaptive policy needs phi > 0")
        else:
            need(arm.policy is None and arm.rounds is None and arm.phi is None, f"{key}.policy", "FedAvg arms take no consensus settings")
        need(arm.rounds is None or arm.rounds >= 0, f"{key}.rounds", "must be nonnegative")
        need(arm.phi is None or arm.phi >= 0, f"{key}.phi", "must be nonnegative")

    if hp.theorem_mode:
        need(hp.gamma > 1.0 / mod.reg, "hyperparameters.gamma", f"theorem mode needs gamma > 1/mu = {1.0 / mod.reg}")
        for i, arm in enumerate(cfg.arms):
            if arm.method == TTHF:
                need(_effective_policy(cfg, arm) == ADAPTIVE, f"arms[{i}].policy", "theorem mode needs the adaptive policy")
        if not isinstance(hp.alpha, str):
            need(hp.alpha > 1, "hyperparameters.alpha", "theorem mode needs alpha > 1")

    for i, name in enumerate(cfg.checks):
        need(name in ALL_CHECKS, f"checks[{i}]", f"unknown check {name!r}")
        if name in THEOREM_CHECKS:
            need(hp.theorem_mode, f"checks[{i}]", f"{name} needs theorem_mode")
        if name == "one_step":
            need(cfg.replicates >= 2, "replicates", "the one_step check needs at least 2 replicates")
        if name == "round_schedule" and checked_arm(cfg) is not None:
            need(_effective_policy(cfg, checked_arm(cfg)) == ADAPTIVE, f"checks[{i}]", "round_schedule needs the adaptive policy")
    if cfg.checks:
        need(checked_arm(cfg) is not None, "checks", "bound checks need a tthf arm")


def config_from_dict(raw) -> ExperimentConfig:
    cfg = _materialize(_from_dict(ExperimentConfig, raw))
    validate(cfg)
    return cfg


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ParseError(f"{source}: {e}") from e
    return config_from_dict(raw)


def parse_config(path) -> ExperimentConfig:
    """Read, validate and materialise a YAML experiment file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    return parse_config_text(text, str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(asdict(cfg), sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the canonical JSON form, ignoring seed and output location."""
    d = asdict(cfg)
    d.pop("seed")
    d.pop("output_dir")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- experiment construction -----------------------------------------------


@dataclass
class Experiment:
    ds: object
    topologies: list
    model: LossModel
    w0: np.ndarray
    w_star: np.ndarray
    test: LabeledPool | None
    beta: float
    alpha: float


def _derived_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, 1000 + tag]).generate_state(1)[0])


def _with_bias(pool: LabeledPool) -> LabeledPool:
    return LabeledPool(np.hstack([pool.x, np.ones((len(pool), 1))]), pool.y)


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    net, d = cfg.network, cfg.data
    I, N = net.devices, net.clusters
    model = LossModel(cfg.model.kind, cfg.model.reg, d.num_classes if cfg.model.kind == SQUARED_SVM else None)
    test = None
    w_star = None
    if d.kind == "quadratic":
        ds, w_star = synth_quadratic(d.dim, I, N, d.points_per_device, d.heterogeneity,
                                     seed=_derived_seed(cfg.seed, 0), reg=cfg.model.reg, noise=d.noise)
    else:
        if d.kind == "classification":
            pool = synth_classification(I * d.points_per_device + d.test_points, d.num_classes, d.dim,
                                        d.separation, seed=_derived_seed(cfg.seed, 0))
        else:
            pool = _with_bias(load_idx(d.images, d.labels))
        train, test = split_pool(pool, d.test_points, seed=_derived_seed(cfg.seed, 3))
        ds = partition_label_skew(train, I, N, d.labels_per_device, d.num_classes, seed=_derived_seed(cfg.seed, 4))
        if len(test) == 0:
            test = None
    if w_star is None:
        w_star = GlobalObjective(model, ds).minimize()
    topologies = build_network(I, N, net.spectral_target, seed=_derived_seed(cfg.seed, 1),
                               radius=net.radius, tol=net.tolerance)
    dim = model.param_dim(ds.feature_dim)
    w0 = cfg.hyperparameters.init_scale * np.random.default_rng(_derived_seed(cfg.seed, 2)).standard_normal(dim)
    beta = estimate_beta(model, ds)
    hp = cfg.hyperparameters
    alpha = hp.gamma * beta**2 / model.mu if hp.alpha == "auto" else float(hp.alpha)
    if hp.theorem_mode:
        if alpha < hp.gamma * beta**2 / model.mu:
            raise ValidationError("hyperparameters.alpha", f"theorem mode needs alpha >= gamma*beta^2/mu = {hp.gamma * beta**2 / model.mu}")
        if hp.gamma / alpha > 1.0 / beta:
            raise ValidationError("hyperparameters.gamma", "theorem mode needs eta_0 <= 1/beta")
        if not alpha > 1:
            raise ValidationError("hyperparameters.alpha", "theorem mode needs alpha > 1")
    if hp.batch_size is not None:
        small = min(len(s) for s in ds.shards)
        if hp.batch_size > small:
            raise ValidationError("hyperparameters.batch_size", f"exceeds the smallest shard ({small} points)")
    return Experiment(ds, topologies, model, w0, w_star, test, beta, alpha)


def arm_hyperparameters(cfg: ExperimentConfig, exp: Experiment, arm: ArmConfig, master_seed: int) -> Hyperparameters:
    hp, cons = cfg.hyperparameters, cfg.consensus
    return Hyperparameters(
        gamma=hp.gamma,
        alpha=exp.alpha,
        tau=arm.tau if arm.tau is not None else hp.tau,
        total_steps=hp.total_steps,
        consensus=_effective_policy(cfg, arm) if arm.method == TTHF else NO_CONSENSUS,
        rounds=arm.rounds if arm.rounds is not None else cons.rounds,
        period=cons.period,
        phi=_effective_phi(cfg, arm),
        batch_size=hp.batch_size,
        master_seed=master_seed,
        theorem_mode=hp.theorem_mode and arm.method == TTHF,
    )


def _run_arm(cfg, exp, arm, master_seed):
    hp = arm_hyperparameters(cfg, exp, arm, master_seed)
    if arm.method == TTHF:
        tr = run_tthf(exp.ds, exp.topologies, exp.model, hp, exp.w0, exp.w_star, exp.test)
    else:
        tr = run_fedavg_baseline(exp.ds, exp.model, hp, arm.participation, None, exp.w0, exp.w_star, exp.test)
    rm = an.ResourceModel(**asdict(cfg.resource))
    an.resource_accounting(tr, rm, exp.topologies, arm.participation)
    return tr


def _run_replicate(job):
    cfg, exp, arms, master_seed = job
    return {arm.name: _run_arm(cfg, exp, arm, master_seed) for arm in arms}


def run_replicates(cfg, exp, arms, jobs: int = 1) -> list[dict]:
    """Traces per replicate, in seed order regardless of ``jobs``."""
    seeds = replicate_seeds(cfg.seed, cfg.replicates)
    work = [(cfg, exp, arms, s) for s in seeds]
    if jobs <= 1 or len(work) == 1:
        return [_run_replicate(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_replicate, work))


# -- bound checks ----------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    rows: list[tuple]  # (t, measured, bound, stderr, passed)
    passed: bool

    @property
    def violations(self) -> int:
        return sum(1 for r in self.rows if not r[4])


def _consensus_rows(traces, exp):
    lams = [topo.lam for topo in exp.topologies]
    sizes = [topo.s_c for topo in exp.topologies]
    rows = []
    for k in range(1, len(traces[0])):
        worst = None
        for tr in traces:
            rec = tr[k]
            for c in range(len(lams)):
                b = an.lemma1_bound(lams[c], int(rec.gamma_rounds[c]), sizes[c], float(rec.upsilon[c]))
                m = float(rec.max_consensus_err[c])
                if worst is None or m - b > worst[0] - worst[1]:
                    worst = (m, b)
        rows.append((k, worst[0], worst[1], 0.0, worst[0] <= worst[1] + ABS_SLACK))
    return rows


def _schedule_rows(traces, hp):
    rows = []
    for k in range(1, len(traces[0])):
        m = max(float(np.max(tr[k].max_consensus_err)) for tr in traces)
        b = hp.eta(k) * hp.phi
        rows.append((k, m, b, 0.0, m <= b + ABS_SLACK))
    return rows


def _replicate_mean(traces, name):
    M = an.replicate_matrix(traces, name)
    se = M.std(axis=0, ddof=1) / math.sqrt(len(traces)) if len(traces) > 1 else np.zeros(M.shape[1])
    return M.mean(axis=0), se


def evaluate_checks(cfg, exp, traces, constants_seed: int) -> list[CheckResult]:
    """Run the configured checks on the checked arm's replicate traces."""
    arm = checked_arm(cfg)
    hp = arm_hyperparameters(cfg, exp, arm, 0)
    results = []
    consts = None
    if any(c in THEOREM_CHECKS for c in cfg.checks):
        consts = an.estimate_constants(exp.model, exp.ds, hp, exp.w0, exp.w_star, seed=constants_seed, draws=cfg.sigma_draws)
    for name in cfg.checks:
        if name == "consensus_bound":
            rows = _consensus_rows(traces, exp)
        elif name == "round_schedule":
            rows = _schedule_rows(traces, hp)
        elif name == "dispersion_bound":
            A, se = _replicate_mean(traces, "dispersion_A")
            rows = []
            for t in range(1, len(A)):
                b = an.prop1_bound(consts, t, ((t - 1) // hp.tau) * hp.tau)
                rows.append((t, float(A[t]), b, float(se[t]), A[t] <= b + ABS_SLACK))
        elif name == "one_step":
            gaps = an.replicate_matrix(traces, "global_loss_gap")
            disp = np.array([an.one_step_dispersion(tr, hp.tau) for tr in traces])
            res = an.theorem1_check(gaps, disp, consts)
            rows = [(t, float(r), 0.0, float(s), bool(p)) for t, (r, s, p) in enumerate(zip(res.residuals, res.stderr, res.passed))]
            results.append(CheckResult(name, rows, res.fraction_ok >= ONE_STEP_MIN_FRACTION))
            continue
        elif name == "envelope":
            gap, se = _replicate_mean(traces, "global_loss_gap")
            _, env = an.theorem2_envelope(consts, float(gap[0]))
            bound = env(np.arange(len(gap)))
            rows = [(t, float(gap[t]), float(bound[t]), float(se[t]), gap[t] <= bound[t] + ABS_SLACK) for t in range(len(gap))]
        results.append(CheckResult(name, rows, all(r[4] for r in rows)))
    return results


# -- outputs ---------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue().encode("utf-8")


def write_atomic(files: dict[Path, bytes]) -> None:
    """Write every file to a temporary name, then rename all of them."""
    temps = []
    try:
        for path, data in files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(f".{path.name}.tmp")
            tmp.write_bytes(data)
            temps.append((tmp, path))
        for tmp, path in temps:
            os.replace(tmp, path)
    except BaseException:
        for tmp, _ in temps:
            tmp.unlink(missing_ok=True)
        raise


def trace_columns(cfg: ExperimentConfig) -> list[str]:
    N = cfg.network.clusters
    return (["arm", "t", "loss", "loss_gap", "accuracy", "A_t"]
            + [f"gamma_c{c}" for c in range(N)] + [f"upsilon_c{c}" for c in range(N)]
            + ["cum_energy", "cum_delay"])


def _trace_rows(arm_name, traces):
    cols = {n: an.replicate_matrix(traces, n).mean(axis=0)
            for n in ("global_loss", "global_loss_gap", "accuracy", "dispersion_A", "cum_energy", "cum_delay")}
    G = np.mean([trace_array(tr, "gamma_rounds") for tr in traces], axis=0)
    U = np.mean([trace_array(tr, "upsilon") for tr in traces], axis=0)
    for k in range(len(traces[0])):
        yield ([arm_name, k, cols["global_loss"][k], cols["global_loss_gap"][k], cols["accuracy"][k],
                cols["dispersion_A"][k]] + list(G[k]) + list(U[k]) + [cols["cum_energy"][k], cols["cum_delay"][k]])


BOUNDS_COLUMNS = ["check", "arm", "t", "measured", "bound", "stderr", "passed"]


def _bounds_rows(arm_name, results):
    for res in results:
        for t, m, b, se, ok in res.rows:
            yield [res.name, arm_name, t, m, b, se, bool(ok)]


SUMMARY_BASE = ["arm", "method", "seed", "replicates", "config_hash", "data_hash", "model_hash", "alpha",
                "final_loss", "final_loss_gap", "final_accuracy", "time_to_target", "energy_to_target",
                "delay_to_target", "total_energy", "total_delay"]


def summary_columns(cfg: ExperimentConfig) -> list[str]:
    return SUMMARY_BASE + [f"violations_{c}" for c in cfg.checks] + ["checks_passed"]


def data_hash(ds) -> str:
    h = hashlib.sha256()
    for members in ds.clusters:
        h.update(np.asarray(members, dtype=np.int64).tobytes())
    for sh in ds.shards:
        h.update(np.ascontiguousarray(sh.x, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(sh.y, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def model_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(asdict(cfg.model), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunSummary:
    config_hash: str
    seed: int
    data_hash: str
    model_hash: str
    rows: list[dict]
    checks: list[CheckResult]
    out_dir: Path

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def violations(self) -> dict[str, int]:
        return {c.name: c.violations for c in self.checks}


def _arm_summary(cfg, exp, arm, traces, hashes, checks):
    mean = {n: an.replicate_matrix(traces, n).mean(axis=0)
            for n in ("global_loss", "global_loss_gap", "accuracy", "cum_energy", "cum_delay")}
    hit = an.time_to_accuracy(mean["accuracy"], cfg.accuracy_target) if np.any(np.isfinite(mean["accuracy"])) else None
    row = dict(
        arm=arm.name, method=arm.method, seed=cfg.seed, replicates=cfg.replicates,
        config_hash=hashes[0], data_hash=hashes[1], model_hash=hashes[2], alpha=exp.alpha,
        final_loss=mean["global_loss"][-1], final_loss_gap=mean["global_loss_gap"][-1],
        final_accuracy=mean["accuracy"][-1], time_to_target=hit,
        energy_to_target=None if hit is None else mean["cum_energy"][hit],
        delay_to_target=None if hit is None else mean["cum_delay"][hit],
        total_energy=mean["cum_energy"][-1], total_delay=mean["cum_delay"][-1],
    )
    for c in cfg.checks:
        row[f"violations_{c}"] = None
    row["checks_passed"] = None
    if checks is not None:
        for res in checks:
            row[f"violations_{res.name}"] = res.violations
        row["checks_passed"] = all(r.passed for r in checks)
    return row


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1, bounds_only: bool = False) -> RunSummary:
    """Run every arm (or only the checked arm) and write the CSV artifacts."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    exp = build_experiment(cfg)
    target = checked_arm(cfg)
    if bounds_only and target is None:
        raise ValidationError("arms", "verify-bounds needs a tthf arm")
    arms = [target] if bounds_only else list(cfg.arms)
    reps = run_replicates(cfg, exp, arms, jobs)
    checks = []
    if target is not None and cfg.checks:
        checks = evaluate_checks(cfg, exp, [r[target.name] for r in reps], _derived_seed(cfg.seed, 5))
    hashes = (config_hash(cfg), data_hash(exp.ds), model_hash(cfg))
    rows = [_arm_summary(cfg, exp, arm, [r[arm.name] for r in reps], hashes,
                         checks if target is not None and arm.name == target.name else None)
            for arm in arms]
    files = {out / "bounds.csv": _csv_bytes(BOUNDS_COLUMNS, _bounds_rows(target.name, checks) if checks else [])}
    if not bounds_only:
        trace_rows = [row for arm in arms for row in _trace_rows(arm.name, [r[arm.name] for r in reps])]
        cols = summary_columns(cfg)
        files[out / "trace.csv"] = _csv_bytes(trace_columns(cfg), trace_rows)
        files[out / "summary.csv"] = _csv_bytes(cols, ([row[c] for c in cols] for row in rows))
        files[out / "config.yaml"] = serialize_config(cfg).encode("utf-8")
    write_atomic(files)
    return RunSummary(hashes[0], cfg.seed, hashes[1], hashes[2], rows, checks, out)


COMPARE_COLUMNS = ["source", "arm", "method", "final_loss", "final_loss_gap", "final_accuracy",
                   "time_to_target", "energy_to_target", "total_energy", "total_delay"]


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def compare_runs(summaries) -> bytes:
    """Aligned comparison table of several summaries.

    ``summaries`` holds paths to ``summary.csv`` files or already-read row
    lists.  All rows must share the same data and model hashes.
    """
    tables = []
    for i, s in enumerate(summaries):
        if isinstance(s, (str, os.PathLike)):
            tables.append((str(s), read_summary(s)))
        else:
            tables.append((f"summary{i}", list(s)))
    if len(tables) < 2:
        raise ValueError("need at least two summaries to compare")
    ref = None
    for src, rows in tables:
        for r in rows:
            key = (r["data_hash"], r["model_hash"])
            if ref is None:
                ref = (src, key)
            elif key != ref[1]:
                what = "data" if key[0] != ref[1][0] else "model"
                raise IncompatibleRuns(f"{src} uses different {what} than {ref[0]}")
    out = [[src] + [r[c] for c in COMPARE_COLUMNS[1:]] for src, rows in tables for r in rows]
    return _csv_bytes(COMPARE_COLUMNS, out)


# -- command line ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tthf", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out-dir", default=None, help="override the config output_dir")
        sp.add_argument("--jobs", type=int, default=1, help="parallel replicate workers")

    r = sub.add_parser("run", help="run all arms and write trace/bounds/summary CSVs")
    r.add_argument("config")
    common(r)
    v = sub.add_parser("verify-bounds", help="run only the checked arm and its bound checks")
    v.add_argument("config")
    common(v)
    c = sub.add_parser("compare", help="align several summary.csv files")
    c.add_argument("summaries", nargs="+")
    c.add_argument("--out-dir", default=None, help="write comparison.csv here instead of stdout")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            table = compare_runs(args.summaries)
            if args.out_dir:
                write_atomic({Path(args.out_dir) / "comparison.csv": table})
            else:
                sys.stdout.write(table.decode("utf-8"))
            return 0
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs < 1:
            raise ValidationError("--jobs", "must be at least 1")
        summary = run_experiment(cfg, args.out_dir, args.jobs, bounds_only=args.command == "verify-bounds")
    except (TthfError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for name, n in summary.violations.items():
        print(f"{name}: {n} violation(s)")
    print(f"wrote {summary.out_dir}")
    return 0 if summary.passed else 1


if __name__ == "__main__":
    sys.exit(main())
