"""Theoretical bounds of the two-timescale scheme and checks of measured
trajectories against them, plus energy/delay accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .data import FederatedDataset
from .engine import FULL, SAMPLED, Hyperparameters, TraceRecord, trace_array
from .errors import HypothesisViolated, UnknownOptimum
from .model import (
    LossModel,
    SgdContext,
    default_probe_points,
    estimate_beta,
    estimate_sigma2,
    measure_gradient_diversity,
)


@dataclass(frozen=True)
class AnalysisConstants:
    mu: float
    beta: float
    sigma2: float
    delta: float
    rho_min: float
    epsilon0: float
    phi: float
    gamma: float
    alpha: float
    tau: int

    def eta(self, t):
        return self.gamma / (np.asarray(t, dtype=np.float64) + self.alpha)


@dataclass(frozen=True)
class ResourceModel:
    """Energy per D2D round per device / per uplink, and delay per D2D round /
    per global aggregation."""

    e_d2d: float = 0.0
    e_glob: float = 1.0
    d_d2d: float = 0.0
    d_glob: float = 0.25

    def __post_init__(self):
        if min(self.e_d2d, self.e_glob, self.d_d2d, self.d_glob) < 0:
            raise ValueError("resource costs must be nonnegative")


def estimate_constants(
    model: LossModel,
    ds: FederatedDataset,
    hp: Hyperparameters,
    w0,
    w_star,
    seed: int = 0,
    draws: int = 1000,
) -> AnalysisConstants:
    """Measure beta, sigma^2 and delta on probes spanning start and optimum."""
    rng = np.random.default_rng(seed)
    probes = default_probe_points(w0, w_star, rng)
    beta = estimate_beta(model, ds)
    batch = hp.batch_size if hp.batch_size is not None else min(len(s) for s in ds.shards)
    sigma2 = estimate_sigma2(model, ds, SgdContext(batch, rng), probes, draws=draws)
    delta = measure_gradient_diversity(model, ds, probes)
    return AnalysisConstants(
        mu=model.mu,
        beta=beta,
        sigma2=sigma2,
        delta=delta,
        rho_min=float(ds.cluster_weights.min()),
        epsilon0=hp.eta(0) * hp.phi,
        phi=hp.phi,
        gamma=hp.gamma,
        alpha=hp.alpha,
        tau=hp.tau,
    )


def lemma1_bound(lambda_c: float, gamma_rounds: int, s_c: int, upsilon: float) -> float:
    """Per-device consensus error bound ``lambda^G sqrt(s_c) Upsilon``."""
    if not 0.0 <= lambda_c < 1.0:
        raise ValueError("lambda_c must lie in [0, 1)")
    return lambda_c**gamma_rounds * math.sqrt(s_c) * upsilon


def dispersion_sigma(beta: float, eta: Callable[[int], float], t: int, t_km1: int) -> float:
    """``sum_{l=t_km1}^{t-1} beta*eta_l prod_{j=l+1}^{t-1} (1 + 2 eta_j beta)``."""
    total = 0.0
    for ell in range(t_km1, t):
        prod = 1.0
        for j in range(ell + 1, t):
            prod *= 1.0 + 2.0 * eta(j) * beta
        total += beta * eta(ell) * prod
    return total


def prop1_bound(c: AnalysisConstants, t: int, t_km1: int) -> float:
    """Upper bound on the expected cluster dispersion at step ``t`` of the
    interval that started at ``t_km1``."""
    if c.alpha < c.gamma * c.beta**2 / c.mu:
        raise HypothesisViolated(f"alpha={c.alpha} < gamma*beta^2/mu={c.gamma * c.beta**2 / c.mu}")
    if not t_km1 <= t:
        raise ValueError("t must not precede the interval start")
    S = dispersion_sigma(c.beta, lambda j: c.gamma / (j + c.alpha), t, t_km1)
    return 12.0 / c.rho_min * S**2 * (c.sigma2 / c.beta**2 + c.delta**2 / c.beta**2 + c.epsilon0**2)


@dataclass
class OneStepResult:
    residuals: np.ndarray
    stderr: np.ndarray
    passed: np.ndarray

    @property
    def min_residual(self) -> float:
        return float(self.residuals.min())

    @property
    def fraction_ok(self) -> float:
        return float(self.passed.mean())


def one_step_dispersion(trace: Sequence[TraceRecord], tau: int) -> np.ndarray:
    """``A^(t)`` of the state a step starts from: zero right after a broadcast."""
    A = trace_array(trace, "dispersion_A").astype(np.float64)
    t = trace_array(trace, "t")
    A[t % tau == 0] = 0.0
    return A


def theorem1_check(
    gaps: np.ndarray,
    dispersions: np.ndarray,
    c: AnalysisConstants,
    eta: np.ndarray | Callable | None = None,
    n_se: float = 2.0,
) -> OneStepResult:
    """One-step inequality residuals ``RHS - LHS`` from replicate data.

    ``gaps`` and ``dispersions`` are ``(R, T+1)``: loss gaps ``F(w_hat)-F*`` and
    the dispersion of the state each step starts from.  Consensus errors are
    replaced by their policy bound ``eta_t * phi``.  A step passes when its
    mean residual is at least ``-n_se`` standard errors.
    """
    gaps = np.atleast_2d(np.asarray(gaps, dtype=np.float64))
    if not np.all(np.isfinite(gaps)):
        raise UnknownOptimum("loss gaps need a known optimum")
    A = np.atleast_2d(np.asarray(dispersions, dtype=np.float64))
    R, T1 = gaps.shape
    steps = np.arange(T1)
    if eta is None:
        et = c.eta(steps)
    elif callable(eta):
        et = np.array([eta(t) for t in steps], dtype=np.float64)
    else:
        et = np.asarray(eta, dtype=np.float64)
    e_now = et[:-1]
    e_next = et[1:]
    eps_now = e_now * c.phi
    eps_next = e_next * c.phi
    const = 0.5 * (e_now * c.beta**2 * eps_now**2 + e_now**2 * c.beta * c.sigma2 + c.beta * eps_next**2)
    per_rep = (1.0 - c.mu * e_now) * gaps[:, :-1] + 0.5 * e_now * c.beta**2 * A[:, :-1] - gaps[:, 1:]
    residuals = per_rep.mean(axis=0) + const
    se = per_rep.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(T1 - 1)
    return OneStepResult(residuals, se, residuals >= -n_se * se)


def theorem2_envelope(c: AnalysisConstants, initial_gap: float) -> tuple[float, Callable]:
    """``nu`` and the envelope ``t -> nu / (t + alpha)``."""
    if not c.gamma > 1.0 / c.mu:
        raise HypothesisViolated(f"gamma > 1/mu fails: gamma={c.gamma}, 1/mu={1.0 / c.mu}")
    if c.alpha < c.gamma * c.beta**2 / c.mu:
        raise HypothesisViolated(f"alpha >= gamma*beta^2/mu fails: alpha={c.alpha}")
    if not c.alpha > 1.0:
        raise HypothesisViolated(f"alpha > 1 fails: alpha={c.alpha}")
    if c.tau < 1:
        raise HypothesisViolated(f"tau >= 1 fails: tau={c.tau}")
    b, g = c.beta, c.gamma
    Z = 0.5 * (c.sigma2 / b + 2.0 * c.phi**2 / b)
    if c.tau > 1:
        Z += (
            24.0 / c.rho_min * b * g * (c.tau - 1) * (1.0 + (c.tau - 2) / c.alpha)
            * (1.0 + (c.tau - 1) / (c.alpha - 1.0)) ** (4.0 * b * g)
            * (c.sigma2 / b + c.phi**2 / b + c.delta**2 / b)
        )
    nu = max(b**2 * g**2 * Z / (c.mu * g - 1.0), c.alpha * initial_gap)
    return nu, lambda t: nu / (np.asarray(t, dtype=np.float64) + c.alpha)


def envelope_z(c: AnalysisConstants) -> float:
    """The ``Z`` term alone, for reporting."""
    nu, _ = theorem2_envelope(c, 0.0)
    return nu * (c.mu * c.gamma - 1.0) / (c.beta**2 * c.gamma**2)


def resource_accounting(
    trace: Sequence[TraceRecord],
    rmodel: ResourceModel,
    cluster_sizes: Sequence[int] | Sequence,
    participation: str = SAMPLED,
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative energy and delay per step; also stored on the records.

    D2D rounds in different clusters run in parallel, so a step's D2D delay
    is set by the busiest cluster.  Each aggregation costs one uplink per
    transmitting device and one shared delay ``d_glob``.
    """
    sizes = np.array([getattr(s, "s_c", s) for s in cluster_sizes], dtype=np.float64)
    if participation == FULL:
        uplinks = sizes.sum()
    elif participation == SAMPLED:
        uplinks = float(len(sizes))
    else:
        raise ValueError(f"unknown participation {participation!r}")
    energy = np.empty(len(trace))
    delay = np.empty(len(trace))
    e = d = 0.0
    for k, rec in enumerate(trace):
        rounds = np.asarray(rec.gamma_rounds, dtype=np.float64)
        e += float(rounds @ sizes) * rmodel.e_d2d
        d += float(rounds.max(initial=0.0)) * rmodel.d_d2d
        if rec.aggregated:
            e += uplinks * rmodel.e_glob
            d += rmodel.d_glob
        energy[k] = e
        delay[k] = d
        rec.cum_energy = e
        rec.cum_delay = d
    return energy, delay


NOT_REACHED = None


def time_to_accuracy(trace_or_values, target_fraction: float, metric: str = "accuracy"):
    """First position at which ``metric >= target_fraction * peak``.

    Accepts a trace (records are read by ``metric``) or a plain sequence.
    Returns ``NOT_REACHED`` (``None``) when the target exceeds the run's peak.
    """
    if not 0.0 < target_fraction:
        raise ValueError("target_fraction must be positive")
    seq = list(trace_or_values)
    if seq and isinstance(seq[0], TraceRecord):
        vals = trace_array(seq, metric).astype(np.float64)
    else:
        vals = np.asarray(seq, dtype=np.float64)
    if vals.size == 0 or not np.any(np.isfinite(vals)):
        return NOT_REACHED
    peak = np.nanmax(vals)
    hit = np.flatnonzero(vals >= target_fraction * peak)
    return int(hit[0]) if hit.size else NOT_REACHED


def cost_to_accuracy(trace, costs: np.ndarray, target_fraction: float, metric: str = "accuracy"):
    """Cumulative cost at the time the target is first reached (``None`` if never)."""
    k = time_to_accuracy(trace, target_fraction, metric)
    return None if k is None else float(costs[k])


def replicate_matrix(traces: Sequence[Sequence[TraceRecord]], name: str) -> np.ndarray:
    return np.array([trace_array(tr, name) for tr in traces], dtype=np.float64)
