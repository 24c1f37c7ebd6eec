"""
Monte-Carlo and closed-form checks of the convergence and communication bounds.

Expectation bounds pass when observed <= bound + 3 standard errors;
almost-sure bounds pass only when observed <= bound with no slack.

The stochastic-gradient covariance G entering the noise floor depends on the
iterate in reality. By default it is estimated at w*, where the theory treats
it as constant; g_mode="worst_case" estimates it along sampled trajectories and
keeps the entrywise maximum instead.
"""
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np
from loguru import logger

from services.data_stream import sample_batches
from services.errors import NonContractiveError
from services.policies import OracleGain, estimated_gains, exact_gains
from services.regression import (
    ProblemSpec,
    WeightVector,
    objective,
    objective_many,
    spectral_constants,
    stochastic_gradients,
)
from services.simulator import RunConfig, RunTrace, replication_seeds, run_many

SE_SLACK = 3.0
MIN_APPENDIX_SAMPLES = 10_000
SAMPLE_CHUNK_ELEMENTS = 2_000_000
G_SEED_TAG = 0x47  # keeps G draws apart from every run stream
WORST_CASE_POINTS = 64

Runner = Callable[[RunConfig, Sequence[int]], List[RunTrace]]


class Verdict(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    SKIPPED = "SKIPPED"
    NOT_APPLICABLE = "NOT-APPLICABLE"
    ERROR = "ERROR"
    REPORT_ONLY = "REPORT-ONLY"


class BoundKind(str, Enum):
    EXPECTATION = "expectation"
    ALMOST_SURE = "almost_sure"


@dataclass(frozen=True)
class TheoremReport:
    check: str
    kind: BoundKind
    bound_value: float
    observed_value: float
    margin: float
    replications: int
    standard_error: float
    passed: bool
    verdict: Verdict
    message: str = ""

    @property
    def counts_as_failure(self) -> bool:
        return self.verdict in (Verdict.FAIL, Verdict.ERROR)

    def to_row(self) -> dict:
        row = asdict(self)
        row["kind"] = self.kind.value
        row["verdict"] = self.verdict.value
        return row


@dataclass(frozen=True, eq=False)
class GEstimate:
    cov_matrix: np.ndarray
    num_samples: int
    eval_point: np.ndarray


def _status_report(check: str, kind: BoundKind, verdict: Verdict, message: str) -> TheoremReport:
    logger.info(f"ℹ️  {check}: {verdict.value} ({message})")
    return TheoremReport(
        check=check,
        kind=kind,
        bound_value=float("nan"),
        observed_value=float("nan"),
        margin=float("nan"),
        replications=0,
        standard_error=float("nan"),
        passed=False,
        verdict=verdict,
        message=message,
    )


def _graded_report(
    check: str,
    kind: BoundKind,
    bound: float,
    observed: float,
    replications: int,
    standard_error: float,
    report_only: bool = False,
    message: str = "",
) -> TheoremReport:
    if kind == BoundKind.EXPECTATION:
        passed = observed <= bound + SE_SLACK * standard_error
    else:
        passed = observed <= bound
    verdict = Verdict.REPORT_ONLY if report_only else (Verdict.PASS if passed else Verdict.FAIL)
    report = TheoremReport(
        check=check,
        kind=kind,
        bound_value=float(bound),
        observed_value=float(observed),
        margin=float(bound - observed),
        replications=int(replications),
        standard_error=float(standard_error),
        passed=bool(passed),
        verdict=verdict,
        message=message,
    )
    icon = "✅" if passed else "❌"
    logger.info(f"{icon} {check}: observed={observed:.6g} bound={bound:.6g} se={standard_error:.3g} -> {verdict.value}")
    return report


def _mean_and_se(values: np.ndarray):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def _chunk_size(batch_size: int, dim: int) -> int:
    return max(1, SAMPLE_CHUNK_ELEMENTS // (batch_size * dim))


def estimate_G(
    spec: ProblemSpec,
    batch_size: int,
    w: WeightVector,
    samples: int,
    rng: np.random.Generator,
) -> GEstimate:
    """Empirical covariance of the stochastic gradient over independent batches at fixed w."""
    if samples < 2:
        raise ValueError(f"estimate_G needs at least 2 samples, got {samples}")
    w = np.asarray(w, dtype=np.float64)
    chunk = _chunk_size(batch_size, spec.dim)

    shift = None
    total = np.zeros(spec.dim)
    outer = np.zeros((spec.dim, spec.dim))
    remaining = samples
    while remaining > 0:
        count = min(chunk, remaining)
        features, labels = sample_batches(spec, batch_size, count, rng)
        grads = stochastic_gradients(features, labels, w)
        if shift is None:
            shift = grads.mean(axis=0)
        centred = grads - shift
        total += centred.sum(axis=0)
        outer += centred.T @ centred
        remaining -= count

    mean = total / samples
    cov = (outer - samples * np.outer(mean, mean)) / (samples - 1)
    cov = (cov + cov.T) / 2.0
    return GEstimate(cov_matrix=cov, num_samples=samples, eval_point=w.copy())


def estimate_G_worst_case(
    spec: ProblemSpec,
    batch_size: int,
    points: np.ndarray,
    samples: int,
    rng: np.random.Generator,
) -> GEstimate:
    """Entrywise maximum of estimate_G over the given points; eval_point is the one with the largest trace."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    estimates = [estimate_G(spec, batch_size, p, samples, rng) for p in points]
    stacked = np.stack([e.cov_matrix for e in estimates])
    heaviest = int(np.argmax(np.trace(stacked, axis1=1, axis2=2)))
    return GEstimate(
        cov_matrix=stacked.max(axis=0),
        num_samples=samples * len(estimates),
        eval_point=points[heaviest].copy(),
    )


def theorem1_bound(
    spec: ProblemSpec,
    eps: float,
    lam: float,
    w0: WeightVector,
    K: int,
    alpha_means: np.ndarray,
    G: GEstimate,
) -> float:
    """
    rho^K J(w0) + (1 - rho^K)[J(w*) + eps^2 Tr(Sigma_x G)/(1 - rho)]
        + lam * sum_{l=0}^{K} rho^(K-l) * mean_i E(1 - alpha_l^i)

    alpha_means holds E(1 - alpha_l^i) with one row per iteration l (and one
    column per agent, or a single column already averaged). Rows past K are
    ignored; missing rows contribute nothing. K = 0 returns J(w0).
    """
    constants = spectral_constants(spec, eps)
    if not constants.contractive:
        raise NonContractiveError(f"rho={constants.rho:.6g} >= 1 for eps={eps}")
    rho = constants.rho

    j0 = objective(spec, w0)
    if K == 0:
        return j0

    noise = eps ** 2 * float(np.trace(constants.sigma_x @ G.cov_matrix))
    alpha = np.asarray(alpha_means, dtype=np.float64)
    per_step = alpha.mean(axis=1) if alpha.ndim == 2 else alpha.reshape(-1)
    per_step = per_step[: K + 1]
    discounts = rho ** (K - np.arange(per_step.size))

    contraction = rho ** K
    return float(
        contraction * j0
        + (1.0 - contraction) * (spec.optimal_objective + noise / (1.0 - rho))
        + lam * np.sum(discounts * per_step)
    )


def _g_estimate(
    cfg: RunConfig,
    traces: Sequence[RunTrace],
    g_mode: str,
    g_samples: int,
) -> GEstimate:
    spec = cfg.spec
    rng = np.random.default_rng(np.random.SeedSequence([cfg.stream.seed, G_SEED_TAG]))
    if g_mode == "optimum":
        return estimate_G(spec, cfg.stream.batch_size, spec.true_weights, g_samples, rng)
    if g_mode == "worst_case":
        points = np.concatenate([t.weights for t in traces[: max(1, WORST_CASE_POINTS // 8)]])
        if len(points) > WORST_CASE_POINTS:
            points = points[np.linspace(0, len(points) - 1, WORST_CASE_POINTS).astype(int)]
        per_point = max(2, g_samples // len(points))
        return estimate_G_worst_case(spec, cfg.stream.batch_size, points, per_point, rng)
    raise ValueError(f"unknown g_mode '{g_mode}' (expected 'optimum' or 'worst_case')")


def _precondition(cfg: RunConfig, check: str) -> Optional[TheoremReport]:
    if not isinstance(cfg.policy, OracleGain):
        return _status_report(
            check,
            BoundKind.EXPECTATION,
            Verdict.SKIPPED,
            f"the bound is proved for the exact-gain trigger only, policy is {cfg.policy.name}",
        )
    constants = spectral_constants(cfg.spec, cfg.eps)
    if cfg.eps >= constants.eps_max or not constants.contractive:
        return _status_report(
            check,
            BoundKind.EXPECTATION,
            Verdict.ERROR,
            f"eps={cfg.eps} >= eps_max={constants.eps_max:.6g}: no verdict",
        )
    return None


def verify_theorem1(
    cfg: RunConfig,
    replications: int,
    runner: Runner = run_many,
    g_mode: str = "optimum",
    g_samples: int = 100_000,
) -> TheoremReport:
    """
    Mean J(w_K) over seeded replications against the finite-horizon bound.

    Runs K+1 steps so the decisions at iteration K exist for the l = K term;
    w_K itself does not depend on them.
    """
    check = "theorem1"
    blocked = _precondition(cfg, check)
    if blocked is not None:
        return blocked

    K = cfg.num_iterations
    traces = runner(cfg.replace(num_iterations=K + 1), replication_seeds(cfg.stream.seed, replications))
    observed, se = _mean_and_se([t.objective[K] for t in traces])
    alpha_means = 1.0 - np.mean([t.transmit[: K + 1] for t in traces], axis=0)

    G = _g_estimate(cfg, traces, g_mode, g_samples)
    bound = theorem1_bound(cfg.spec, cfg.eps, cfg.policy.lam, cfg.initial_weights, K, alpha_means, G)
    return _graded_report(check, BoundKind.EXPECTATION, bound, observed, len(traces), se, message=f"G at {g_mode}")


def limsup_bound(spec: ProblemSpec, eps: float, lam: float, G: GEstimate) -> float:
    """J(w*) + (lam + eps^2 Tr(Sigma_x G)) / (1 - rho)."""
    constants = spectral_constants(spec, eps)
    if not constants.contractive:
        raise NonContractiveError(f"rho={constants.rho:.6g} >= 1 for eps={eps}")
    noise = eps ** 2 * float(np.trace(constants.sigma_x @ G.cov_matrix))
    return spec.optimal_objective + (lam + noise) / (1.0 - constants.rho)


def verify_limsup(
    cfg: RunConfig,
    replications: int,
    burn_in: int,
    runner: Runner = run_many,
    g_mode: str = "optimum",
    g_samples: int = 100_000,
) -> TheoremReport:
    """Steady-state level: per-run mean of J(w_k) over k in [burn_in, K], averaged over runs."""
    check = "limsup"
    blocked = _precondition(cfg, check)
    if blocked is not None:
        return blocked
    if not 0 <= burn_in < cfg.num_iterations:
        return _status_report(
            check,
            BoundKind.EXPECTATION,
            Verdict.ERROR,
            f"burn_in={burn_in} must lie in [0, num_iterations={cfg.num_iterations})",
        )

    traces = runner(cfg, replication_seeds(cfg.stream.seed, replications))
    tails = [t.objective[burn_in:].mean() for t in traces]
    observed, se = _mean_and_se(tails)

    G = _g_estimate(cfg, traces, g_mode, g_samples)
    bound = limsup_bound(cfg.spec, cfg.eps, cfg.policy.lam, G)
    return _graded_report(
        check, BoundKind.EXPECTATION, bound, observed, len(traces), se, message=f"burn_in={burn_in}, G at {g_mode}"
    )


def theorem2_bound(spec: ProblemSpec, w0: WeightVector, lam: float) -> float:
    """(J(w0) - J(w*)) / lam."""
    return (objective(spec, w0) - spec.optimal_objective) / lam


def verify_theorem2(trace: RunTrace, spec: ProblemSpec, lam: float) -> TheoremReport:
    """Almost-sure communication budget of one oracle run: sum_k max_i alpha_k^i <= (J(w0) - J(w*))/lam."""
    check = "theorem2"
    if not trace.policy.startswith(OracleGain.name):
        return _status_report(check, BoundKind.ALMOST_SURE, Verdict.SKIPPED, f"trace policy is {trace.policy}")
    if lam <= 0:
        return _status_report(check, BoundKind.ALMOST_SURE, Verdict.NOT_APPLICABLE, "lambda=0, the bound is infinite")
    bound = theorem2_bound(spec, trace.weights[0], lam)
    return _graded_report(check, BoundKind.ALMOST_SURE, bound, trace.any_agent_transmits, 1, 0.0)


def verify_theorem2_ensemble(traces: Sequence[RunTrace], spec: ProblemSpec, lam: float) -> TheoremReport:
    """verify_theorem2 on every run; passes only if every run passes. Reports the worst run."""
    check = "theorem2"
    if not traces:
        return _status_report(check, BoundKind.ALMOST_SURE, Verdict.ERROR, "no traces")
    if not all(t.policy.startswith(OracleGain.name) for t in traces):
        return _status_report(check, BoundKind.ALMOST_SURE, Verdict.SKIPPED, "policy is not oracle_gain")
    if lam <= 0:
        return _status_report(check, BoundKind.ALMOST_SURE, Verdict.NOT_APPLICABLE, "lambda=0, the bound is infinite")

    slack = [theorem2_bound(spec, t.weights[0], lam) - t.any_agent_transmits for t in traces]
    worst = int(np.argmin(slack))
    violations = sum(1 for s in slack if s < 0)
    bound = theorem2_bound(spec, traces[worst].weights[0], lam)
    return _graded_report(
        check,
        BoundKind.ALMOST_SURE,
        bound,
        traces[worst].any_agent_transmits,
        len(traces),
        0.0,
        message=f"{violations} violations in {len(traces)} runs",
    )


def verify_theorem2_runs(cfg: RunConfig, replications: int, runner: Runner = run_many) -> TheoremReport:
    """Seeded oracle runs of cfg checked with verify_theorem2_ensemble."""
    check = "theorem2"
    if not isinstance(cfg.policy, OracleGain):
        return _status_report(check, BoundKind.ALMOST_SURE, Verdict.SKIPPED, f"policy is {cfg.policy.name}")
    if cfg.policy.lam <= 0:
        return _status_report(check, BoundKind.ALMOST_SURE, Verdict.NOT_APPLICABLE, "lambda=0, the bound is infinite")
    traces = runner(cfg, replication_seeds(cfg.stream.seed, replications))
    return verify_theorem2_ensemble(traces, cfg.spec, cfg.policy.lam)


def _appendix_report(check: str, alpha: np.ndarray, j_after: np.ndarray, report_only: bool, message: str):
    alpha = alpha.astype(np.float64)
    observed = float(np.mean(alpha * j_after))
    alpha_bar = float(alpha.mean())
    j_bar = float(j_after.mean())
    bound = alpha_bar * j_bar
    centred = (alpha - alpha_bar) * (j_after - j_bar)
    se = float(centred.std(ddof=1) / np.sqrt(centred.size))
    return _graded_report(
        check, BoundKind.EXPECTATION, bound, observed, alpha.size, se, report_only=report_only, message=message
    )


def verify_appendix_inequality(
    spec: ProblemSpec,
    w: WeightVector,
    eps: float,
    lam: float,
    samples: int,
    rng: np.random.Generator,
    batch_size: int = 5,
    gain: str = "exact",
    gradient_sampler: Optional[Callable[[int, np.random.Generator], np.ndarray]] = None,
) -> TheoremReport:
    """
    E[alpha(g) J(w - eps g)] <= E[alpha(g)] E[J(w - eps g)] over fresh gradients g at fixed w.

    alpha(g) is the exact-gain trigger; gain="estimated" uses the batch estimate
    instead and is recorded as REPORT-ONLY since nothing guarantees it.
    gradient_sampler(count, rng) replaces the model's stochastic gradients
    (exact gain only).
    """
    if samples < MIN_APPENDIX_SAMPLES:
        raise ValueError(f"need at least {MIN_APPENDIX_SAMPLES} samples, got {samples}")
    if gain not in ("exact", "estimated"):
        raise ValueError(f"gain must be 'exact' or 'estimated', got '{gain}'")
    if gradient_sampler is not None and gain != "exact":
        raise ValueError("a custom gradient sampler only supports the exact gain")
    w = np.asarray(w, dtype=np.float64)

    alphas, values = [], []
    chunk = _chunk_size(batch_size, spec.dim)
    remaining = samples
    while remaining > 0:
        count = min(chunk, remaining)
        if gradient_sampler is not None:
            grads = np.asarray(gradient_sampler(count, rng), dtype=np.float64).reshape(count, spec.dim)
            gains = exact_gains(spec, w, grads, eps)
        else:
            features, labels = sample_batches(spec, batch_size, count, rng)
            grads = stochastic_gradients(features, labels, w)
            gains = exact_gains(spec, w, grads, eps) if gain == "exact" else estimated_gains(features, grads, eps)
        alphas.append(gains <= -lam)
        values.append(objective_many(spec, w - eps * grads))
        remaining -= count

    return _appendix_report(
        f"appendix[{gain}]",
        np.concatenate(alphas),
        np.concatenate(values),
        report_only=gain != "exact",
        message=f"lambda={lam:g}, w={np.array2string(w, precision=4)}",
    )


def appendix_inequality_exact(
    spec: ProblemSpec,
    w: WeightVector,
    eps: float,
    lam: float,
    support: np.ndarray,
    probs: np.ndarray,
) -> TheoremReport:
    """Both sides of the appendix inequality for a finitely supported gradient law, by enumeration."""
    support = np.atleast_2d(np.asarray(support, dtype=np.float64))
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (support.shape[0],) or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
        raise ValueError("probs must be a probability vector matching the support")

    w = np.asarray(w, dtype=np.float64)
    alpha = (exact_gains(spec, w, support, eps) <= -lam).astype(np.float64)
    j_after = objective_many(spec, w - eps * support)
    observed = float(np.sum(probs * alpha * j_after))
    bound = float(np.sum(probs * alpha) * np.sum(probs * j_after))
    # Enumeration is exact up to rounding
    tolerance = 1e-12 * max(1.0, abs(bound))
    return _graded_report(
        "appendix[enumerated]", BoundKind.ALMOST_SURE, bound + tolerance, observed, support.shape[0], 0.0
    )


def format_verdict_block(reports: Sequence[TheoremReport]) -> str:
    """Fixed-width verdict table for verify.txt."""
    header = f"{'check':<22} {'verdict':<15} {'observed':>14} {'bound':>14} {'margin':>14} {'se':>11} {'reps':>7}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.check:<22} {r.verdict.value:<15} {r.observed_value:>14.6g} {r.bound_value:>14.6g} "
            f"{r.margin:>14.6g} {r.standard_error:>11.3g} {r.replications:>7d}"
        )
        if r.message:
            lines.append(f"{'':<22} {r.message}")
    failed = sum(1 for r in reports if r.counts_as_failure)
    lines.append("")
    lines.append("ALL APPLICABLE CHECKS PASS" if failed == 0 else f"{failed} CHECK(S) FAILED")
    return "\n".join(lines) + "\n"
