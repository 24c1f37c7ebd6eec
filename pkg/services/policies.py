"""
Per-agent transmit decisions.

Gain policies transmit when applying the agent's gradient would lower the
objective by at least lambda (gain <= -lambda, ties transmit). The oracle
computes the gain with the true data law, the estimated variant only with the
agent's current batch. GradNorm is the gradient-magnitude baseline; Always,
Never and Random are controls.
"""
from dataclasses import dataclass
from typing import ClassVar, Optional, Union

import numpy as np
from loguru import logger

from services.errors import DimensionMismatchError, PolicyInputError
from services.regression import DataBatch, ProblemSpec, WeightVector, true_gradient


def _warn_zero_lambda(name: str, lam: float):
    if lam < 0:
        raise ValueError(f"{name}: lambda must be >= 0, got {lam}")
    if lam == 0:
        logger.warning(f"⚠️  {name} with lambda=0: the communication budget bound degenerates")


@dataclass(frozen=True)
class OracleGain:
    lam: float
    name: ClassVar[str] = "oracle_gain"

    def __post_init__(self):
        _warn_zero_lambda(self.name, self.lam)


@dataclass(frozen=True)
class EstimatedGain:
    lam: float
    name: ClassVar[str] = "estimated_gain"

    def __post_init__(self):
        _warn_zero_lambda(self.name, self.lam)


@dataclass(frozen=True)
class GradNorm:
    mu: float
    name: ClassVar[str] = "grad_norm"

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"grad_norm: mu must be >= 0, got {self.mu}")


@dataclass(frozen=True)
class Always:
    name: ClassVar[str] = "always"


@dataclass(frozen=True)
class Never:
    name: ClassVar[str] = "never"


@dataclass(frozen=True)
class Random:
    p: float
    name: ClassVar[str] = "random"

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"random: p must lie in [0, 1], got {self.p}")


PolicyKind = Union[OracleGain, EstimatedGain, GradNorm, Always, Never, Random]

GAIN_POLICIES = (OracleGain, EstimatedGain)


@dataclass(frozen=True)
class PolicyDecision:
    transmit: bool
    score: float
    threshold: float


@dataclass(frozen=True, eq=False)
class PolicyInputs:
    """Everything an agent may consult at one iteration."""

    eps: float
    w: WeightVector
    g: Optional[np.ndarray] = None
    batch: Optional[DataBatch] = None
    spec: Optional[ProblemSpec] = None


def make_policy(kind: str, lam: float = 0.1, mu: float = 1.0, p: float = 0.5) -> PolicyKind:
    """Build a policy from its config tag and parameters."""
    if kind == OracleGain.name:
        return OracleGain(lam=lam)
    if kind == EstimatedGain.name:
        return EstimatedGain(lam=lam)
    if kind == GradNorm.name:
        return GradNorm(mu=mu)
    if kind == Always.name:
        return Always()
    if kind == Never.name:
        return Never()
    if kind == Random.name:
        return Random(p=p)
    raise PolicyInputError(f"unknown policy kind '{kind}'", field="policy.kind")


def policy_label(kind: PolicyKind) -> str:
    """Human-readable label used in CSV rows and plot legends."""
    match kind:
        case OracleGain(lam=lam):
            return f"oracle_gain(lambda={lam:g})"
        case EstimatedGain(lam=lam):
            return f"estimated_gain(lambda={lam:g})"
        case GradNorm(mu=mu):
            return f"grad_norm(mu={mu:g})"
        case Random(p=p):
            return f"random (control, p={p:g})"
        case _:
            return kind.name


def exact_gain(spec: ProblemSpec, w: WeightVector, g: np.ndarray, eps: float) -> float:
    """
    J(w - eps g) - J(w) = -eps g^T grad J(w) + 1/2 eps^2 g^T E[xx^T] g.

    Exact because J is quadratic.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (spec.dim,):
        raise DimensionMismatchError(f"g has shape {g.shape}, expected ({spec.dim},)")
    grad = true_gradient(spec, w)
    return float(-eps * (g @ grad) + 0.5 * eps ** 2 * (g @ spec.feature_cov @ g))


def estimated_gain(batch: DataBatch, g: np.ndarray, eps: float) -> float:
    """
    -eps g^T [I - eps/2 * 1/N sum_i x_i x_i^T] g from the batch alone.

    g^T (sum_i x_i x_i^T) g is accumulated as sum_i (x_i^T g)^2.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (batch.dim,):
        raise DimensionMismatchError(f"g has shape {g.shape}, batch has dim {batch.dim}")
    projections = batch.features @ g
    curvature = float(np.mean(projections ** 2))
    return float(-eps * (g @ g - 0.5 * eps * curvature))


def exact_gains(spec: ProblemSpec, w: WeightVector, gradients: np.ndarray, eps: float) -> np.ndarray:
    """exact_gain for each row of an (M, n) gradient array."""
    gradients = np.asarray(gradients, dtype=np.float64)
    grad = true_gradient(spec, w)
    curvature = np.einsum("mi,ij,mj->m", gradients, spec.feature_cov, gradients)
    return -eps * (gradients @ grad) + 0.5 * eps ** 2 * curvature


def estimated_gains(features: np.ndarray, gradients: np.ndarray, eps: float) -> np.ndarray:
    """estimated_gain for M stacked batches (M, N, n) and their gradients (M, n)."""
    projections = np.einsum("mkn,mn->mk", features, gradients)
    curvature = np.mean(projections ** 2, axis=1)
    return -eps * (np.einsum("mn,mn->m", gradients, gradients) - 0.5 * eps * curvature)


def decide(kind: PolicyKind, inputs: PolicyInputs, rng: Optional[np.random.Generator] = None) -> PolicyDecision:
    """Transmit decision of one agent under the given policy."""
    match kind:
        case OracleGain(lam=lam):
            if inputs.spec is None or inputs.g is None:
                raise PolicyInputError("oracle_gain needs the problem spec and the gradient", field="policy.kind")
            score = exact_gain(inputs.spec, inputs.w, inputs.g, inputs.eps)
            return PolicyDecision(transmit=score <= -lam, score=score, threshold=-lam)
        case EstimatedGain(lam=lam):
            if inputs.batch is None or inputs.g is None:
                raise PolicyInputError("estimated_gain needs the batch and the gradient", field="policy.kind")
            score = estimated_gain(inputs.batch, inputs.g, inputs.eps)
            return PolicyDecision(transmit=score <= -lam, score=score, threshold=-lam)
        case GradNorm(mu=mu):
            if inputs.g is None:
                raise PolicyInputError("grad_norm needs the gradient", field="policy.kind")
            g = np.asarray(inputs.g, dtype=np.float64)
            score = float(g @ g)
            return PolicyDecision(transmit=score >= mu, score=score, threshold=mu)
        case Always():
            return PolicyDecision(transmit=True, score=0.0, threshold=0.0)
        case Never():
            return PolicyDecision(transmit=False, score=0.0, threshold=0.0)
        case Random(p=p):
            if rng is None:
                raise PolicyInputError("random policy needs a generator", field="policy.kind")
            draw = float(rng.random())
            return PolicyDecision(transmit=draw < p, score=draw, threshold=p)
    raise PolicyInputError(f"unsupported policy {kind!r}", field="policy.kind")
