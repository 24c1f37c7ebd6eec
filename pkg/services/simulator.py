"""
Server-side iteration loop.

At each iteration the server broadcasts w_k, every agent draws its batch,
computes its stochastic gradient and decides whether to transmit it; the
server averages the gradients it received:

    w_{k+1} = w_k                                  if nobody transmits
    w_{k+1} = w_k - eps * mean_{i in T} g_k^i      otherwise

For two agents this is the four-case update rule (one, the other, both with
eps/2 weights, none).
"""
import copy
import json
from dataclasses import dataclass, replace as dataclass_replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from config.settings import settings
from services.data_stream import StreamConfig, draw_batch, policy_rng
from services.errors import ConfigError, DimensionMismatchError
from services.policies import (
    PolicyDecision,
    PolicyInputs,
    PolicyKind,
    Random,
    decide,
    policy_label,
)
from services.regression import (
    DataBatch,
    ProblemSpec,
    WeightVector,
    objective,
    spectral_constants,
    stochastic_gradient,
    true_gradient,
)

TRACE_SCHEMA = "fedgain-sim v1"


class GradientMode(str, Enum):
    STOCHASTIC = "stochastic"
    EXACT = "exact"  # true_gradient injected in place of the batch gradient


class RunStatus(str, Enum):
    COMPLETED = "completed"
    DIVERGED = "diverged"


@dataclass(frozen=True, eq=False)
class RunConfig:
    stream: StreamConfig
    policy: PolicyKind
    eps: float = 0.1
    num_iterations: int = 10
    initial_weights: Optional[np.ndarray] = None  # zeros when omitted
    gradient_mode: GradientMode = GradientMode.STOCHASTIC

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.num_iterations < 0:
            raise ValueError(f"num_iterations must be >= 0, got {self.num_iterations}")
        dim = self.stream.spec.dim
        w0 = np.zeros(dim) if self.initial_weights is None else np.array(self.initial_weights, dtype=np.float64)
        if w0.shape != (dim,):
            raise DimensionMismatchError(f"initial_weights has shape {w0.shape}, expected ({dim},)")
        w0.setflags(write=False)
        object.__setattr__(self, "initial_weights", w0)
        object.__setattr__(self, "gradient_mode", GradientMode(self.gradient_mode))
        spectral_constants(self.stream.spec, self.eps)  # warns when eps >= eps_max

    @property
    def spec(self) -> ProblemSpec:
        return self.stream.spec

    @property
    def num_agents(self) -> int:
        return self.stream.num_agents

    def with_seed(self, seed: int) -> "RunConfig":
        # Shallow copy: the rest of the config was validated already
        clone = copy.copy(self)
        object.__setattr__(clone, "stream", self.stream.with_seed(seed))
        return clone

    def replace(self, **changes) -> "RunConfig":
        return dataclass_replace(self, **changes)


@dataclass(eq=False)
class RunTrace:
    """
    Time-indexed record of one seeded run.

    weights and objective have one row per visited iterate (steps + 1);
    gradients, transmit, scores and thresholds have one row per step.
    """

    seed: int
    eps: float
    policy: str
    weights: np.ndarray  # (steps + 1, n)
    objective: np.ndarray  # (steps + 1,)
    gradients: np.ndarray  # (steps, m, n)
    transmit: np.ndarray  # (steps, m) bool
    scores: np.ndarray  # (steps, m)
    thresholds: np.ndarray  # (steps, m)
    status: RunStatus = RunStatus.COMPLETED

    @property
    def num_steps(self) -> int:
        return self.transmit.shape[0]

    @property
    def num_agents(self) -> int:
        return self.transmit.shape[1]

    @property
    def final_weights(self) -> np.ndarray:
        return self.weights[-1]

    @property
    def final_objective(self) -> float:
        return float(self.objective[-1])

    @property
    def per_agent_transmits(self) -> np.ndarray:
        """sum_k alpha_k^i for each agent i."""
        return self.transmit.sum(axis=0)

    @property
    def total_transmits(self) -> int:
        """sum_k sum_i alpha_k^i: every uplink message."""
        return int(self.transmit.sum())

    @property
    def any_agent_transmits(self) -> int:
        """sum_k max_i alpha_k^i: iterations in which the server heard anything."""
        return int(self.transmit.any(axis=1).sum())

    @property
    def diverged(self) -> bool:
        return self.status == RunStatus.DIVERGED

    def decision(self, k: int, agent: int) -> PolicyDecision:
        return PolicyDecision(
            transmit=bool(self.transmit[k, agent]),
            score=float(self.scores[k, agent]),
            threshold=float(self.thresholds[k, agent]),
        )


def apply_update(w: WeightVector, gradients: np.ndarray, transmit: np.ndarray, eps: float) -> np.ndarray:
    """Average the transmitted gradients into one server step; a no-op when nothing arrived."""
    transmit = np.asarray(transmit, dtype=bool)
    if not transmit.any():
        return np.array(w, dtype=np.float64)
    return w - eps * np.mean(gradients[transmit], axis=0)


def step(
    spec: ProblemSpec,
    policy: PolicyKind,
    eps: float,
    w_k: WeightVector,
    batches: Sequence[DataBatch],
    rngs: Optional[Sequence[np.random.Generator]] = None,
    gradient_mode: GradientMode = GradientMode.STOCHASTIC,
) -> Tuple[np.ndarray, List[PolicyDecision], np.ndarray]:
    """One server iteration: per-agent gradients and decisions, then the averaged update."""
    if not batches:
        raise DimensionMismatchError("step needs one batch per agent")
    w_k = np.asarray(w_k, dtype=np.float64)

    gradients = np.empty((len(batches), spec.dim))
    decisions: List[PolicyDecision] = []
    for i, batch in enumerate(batches):
        if gradient_mode == GradientMode.EXACT:
            g = true_gradient(spec, w_k)
        else:
            g = stochastic_gradient(batch, w_k)
        gradients[i] = g
        rng = rngs[i] if rngs is not None else None
        decisions.append(decide(policy, PolicyInputs(eps=eps, w=w_k, g=g, batch=batch, spec=spec), rng))

    transmit = np.array([d.transmit for d in decisions], dtype=bool)
    return apply_update(w_k, gradients, transmit, eps), decisions, gradients


def run(cfg: RunConfig) -> RunTrace:
    """Run cfg.num_iterations steps; deterministic in cfg."""
    spec = cfg.spec
    stream = cfg.stream
    m = stream.num_agents

    w = np.array(cfg.initial_weights, dtype=np.float64)
    weights = [w]
    objectives = [objective(spec, w)]
    gradients, transmit, scores, thresholds = [], [], [], []
    status = RunStatus.COMPLETED

    for k in range(cfg.num_iterations):
        batches = [draw_batch(stream, i, k) for i in range(m)]
        rngs = [policy_rng(stream, i, k) for i in range(m)] if isinstance(cfg.policy, Random) else None
        w, decisions, step_gradients = step(spec, cfg.policy, cfg.eps, w, batches, rngs, cfg.gradient_mode)

        value = objective(spec, w)
        weights.append(w)
        objectives.append(value)
        gradients.append(step_gradients)
        transmit.append([d.transmit for d in decisions])
        scores.append([d.score for d in decisions])
        thresholds.append([d.threshold for d in decisions])

        if not np.isfinite(value) or value > settings.DIVERGENCE_THRESHOLD:
            logger.warning(f"⚠️  Run seed={stream.seed} diverged at step {k}: J={value:.3e}")
            status = RunStatus.DIVERGED
            break

    steps = len(transmit)
    return RunTrace(
        seed=stream.seed,
        eps=cfg.eps,
        policy=policy_label(cfg.policy),
        weights=np.array(weights),
        objective=np.array(objectives),
        gradients=np.array(gradients).reshape(steps, m, spec.dim),
        transmit=np.array(transmit, dtype=bool).reshape(steps, m),
        scores=np.array(scores, dtype=np.float64).reshape(steps, m),
        thresholds=np.array(thresholds, dtype=np.float64).reshape(steps, m),
        status=status,
    )


def replay_check(trace: RunTrace, cfg: RunConfig) -> bool:
    """
    Re-derive every iterate from the recorded gradients and decisions.

    True iff each recomputed w_{k+1} and J(w_k) is bit-identical to the trace.
    """
    steps = trace.num_steps
    if trace.weights.shape != (steps + 1, cfg.spec.dim) or trace.objective.shape != (steps + 1,):
        return False
    if not np.array_equal(trace.weights[0], cfg.initial_weights):
        return False

    for k in range(steps + 1):
        if objective(cfg.spec, trace.weights[k]) != trace.objective[k]:
            return False
        if k == steps:
            break
        w_next = apply_update(trace.weights[k], trace.gradients[k], trace.transmit[k], cfg.eps)
        if not np.array_equal(w_next, trace.weights[k + 1]):
            return False
    return True


def write_trace_log(path: Path, trace: RunTrace) -> None:
    """
    Write a trace as JSON lines.

    Line 1 is a header record. Then one record per iterate k = 0..steps with
    fields in the order k, w, J, transmit, score, threshold, g; the last
    record (k = steps) only has k, w, J.
    """
    path = Path(path)
    header = {
        "record": "header",
        "schema": TRACE_SCHEMA,
        "seed": trace.seed,
        "eps": trace.eps,
        "policy": trace.policy,
        "status": trace.status.value,
        "steps": trace.num_steps,
        "agents": trace.num_agents,
        "dim": trace.weights.shape[1],
    }
    with path.open("w") as f:
        f.write(json.dumps(header) + "\n")
        for k in range(trace.num_steps + 1):
            record = {"k": k, "w": trace.weights[k].tolist(), "J": float(trace.objective[k])}
            if k < trace.num_steps:
                record["transmit"] = trace.transmit[k].tolist()
                record["score"] = trace.scores[k].tolist()
                record["threshold"] = trace.thresholds[k].tolist()
                record["g"] = trace.gradients[k].tolist()
            f.write(json.dumps(record) + "\n")


def read_trace_log(path: Path) -> RunTrace:
    """Inverse of write_trace_log."""
    with Path(path).open() as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("record") != "header":
        raise ValueError(f"{path} is not a trace log")

    header, records = lines[0], lines[1:]
    steps, m, n = header["steps"], header["agents"], header["dim"]
    step_records = records[:steps]
    return RunTrace(
        seed=header["seed"],
        eps=header["eps"],
        policy=header["policy"],
        weights=np.array([r["w"] for r in records], dtype=np.float64).reshape(steps + 1, n),
        objective=np.array([r["J"] for r in records], dtype=np.float64),
        gradients=np.array([r["g"] for r in step_records], dtype=np.float64).reshape(steps, m, n),
        transmit=np.array([r["transmit"] for r in step_records], dtype=bool).reshape(steps, m),
        scores=np.array([r["score"] for r in step_records], dtype=np.float64).reshape(steps, m),
        thresholds=np.array([r["threshold"] for r in step_records], dtype=np.float64).reshape(steps, m),
        status=RunStatus(header["status"]),
    )


def replication_seeds(base_seed: int, replications: int) -> List[int]:
    """Replication r uses seed base + r."""
    if replications < 1:
        raise ConfigError(f"replications must be >= 1, got {replications}", field="replications")
    seeds = [base_seed + r for r in range(replications)]
    if seeds[-1] >= 2 ** 64:
        raise ConfigError(f"seed range {base_seed}..{seeds[-1]} exceeds 64 bits", field="stream.seed")
    return seeds


def run_many(cfg: RunConfig, seeds: Sequence[int]) -> List[RunTrace]:
    """Serial replications, ordered by seed."""
    return [run(cfg.with_seed(seed)) for seed in sorted(seeds)]
