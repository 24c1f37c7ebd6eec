"""
Seeded synthetic data streams.

Every batch comes from its own generator, keyed on (seed, agent, iteration,
purpose) through numpy's SeedSequence. No generator state is shared between
calls, so batches can be drawn in any order and from any process.
"""
import csv
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from services.errors import DimensionMismatchError
from services.regression import DataBatch, ProblemSpec

MAX_SEED = 2 ** 64


class StreamPurpose(IntEnum):
    DATA = 0
    POLICY = 1
    POOL = 2


@dataclass(frozen=True, eq=False)
class StreamConfig:
    spec: ProblemSpec
    batch_size: int = 5
    num_agents: int = 2
    seed: int = 0
    pool_size: Optional[int] = None  # None: fresh i.i.d. samples every iteration

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.num_agents < 1:
            raise ValueError(f"num_agents must be >= 1, got {self.num_agents}")
        if not 0 <= self.seed < MAX_SEED:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.pool_size is not None and self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1 when set, got {self.pool_size}")

    def with_seed(self, seed: int) -> "StreamConfig":
        return StreamConfig(
            spec=self.spec,
            batch_size=self.batch_size,
            num_agents=self.num_agents,
            seed=seed,
            pool_size=self.pool_size,
        )


def stream_rng(cfg: StreamConfig, agent: int, iteration: int, purpose: StreamPurpose) -> np.random.Generator:
    """Fresh generator for one (seed, agent, iteration, purpose) key."""
    if not 0 <= agent < cfg.num_agents:
        raise IndexError(f"agent {agent} out of range for {cfg.num_agents} agents")
    if iteration < 0:
        raise IndexError(f"iteration must be >= 0, got {iteration}")
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, agent, iteration, int(purpose)]))


def policy_rng(cfg: StreamConfig, agent: int, iteration: int) -> np.random.Generator:
    return stream_rng(cfg, agent, iteration, StreamPurpose.POLICY)


def _gaussian_samples(spec: ProblemSpec, rng: np.random.Generator, shape: Tuple[int, ...]):
    z = rng.standard_normal(shape + (spec.dim,))
    features = z @ spec.cholesky_factor.T
    noise = rng.standard_normal(shape)
    labels = features @ spec.true_weights + spec.noise_std * noise
    return features, labels


def _agent_pool(cfg: StreamConfig, agent: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = stream_rng(cfg, agent, 0, StreamPurpose.POOL)
    return _gaussian_samples(cfg.spec, rng, (cfg.pool_size,))


def draw_batch(cfg: StreamConfig, agent: int, iteration: int) -> DataBatch:
    """
    Batch of N samples for one agent at one iteration.

    Features are N(0, E[xx^T]) through the Cholesky factor, labels are
    x^T w* plus Gaussian noise of std noise_std. With pool_size set, rows are
    resampled with replacement from the agent's fixed pool instead.
    """
    rng = stream_rng(cfg, agent, iteration, StreamPurpose.DATA)
    if cfg.pool_size is None:
        features, labels = _gaussian_samples(cfg.spec, rng, (cfg.batch_size,))
    else:
        pool_features, pool_labels = _agent_pool(cfg, agent)
        rows = rng.integers(0, cfg.pool_size, size=cfg.batch_size)
        features, labels = pool_features[rows], pool_labels[rows]
    return DataBatch(features=features, labels=labels)


def sample_batches(spec: ProblemSpec, batch_size: int, count: int, rng: np.random.Generator):
    """count independent batches stacked as (count, N, n) features and (count, N) labels."""
    if batch_size < 1 or count < 1:
        raise ValueError(f"batch_size and count must be >= 1, got {batch_size}, {count}")
    return _gaussian_samples(spec, rng, (count, batch_size))


def empirical_second_moment(batch: DataBatch) -> np.ndarray:
    """(1/N) sum_i x_i x_i^T, the data estimate of the Hessian."""
    moment = batch.features.T @ batch.features / batch.size
    return (moment + moment.T) / 2.0


def write_batches_csv(
    path: Path,
    cfg: StreamConfig,
    agents: Iterable[int],
    iterations: Iterable[int],
) -> int:
    """
    Dump batches as CSV with header agent,iteration,sample,x0..x{n-1},y.

    Values are written with repr() so a reload is bit-exact. Returns the row count.
    """
    path = Path(path)
    header = ["agent", "iteration", "sample"] + [f"x{j}" for j in range(cfg.spec.dim)] + ["y"]
    rows = 0
    iterations = list(iterations)
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for agent in agents:
            for iteration in iterations:
                batch = draw_batch(cfg, agent, iteration)
                for sample, (x, y) in enumerate(zip(batch.features, batch.labels)):
                    writer.writerow([agent, iteration, sample] + [repr(float(v)) for v in x] + [repr(float(y))])
                    rows += 1
    return rows


def read_batches_csv(path: Path) -> Dict[Tuple[int, int], DataBatch]:
    """Load a CSV written by write_batches_csv, keyed by (agent, iteration)."""
    grouped: Dict[Tuple[int, int], list] = {}
    with Path(path).open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:3] != ["agent", "iteration", "sample"] or header[-1] != "y":
            raise DimensionMismatchError(f"unexpected batch CSV header: {header}")
        for row in reader:
            key = (int(row[0]), int(row[1]))
            grouped.setdefault(key, []).append((int(row[2]), [float(v) for v in row[3:]]))

    batches = {}
    for key, samples in grouped.items():
        samples.sort(key=lambda item: item[0])
        values = np.array([values for _, values in samples])
        batches[key] = DataBatch(features=values[:, :-1], labels=values[:, -1])
    return batches
