import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import List, Optional, Sequence

from loguru import logger

from config.settings import settings
from services.simulator import RunConfig, RunTrace, run_many


def run_chunk(cfg: RunConfig, seeds: Sequence[int]) -> List[RunTrace]:
    """Pool entry point; module level so it pickles."""
    return run_many(cfg, seeds)


class ReplicationWorker:
    """
    Runs seeded replications of one RunConfig, across a process pool when
    there is enough work. Every seed keys its own streams, so results do not
    depend on which process ran them; traces come back sorted by seed.

    An instance is callable with the (cfg, seeds) signature the theory checks
    expect of a runner.
    """

    def __init__(self, concurrency: Optional[int] = None, chunk_size: Optional[int] = None):
        self.concurrency = concurrency or settings.WORKER_CONCURRENCY
        self.chunk_size = chunk_size or settings.REPLICATION_CHUNK_SIZE
        if self.concurrency < 1 or self.chunk_size < 1:
            raise ValueError(f"concurrency and chunk_size must be >= 1, got {self.concurrency}, {self.chunk_size}")

        # Stats tracking
        self.stats = {'completed': 0, 'diverged': 0}
        self.totals = {'completed': 0, 'diverged': 0}
        self.last_log_time = time.time()

    def __call__(self, cfg: RunConfig, seeds: Sequence[int]) -> List[RunTrace]:
        return self.run_replications(cfg, seeds)

    def run_replications(self, cfg: RunConfig, seeds: Sequence[int]) -> List[RunTrace]:
        seeds = sorted(seeds)
        if self.concurrency == 1 or len(seeds) <= self.chunk_size:
            traces = run_many(cfg, seeds)
            self._record(traces)
        else:
            traces = self._run_pooled(cfg, seeds)
        self._log_stats(force=True)
        return traces

    def _run_pooled(self, cfg: RunConfig, seeds: List[int]) -> List[RunTrace]:
        chunks = [seeds[i:i + self.chunk_size] for i in range(0, len(seeds), self.chunk_size)]
        workers = min(self.concurrency, len(chunks))
        logger.debug(f"🔄 {len(seeds)} replications in {len(chunks)} chunks on {workers} processes")

        traces: List[RunTrace] = []
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(run_chunk, cfg, chunk): chunk for chunk in chunks}
            for future in as_completed(futures):
                chunk = futures[future]
                try:
                    result = future.result()
                except Exception as e:
                    logger.error(f"❌ Replication chunk seeds {chunk[0]}..{chunk[-1]} failed: {e}")
                    raise
                traces.extend(result)
                self._record(result)

        # Completion order is arbitrary
        traces.sort(key=lambda t: t.seed)
        return traces

    def _record(self, traces: Sequence[RunTrace]):
        diverged = sum(1 for t in traces if t.diverged)
        for bucket in (self.stats, self.totals):
            bucket['completed'] += len(traces)
            bucket['diverged'] += diverged
        self._log_stats()

    def _log_stats(self, force=False):
        """Log progress every STATS_LOG_EVERY replications, or if forced"""
        if not force and self.stats['completed'] < settings.STATS_LOG_EVERY:
            return
        if self.stats['completed'] == 0:
            return
        current_time = time.time()
        elapsed = current_time - self.last_log_time
        rate = self.stats['completed'] / elapsed if elapsed > 0 else float('inf')
        logger.info(
            f"📊 Replications: {self.stats['completed']} completed, {self.stats['diverged']} diverged | "
            f"Rate: {rate:.1f} runs/s | Total: {self.totals['completed']}"
        )
        self.stats = {'completed': 0, 'diverged': 0}
        self.last_log_time = current_time


_replication_worker = None


def get_replication_worker() -> ReplicationWorker:
    global _replication_worker
    if _replication_worker is None:
        _replication_worker = ReplicationWorker()
    return _replication_worker
