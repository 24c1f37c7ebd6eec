from .regression import ProblemSpec, DataBatch, SpectralConstants
from .data_stream import StreamConfig, draw_batch
from .policies import OracleGain, EstimatedGain, GradNorm, Always, Never, Random, decide
from .simulator import RunConfig, RunTrace, run, step, replay_check
from .theory import TheoremReport, Verdict

__all__ = [
    'ProblemSpec',
    'DataBatch',
    'SpectralConstants',
    'StreamConfig',
    'draw_batch',
    'OracleGain',
    'EstimatedGain',
    'GradNorm',
    'Always',
    'Never',
    'Random',
    'decide',
    'RunConfig',
    'RunTrace',
    'run',
    'step',
    'replay_check',
    'TheoremReport',
    'Verdict',
]
