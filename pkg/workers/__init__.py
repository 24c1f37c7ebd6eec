from .replication_worker import ReplicationWorker, get_replication_worker
from .experiment_worker import ExperimentWorker

__all__ = ['ReplicationWorker', 'get_replication_worker', 'ExperimentWorker']
