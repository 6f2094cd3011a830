"""Streaming sample exchange and asynchronous pipeline coordination.

The package splits a producer-consumer RL pipeline into a data plane
(sharded write-once sample storage), a control plane (per-task micro-batch
scheduling over readiness metadata), and a weight plane (delayed parameter
updates under a bounded staleness gap). The same plane objects run
in-process, behind TCP servers speaking a length-prefixed binary protocol,
and inside a discrete-event simulator that replays full epochs through them.
"""

from .client import (
    Batch,
    StreamingBatchIterator,
    VarlenEnvelope,
    decode_varlen,
    encode_varlen,
    write_back,
)
from .controller import (
    BatchMeta,
    EpochExhausted,
    NotReady,
    PackingPolicy,
    TaskController,
)
from .coordinator import (
    StalenessTracker,
    WeightChannel,
    WeightCoordinator,
)
from .errors import FlowlineError, ProtocolError
from .planner import PlanResult, plan
from .sim import SimReport, SimScenario, run_sim
from .storage import PartitionMap, StorageUnit
from .types import ConsumerGroupId, EpochSchema, StalenessBound, TaskSpec

__all__ = [
    "Batch",
    "BatchMeta",
    "ConsumerGroupId",
    "EpochExhausted",
    "EpochSchema",
    "FlowlineError",
    "NotReady",
    "PackingPolicy",
    "PartitionMap",
    "PlanResult",
    "ProtocolError",
    "SimReport",
    "SimScenario",
    "StalenessBound",
    "StalenessTracker",
    "StorageUnit",
    "StreamingBatchIterator",
    "TaskController",
    "TaskSpec",
    "VarlenEnvelope",
    "WeightChannel",
    "WeightCoordinator",
    "decode_varlen",
    "encode_varlen",
    "plan",
    "run_sim",
    "write_back",
]

__version__ = "0.1.0"
