"""Desk-scale outsource-and-verify storage stack.

A trusted device core keeps file data and a block store. An untrusted local
filesystem twin and a metadata-only cloud replica both translate file API
invocations into block-request traces, and the core executes only the
operations the twins agree on.
"""

from twinfs.blockstore import BLOCK_SIZE, BlockStore
from twinfs.device_core import (
    DeviceConfig,
    DeviceCore,
    TRUSTED,
    UNTRUSTED,
    VerificationFailedError,
    verify_traces,
)
from twinfs.minifs import Engine, FileOp, OpCode, OpFlag, Status, mkfs
from twinfs.replica import ReplicaServer, ReplicaSession
from twinfs.transport import OfflineError

__all__ = [
    "BLOCK_SIZE",
    "BlockStore",
    "DeviceConfig",
    "DeviceCore",
    "Engine",
    "FileOp",
    "OfflineError",
    "OpCode",
    "OpFlag",
    "ReplicaServer",
    "ReplicaSession",
    "Status",
    "TRUSTED",
    "UNTRUSTED",
    "VerificationFailedError",
    "mkfs",
    "verify_traces",
]
