"""Simulated peer-to-peer execution of the decentralized solver."""
from ..partition import Partition, build_partition, partition_problem
from .device import Device, DeviceConfig, DeviceStep
from .engine import RunConfig, ReferenceConfig, account_memory, exchange, run, run_centralized_reference
from .messages import Message, decode, encode
from .trace import IterationReport, Trace

__all__ = [
    "Device",
    "DeviceConfig",
    "DeviceStep",
    "IterationReport",
    "Message",
    "Partition",
    "ReferenceConfig",
    "RunConfig",
    "Trace",
    "account_memory",
    "build_partition",
    "decode",
    "encode",
    "exchange",
    "partition_problem",
    "run",
    "run_centralized_reference",
]
