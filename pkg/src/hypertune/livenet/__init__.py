"""Live execution over TCP: a coordinator and synthetic-compute workers."""
from .coordinator import Coordinator, LiveConfig, coordinator_run
from .kernel import KernelExecutor, SyntheticKernel, ThrottleSchedule
from .worker import worker_run

__all__ = [
    "Coordinator",
    "KernelExecutor",
    "LiveConfig",
    "SyntheticKernel",
    "ThrottleSchedule",
    "coordinator_run",
    "worker_run",
]
