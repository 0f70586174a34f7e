"""Dynamic batch-size load balancing for synchronous data-parallel training."""
from .errors import HypertuneError
from .monitor import MonitorConfig, MonitorState, StepReport, cpu_retune_hint, decline_index, observe
from .planner import BatchPlan, DatasetSpec, NodeProfile, plan_initial, replan, select_anchor
from .retuner import RetunePolicy, retune, upscale_check
from .scenario import Scenario, WorkloadEvent
from .simengine import coverage_report, run, shuffle_assignment
from .speedmodel import SpeedModel, SpeedPoint, batch_for_speed, benchmark_sweep, degrade, speed_at

__version__ = "0.1.0"
