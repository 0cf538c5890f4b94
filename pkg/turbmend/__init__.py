from .config import PipelineConfig, TurbulenceConfig, load_config
from .pipeline import bench_solvers, evaluate, restore, restore_frames, simulate

__all__ = [
    "PipelineConfig",
    "TurbulenceConfig",
    "load_config",
    "restore",
    "restore_frames",
    "simulate",
    "evaluate",
    "bench_solvers",
]
