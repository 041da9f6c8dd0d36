"""Closed-loop traffic world simulation with a sparse-tensor diffusion model.

Subpackage map: tensors (scene-tensor data model), diffusion (schedule,
losses, sampler), model/training (the learned denoiser), roadmap and
world (procedural maps and scripted ground truth), idm (car-following
baseline), rollout (closed-loop engine), metrics (realism evaluation),
render (static figures), cli (operator commands).
"""

from .diffusion import ClipMode
from .idm import IDMParams
from .roadmap import RoadGraph, generate_map
from .tensors import (AgentType, Conditioning, MultiTensor, NormConfig,
                      RawScene, SceneTensor, SignalState)
from .traces import TraceData
from .world import Scenario, WorldScriptConfig, export_windows, simulate_ground_truth

__version__ = "0.1.0"

__all__ = [
    "AgentType", "ClipMode", "Conditioning", "IDMParams", "MultiTensor",
    "NormConfig", "RawScene", "RoadGraph", "Scenario", "SceneTensor",
    "SignalState", "TraceData", "WorldScriptConfig", "export_windows",
    "generate_map", "simulate_ground_truth", "__version__",
]
