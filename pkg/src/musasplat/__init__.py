"""Pose-free feed-forward Gaussian splatting with multi-scale adapters and single-pass view fusion."""

from .config import PRESETS, RunConfig, preset
from .core import CameraPose, GaussianSet, Intrinsics, Pointmap, TokenGrid
from .model import MuSASplat, ModelConfig
from .pipeline import Pipeline, train_run
from .scene import Scene, SceneSpec, generate_scene, load_scene, save_scene
from .splat import RenderSettings, render

__version__ = "0.1.0"

__all__ = ["CameraPose", "GaussianSet", "Intrinsics", "ModelConfig", "MuSASplat", "PRESETS", "Pipeline",
           "Pointmap", "RenderSettings", "RunConfig", "Scene", "SceneSpec", "TokenGrid", "generate_scene",
           "load_scene", "preset", "render", "save_scene", "train_run"]
