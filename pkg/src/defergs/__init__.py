"""CPU reference renderer and trainer for deferred physically-based Gaussian splatting."""

from .scene_model import (Camera, EnvironmentLight, Gaussian3D, Gaussians, HybridScene, SceneError,
                          TrainView, TriangleMesh, activate_params)

__version__ = "0.1.0"

__all__ = ["Camera", "EnvironmentLight", "Gaussian3D", "Gaussians", "HybridScene", "SceneError",
           "TrainView", "TriangleMesh", "activate_params"]
