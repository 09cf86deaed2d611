"""Object-centric 3D scene completion from a single RGB-D view.

The package provides the geometric core (scene types, rendering,
registration, metrics), a synthetic-scene generator with oracle stage
backends, and a pipeline engine that drives pluggable segmentation /
inpainting / image-to-3D backends through a directory-based protocol.
"""

from .scene import (
    CameraIntrinsics,
    ObjectMask,
    PointCloud,
    ReconstructedObject,
    RgbdFrame,
    RigidTransform,
    SceneReconstruction,
    TexturedMesh,
)

__all__ = [
    "CameraIntrinsics",
    "ObjectMask",
    "PointCloud",
    "ReconstructedObject",
    "RgbdFrame",
    "RigidTransform",
    "SceneReconstruction",
    "TexturedMesh",
]

__version__ = "0.1.0"
