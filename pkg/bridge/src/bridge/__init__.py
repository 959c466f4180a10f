"""Guidance service and feature extraction for the splatting engine.

The engine side is consumed purely through its public wire and file
formats (HTTP guidance protocol, FeatureFile, PNG frames); this package
never imports the engine.
"""

from bridge.config import BridgeConfig
from bridge.model import ProceduralSphereModel
from bridge.server import serve_guidance

__all__ = ["BridgeConfig", "ProceduralSphereModel", "serve_guidance"]
