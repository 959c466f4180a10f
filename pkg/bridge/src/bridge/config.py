from __future__ import annotations

from dataclasses import dataclass

KNOWN_MODELS = ("procedural-sphere",)
KNOWN_PRECISIONS = ("fp32", "fp16")


class BridgeError(Exception):
    """Base error for the guidance service and feature extraction."""


@dataclass
class BridgeConfig:
    """Service configuration.

    The advertised ``/v1/schedule`` always reflects the hosted model's own
    noise schedule, whatever ``model`` resolves to.
    """

    model: str = "procedural-sphere"
    device: str = "cpu"
    precision: str = "fp32"
    host: str = "127.0.0.1"
    port: int = 8731

    def __post_init__(self):
        if self.model not in KNOWN_MODELS:
            raise BridgeError(f"unknown model {self.model!r}; known: {KNOWN_MODELS}")
        if self.precision not in KNOWN_PRECISIONS:
            raise BridgeError(f"precision must be one of {KNOWN_PRECISIONS}")
        if self.device != "cpu":
            raise BridgeError(f"device {self.device!r} is not available in this build")
        if not 0 <= self.port <= 65535:
            raise BridgeError("port out of range")
