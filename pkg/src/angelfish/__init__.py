"""Angelfish and multi-leader Angelfish DAG-BFT consensus with a deterministic simulator."""

from .core import ProtocolConfig, RbcKind, Vertex, leader_of, multiple_leaders_of
from .multileader import MultiLeaderNode
from .node import AngelfishNode, Observer
from .sim import FaultScript, SimConfig, Simulator

__all__ = [
    "AngelfishNode",
    "FaultScript",
    "MultiLeaderNode",
    "Observer",
    "ProtocolConfig",
    "RbcKind",
    "SimConfig",
    "Simulator",
    "Vertex",
    "leader_of",
    "multiple_leaders_of",
]

__version__ = "0.1.0"
