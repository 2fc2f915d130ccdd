"""Split int8 inference across two nodes: planning, wire transport, link timing and OTA."""

from .catalog import REFERENCE_SPLIT_LAYERS, ModelGraph, builtin_mobilenetv2_catalog, load_catalog
from .linksim import LinkModel, StageTimings, calibrate, compare_protocols, estimate_rtt, simulate_transfer
from .planner import SplitPlan, plan_report, split
from .protocols import PROFILES, ProtocolProfile, get_profile, packet_count
from .quant import QuantParams, QuantTensor, check_alignment, dequantize, quantize, requantize

__version__ = "0.1.0"

__all__ = [
    "LinkModel",
    "ModelGraph",
    "REFERENCE_SPLIT_LAYERS",
    "PROFILES",
    "ProtocolProfile",
    "QuantParams",
    "QuantTensor",
    "SplitPlan",
    "StageTimings",
    "builtin_mobilenetv2_catalog",
    "calibrate",
    "check_alignment",
    "compare_protocols",
    "dequantize",
    "estimate_rtt",
    "get_profile",
    "load_catalog",
    "packet_count",
    "plan_report",
    "quantize",
    "requantize",
    "simulate_transfer",
    "split",
]
