from .limiters import (
    Action,
    FlowCounters,
    Reason,
    TokenBucket,
    Verdict,
    WindowState,
    bucket_check,
    roll_window,
    window_check,
)
from .packet import ParsedPacket, build_frame, build_key, parse_headers, rewrite_addresses
from .table import Datapath, RuleNotFound, StatsSnapshot

__all__ = [
    "Action", "Datapath", "FlowCounters", "ParsedPacket", "Reason", "RuleNotFound",
    "StatsSnapshot", "TokenBucket", "Verdict", "WindowState", "bucket_check", "build_frame",
    "build_key", "parse_headers", "rewrite_addresses", "roll_window", "window_check",
]
