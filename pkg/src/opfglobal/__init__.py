"""Global optimal power flow by dual-derived convex reformulation and branch-and-bound."""

from .bnb import BnbOptions, SolveReport, solve
from .case_io import NetworkCase, load_case, parse_matpower, parse_native
from .qcqp import QcqpModel, build_qcqp, evaluate
from .reform import Reformulation, build_reformulation
from .relaxation import QpOptions, solve_node_relaxation
from .sdp import SdpOptions, SdpResult, solve_sdp

__version__ = "0.1.0"

__all__ = [
    "BnbOptions", "NetworkCase", "QcqpModel", "QpOptions", "Reformulation",
    "SdpOptions", "SdpResult", "SolveReport", "build_qcqp", "build_reformulation",
    "evaluate", "load_case", "parse_matpower", "parse_native", "solve",
    "solve_node_relaxation", "solve_sdp",
]
