"""TARDIS: a memory-augmented recurrent network with discrete addressing.

Desk-scale library plus experiment CLI: reverse-mode autodiff core, the
fill-then-tied external memory, REINFORCE and Gumbel straight-through
estimators for the read decisions, synthetic benchmark tasks, and the
path-length / Jacobian analysis tooling.
"""

__version__ = "0.1.0"

from .autodiff import Graph, Tensor, apply, backward
from .controller import TardisModel, init_lstm_model, init_tardis_model
from .memory import MemoryState, init_memory

__all__ = [
    "Graph", "Tensor", "apply", "backward",
    "TardisModel", "init_lstm_model", "init_tardis_model",
    "MemoryState", "init_memory",
    "__version__",
]
