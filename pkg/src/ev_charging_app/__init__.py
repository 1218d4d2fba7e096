"""
EV Charging Application

Command-line pipeline around the `ev_charging` library:

- generate: synthetic trip log and price series
- fit: exit-probability spline and hidden driving-state model
- solve: optimal charging policy tables and heatmaps
- simulate / evaluate: policy replays and comparison tables
"""

from .config import RunConfig
from .core import build_workflow, cmd_evaluate, cmd_fit, cmd_generate, cmd_simulate, cmd_solve

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "build_workflow",
    "cmd_evaluate",
    "cmd_fit",
    "cmd_generate",
    "cmd_simulate",
    "cmd_solve",
]
