#!/usr/bin/env python3
"""
EV Charging Main Entry Point

Exports the simulate workflow as `graph` for LangGraph Studio and forwards
command-line use to the CLI.
"""

import sys
from pathlib import Path

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent / "src"))

from ev_charging_app.cli import main
from ev_charging_app.config import RunConfig
from ev_charging_app.core import build_workflow

# Export graph for LangGraph Studio
graph = build_workflow("simulate", RunConfig.from_sources()).compile()


if __name__ == "__main__":
    sys.exit(main())
