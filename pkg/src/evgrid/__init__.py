"""Coupled road-traffic / distribution-feeder simulation with safe RL
charging-station recommendation agents."""

from pathlib import Path

__version__ = "0.1.0"

DATA_DIR = Path(__file__).parent / "data"
