"""Shared paths for the experiment runners."""
import os
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("ISPN_CACHE", ROOT / ".ispn_cache"))
RESULTS = Path(os.environ.get("ISPN_RESULTS", ROOT / "results"))
SEEDS = (0, 1, 2, 3, 4)
