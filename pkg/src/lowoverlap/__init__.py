"""Metric depth recovery, DSM and true-ortho generation for low-overlap aerial imagery."""
from __future__ import annotations

__version__ = "0.1.0"
