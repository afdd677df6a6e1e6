"""Checkpoint bridge: torch state dicts to tearflow weight containers.

The bridge maps tensor names, validates shapes and serializes; all
numeric behavior stays in the source model and the consuming engine.
"""

__version__ = "0.1.0"
