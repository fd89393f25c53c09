"""refusion-desk toolkit: retrieval representation fusion with a searched integrator."""
from __future__ import annotations

__version__ = "0.1.0"
