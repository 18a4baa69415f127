"""Monte Carlo checks of derivative decay for non-autonomous SDEs."""
from __future__ import annotations

__version__ = "0.1.0"
