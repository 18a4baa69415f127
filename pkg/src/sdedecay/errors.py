"""Exception types shared across the package."""
from __future__ import annotations


class CapabilityError(Exception):
    """An operation needs something the inputs do not provide (a derivative, a limit, ...)."""


class CertificateRefused(ValueError):
    """A sampled family or growth inequality failed, so the certificate is not issued."""


class SimulationDiverged(RuntimeError):
    """A simulated state became non-finite.

    Attributes
    ----------
    path : int
        Lowest path (or particle) index that failed.
    step : int
        Step index, counted from the start of the leg, at which it failed.
    """

    def __init__(self, path: int, step: int, what: str = "path"):
        self.path = int(path)
        self.step = int(step)
        super().__init__(f"non-finite state on {what} {self.path} at step {self.step}")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` is a dotted path into the config."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
