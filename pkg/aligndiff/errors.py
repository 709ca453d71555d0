"""
Exception types mapped onto the command line exit codes
"""

from typing import Dict, Optional


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite loss during training (exit code 3).

    Carries the step and the loss term breakdown so the abort can be diagnosed.
    """

    def __init__(self, step: int, terms: Optional[Dict[str, float]] = None):
        self.step = step
        self.terms = dict(terms or {})
        breakdown = ", ".join(f"{k}={v}" for k, v in self.terms.items())
        super().__init__(f"Non-finite loss at step {step}: {breakdown}")


class IntegrityError(OSError):
    """Checksum, manifest or version mismatch in a stored artifact (exit code 4)."""
