"""Virtual flow meter calibration by sequential Monte Carlo."""

from .runner import Runner

__all__ = ["Runner"]
