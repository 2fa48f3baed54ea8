"""Version information for vfm-calibration."""

__version__ = "0.1.0"
