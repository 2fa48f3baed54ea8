"""Tests for vfm-calibration."""
