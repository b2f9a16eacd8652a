"""g-estimation of structural nested models for longitudinal exposure data."""

__version__ = "0.1.0"
