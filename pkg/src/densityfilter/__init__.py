"""Deep density filters for continuous-discrete filtering, with classical baselines."""

__version__ = "0.1.0"
