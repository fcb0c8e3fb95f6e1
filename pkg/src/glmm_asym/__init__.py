"""Two-level generalized linear mixed models with two-term asymptotic covariances."""

__version__ = "0.1.0"
