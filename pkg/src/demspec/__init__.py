"""Demographic specialization of small transformer LMs, plus the control
experiments (domain, language, meta-regression, representation probe) that
test whether its downstream gains survive confound control."""

__version__ = "0.1.0"
