"""Spatial exceedance modelling: covariate extraction, a BYM/ICAR logit sampler and reports."""

__version__ = "0.1.0"
