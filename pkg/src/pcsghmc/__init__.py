"""Adaptively rotated stochastic-gradient HMC for Bayesian posterior sampling.

The sampler runs an ensemble of SGHMC chains whose coordinate frame is
continuously re-aligned to the principal components of the evolving sample
cloud, with per-direction scale estimates feeding a (trainable) gyroscopic
coupling / damping strategy.
"""

from pcsghmc.errors import ArchiveError, ConfigError, DivergenceAbort

__all__ = ["ArchiveError", "ConfigError", "DivergenceAbort", "__version__"]

__version__ = "0.1.0"
