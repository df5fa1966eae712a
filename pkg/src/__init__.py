"""
glyphprior - structure-prior blind text image super-resolution

Synthesizes degraded text lines, learns a codebook-conditioned generator of
character structure priors, and trains an SR network that injects those priors
per detected character.
"""

__version__ = "0.1.0"
