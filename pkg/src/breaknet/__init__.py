"""Network-based diffusion analysis and tie-formation modelling for
collaboration networks."""

__version__ = "0.1.0"
