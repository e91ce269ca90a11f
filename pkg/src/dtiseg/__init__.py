"""Multi-task delineation of the fetal brain on diffusion tensor images."""

__version__ = "0.1.0"
