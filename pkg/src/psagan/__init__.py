"""Two-stage GAN microscopy pipeline (OM to SEM-style translation, 4x super-resolution)
with a dense circle detector and particle-size statistics, on a small numpy autodiff core."""

__version__ = "0.1.0"
