"""Training-free pose-driven character animation on a pluggable denoiser."""
__version__ = "0.1.0"
