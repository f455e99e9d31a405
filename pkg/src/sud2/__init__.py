"""Semi-supervised image reconstruction with denoiser and diffusion pseudo-labels."""

__version__ = "0.1.0"
