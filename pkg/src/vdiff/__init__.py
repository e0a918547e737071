"""Video deblurring with a wavelet-aware transformer and a compact latent diffusion prior."""

__version__ = "0.1.0"
