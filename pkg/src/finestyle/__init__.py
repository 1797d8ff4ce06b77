"""Single-image style extraction for a frozen text-to-image latent diffusion model."""

__version__ = "0.1.0"
