"""Visual servoing with return-conditioned latent diffusion in a raycast world."""

__version__ = "0.1.0"
