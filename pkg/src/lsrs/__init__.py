"""Next-scale autoregressive generation with latent-scale rejection sampling
on a self-contained synthetic benchmark."""

__version__ = "0.1.0"
