"""tilecascade: tiled cascaded-diffusion lab with handmade numerics."""

__version__ = "0.1.0"
