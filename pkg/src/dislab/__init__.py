"""Style/content disentanglement workbench.

Two models over content-aligned multi-style image triplets: a baseline with one
encoder and one decoder per style (DSED), and a beta-VAE whose latent is split
into content and style slices policed by a Friend and an Enemy classifier (FEN).
"""

__version__ = "0.1.0"
