"""Compositional Video Diffusion Toolkit."""
