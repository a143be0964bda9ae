"""Diffusion-based rectangling of stitched images.

Two cooperating conditional diffusion models turn a stitched image with
irregular white margins into a clean rectangular one: a motion model
generates a dense rectifying displacement field, and a content model
refines the warped result through confidence-weighted sampling that keeps
trustworthy warped pixels and regenerates the rest.
"""

__version__ = "0.1.0"
