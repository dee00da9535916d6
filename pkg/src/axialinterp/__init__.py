"""Self-supervised axial (z) upsampling of 3D image stacks with a flow-based slice generator."""

__version__ = "0.1.0"
