"""Semi-supervised 3D segmentation with a multi-scale mean teacher."""

__version__ = "0.1.0"
