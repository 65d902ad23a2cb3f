"""U-Net segmentation with channel, spatial and pixel attention, built on a small numpy autograd core."""

__version__ = "0.1.0"
