"""Crossmodal image-to-LiDAR distillation on synthetic paired scenes."""

__version__ = "0.1.0"

VERSION_STRING = "xmdistill-" + __version__
