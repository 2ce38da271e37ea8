"""Joint semantic and motion instance segmentation from appearance and optical flow."""

__version__ = "0.1.0"
