"""RGB-D segmentation toolkit: multi-dataset label harmonization, LiDAR depth
maps, IoU evaluation, and a toy two-branch fusion network with built-in
reverse-mode autodiff."""

__version__ = "0.1.0"
