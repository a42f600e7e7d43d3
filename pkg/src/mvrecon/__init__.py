"""Multi-view voxel reconstruction with coarse-to-fine attention."""

__version__ = "0.1.0"
