"""Sparse head-tail voxel selection and decoupled training at desk scale."""

__version__ = "0.1.0"
