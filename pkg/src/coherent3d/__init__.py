"""Coherent multi-person 3D reconstruction from multi-view silhouettes and depth."""

__version__ = "0.1.0"
