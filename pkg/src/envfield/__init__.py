"""Rotation-equivariant, scale-invariant neural fields for HDR environment maps."""

__version__ = "0.1.0"
