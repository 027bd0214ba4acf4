"""Time-varying volumetric extinction tomography from sequential multi-angle images."""

__version__ = "0.1.0"
