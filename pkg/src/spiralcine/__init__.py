"""Spiral real-time cardiac cine MRI toolkit.

Simulation of undersampled spiral acquisitions on a dynamic heart phantom,
non-Cartesian reconstruction (gridding, CG-SENSE, l1-wavelet CS, low-rank
plus sparse), self-gating, a CNN inference engine for joint reconstruction
and segmentation, and ventricular function analysis.
"""

__version__ = "0.1.0"
