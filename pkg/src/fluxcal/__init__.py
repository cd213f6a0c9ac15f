"""Zoom-lens intrinsics toolkit.

Synthetic board/drone calibration experiments, a fixed-point initialised
Levenberg-Marquardt calibrator, (LFL, FD) lookup tables with trapezoidal and
barycentric interpolation, drone flight planning and EPE-based evaluation.
"""

__version__ = "0.1.0"
