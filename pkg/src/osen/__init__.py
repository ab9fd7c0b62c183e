"""Operational support estimator networks.

Sparse-support estimation from compressive measurements with operational
(polynomial-tap, shiftable-kernel) layers, trainable compressive front ends,
representation-based classification, and learning-aided weighted-TV
reconstruction.
"""

__version__ = "0.1.0"
