"""Hand articulated-occupancy toolkit: keypoint canonicalization, neural
occupancy models, training on procedural capsule hands, isosurface metrics,
and occupancy-based grasp refinement."""

__version__ = "0.1.0"
