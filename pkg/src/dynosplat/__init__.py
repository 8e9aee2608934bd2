"""RGB-D dynamic SLAM on 3D gaussian splats.

Tracking, inconsistency-driven dynamic object detection, and decoupled
static/dynamic mapping, with a synthetic ray-casting oracle for verification.
"""

__version__ = "0.1.0"
