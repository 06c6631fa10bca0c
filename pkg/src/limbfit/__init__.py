"""Unsupervised fitting of 3D human keypoints to LiDAR point-cloud sequences.

Subpackages and modules: ``geometry`` (types, cylindrical limb coordinates),
``losses`` and ``gradients`` (objective terms with analytic gradients),
``optim`` (Adam fitting loop), ``synth`` (capsule-body LiDAR simulator),
``segmentation`` (KMeans surrogate labels), ``flow`` (scene-flow providers),
``evaluation`` (Hungarian matching, MPJPE) and ``cli``.
"""

__version__ = "0.1.0"
