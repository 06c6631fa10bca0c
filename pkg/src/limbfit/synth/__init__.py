"""Synthetic LiDAR pedestrian data with ground truth."""

from limbfit.synth.augment import AugmentationConfig, TwoFrameSample, augment
from limbfit.synth.body import (
    CapsuleBody,
    Kinematics,
    default_body,
    default_topology,
    forward_kinematics,
    interpolate_sequence,
    load_body,
    sample_end_pose,
)
from limbfit.synth.raycast import RayCasterConfig, intersect_capsules, raycast
from limbfit.synth.sequence import (
    SynthFrame,
    SynthSequence,
    exact_flow,
    generate_sequence,
    scan_body,
    sequence_rng,
)

__all__ = [
    "AugmentationConfig",
    "CapsuleBody",
    "Kinematics",
    "RayCasterConfig",
    "SynthFrame",
    "SynthSequence",
    "TwoFrameSample",
    "augment",
    "default_body",
    "default_topology",
    "exact_flow",
    "forward_kinematics",
    "generate_sequence",
    "interpolate_sequence",
    "intersect_capsules",
    "load_body",
    "raycast",
    "sample_end_pose",
    "scan_body",
    "sequence_rng",
]
