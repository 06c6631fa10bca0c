"""Synthetic pedestrian sequences: posed capsule bodies, LiDAR returns, exact scene flow."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from limbfit.errors import InvalidConfig, MissingAttachment
from limbfit.geometry import MAX_POINTS, PointCloud, pad_or_downsample
from limbfit.synth.body import (
    CapsuleBody,
    Kinematics,
    forward_kinematics,
    from_local,
    interpolate_sequence,
    sample_end_pose,
    to_local,
)
from limbfit.synth.raycast import RayCasterConfig, raycast

MIN_VISIBLE_HITS = 3


@dataclass
class SynthFrame:
    cloud: PointCloud
    pose: np.ndarray  # (J, 3)
    visible: np.ndarray  # (J,) bool
    angles: np.ndarray  # (J, 3) degrees
    kinematics: Kinematics


@dataclass
class SynthSequence:
    body: CapsuleBody
    frames: list[SynthFrame]
    distance: float
    placement_rotation: np.ndarray
    placement_translation: np.ndarray

    @property
    def poses(self) -> np.ndarray:
        return np.stack([f.pose for f in self.frames])

    @property
    def clouds(self) -> list[PointCloud]:
        return [f.cloud for f in self.frames]


def capsules(body: CapsuleBody, kin: Kinematics):
    limbs = body.topology.limb_array
    return kin.positions[limbs[:, 0]], kin.positions[limbs[:, 1]], body.capsule_radii


def scan_body(body: CapsuleBody, kin: Kinematics, config: RayCasterConfig) -> tuple[PointCloud, np.ndarray]:
    """Ray-cast one posed body; returns the labelled, limb-attached cloud and per-joint visibility."""
    a, b, radius = capsules(body, kin)
    hits = raycast(a, b, radius, config)
    limb_id = hits.capsule.astype(np.int64)
    labels = body.topology.limb_array[limb_id, 0]
    cloud = PointCloud(hits.points, gt_label=labels, limb_id=limb_id,
                       local=to_local(hits.points, limb_id, kin))
    return cloud, joint_visibility(body, limb_id)


def joint_visibility(body: CapsuleBody, limb_id: np.ndarray) -> np.ndarray:
    """A joint is visible when at least three returns hit limbs touching it."""
    counts = np.bincount(limb_id, minlength=len(body.topology.limbs))
    J = body.topology.num_joints
    return np.array([counts[body.topology.adjacent_limbs(j)].sum() >= MIN_VISIBLE_HITS for j in range(J)])


def exact_flow(limb_id, local, kin_from: Kinematics, kin_to: Kinematics) -> np.ndarray:
    """Displacement of limb-attached points between two posed states.

    Points with ``limb_id < 0`` (not attached to the body) get zero flow.
    """
    if limb_id is None or local is None:
        raise MissingAttachment("flow needs limb attachments")
    limb_id = np.asarray(limb_id)
    flow = np.zeros((len(limb_id), 3))
    on = limb_id >= 0
    if np.any(on):
        flow[on] = from_local(local[on], limb_id[on], kin_to) - from_local(local[on], limb_id[on], kin_from)
    return flow


def random_placement(rng: np.random.Generator, distance_range=(6.0, 17.0)):
    """Random heading and a position at a horizontal distance in ``distance_range`` from the sensor axis."""
    lo, hi = distance_range
    if not (6.0 <= lo <= hi <= 17.0):
        raise InvalidConfig("placement distance must lie within [6, 17] m")
    distance = rng.uniform(lo, hi)
    bearing = rng.uniform(0.0, 2 * np.pi)
    heading = rng.uniform(0.0, 360.0)
    R = Rotation.from_euler("z", heading, degrees=True).as_matrix()
    t = np.array([distance * np.cos(bearing), distance * np.sin(bearing), 0.0])
    return distance, R, t


def generate_sequence(template: CapsuleBody, rng: np.random.Generator, frames: int = 16,
                      ray_config: Optional[RayCasterConfig] = None, max_points: int = MAX_POINTS,
                      jitter: Optional[float] = None, distance_range=(6.0, 17.0)) -> SynthSequence:
    """One sequence: canonical standing start, random end pose, linear interpolation in between."""
    ray_config = ray_config or RayCasterConfig()
    body = template.jittered(rng, jitter)
    end = sample_end_pose(body, rng)
    angles = interpolate_sequence(body.rest_angles, end, frames)
    distance, R, t = random_placement(rng, distance_range)
    kins = [forward_kinematics(body, ang, R, t) for ang in angles]

    out = []
    for ang, kin in zip(angles, kins):
        cloud, visible = scan_body(body, kin, ray_config)
        cloud = pad_or_downsample(cloud, max_points, rng)
        out.append(SynthFrame(cloud, kin.positions, visible, ang, kin))
    for k, frame in enumerate(out):
        c = frame.cloud
        if k + 1 < frames:
            c.forward_flow = exact_flow(c.limb_id, c.local, kins[k], kins[k + 1])
        if k > 0:
            c.backward_flow = exact_flow(c.limb_id, c.local, kins[k], kins[k - 1])
    return SynthSequence(body, out, distance, R, t)


def sequence_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream per sequence, derived from (master seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))
