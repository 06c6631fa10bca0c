"""Capsule-limb pedestrian body and its forward kinematics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np
from scipy.spatial.transform import Rotation

from limbfit.errors import InvalidConfig
from limbfit.geometry import SkeletonTopology


@dataclass(frozen=True)
class CapsuleBody:
    topology: SkeletonTopology
    fk_parents: tuple[int, ...]
    rest_positions: np.ndarray
    limb_radii: np.ndarray
    angle_noise_deg: np.ndarray
    shape_jitter: float = 0.1
    scale: float = 1.0
    rest_angles: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        J = self.topology.num_joints
        L = len(self.topology.limbs)
        object.__setattr__(self, "fk_parents", tuple(int(p) for p in self.fk_parents))
        object.__setattr__(self, "rest_positions", np.asarray(self.rest_positions, dtype=np.float64))
        object.__setattr__(self, "limb_radii", np.asarray(self.limb_radii, dtype=np.float64))
        object.__setattr__(self, "angle_noise_deg", np.asarray(self.angle_noise_deg, dtype=np.float64))
        if self.rest_angles is None:
            object.__setattr__(self, "rest_angles", np.zeros((J, 3)))
        else:
            object.__setattr__(self, "rest_angles", np.asarray(self.rest_angles, dtype=np.float64))
        if len(self.fk_parents) != J or self.rest_positions.shape != (J, 3):
            raise InvalidConfig("body arrays must match the joint count")
        if self.limb_radii.shape != (L,) or np.any(self.limb_radii <= 0):
            raise InvalidConfig("one positive capsule radius per limb required")
        if self.angle_noise_deg.shape != (J,) or np.any(self.angle_noise_deg < 0):
            raise InvalidConfig("one non-negative angle-noise bound per joint required")
        if self.rest_angles.shape != (J, 3):
            raise InvalidConfig("rest angles must be (J, 3)")
        if not self.scale > 0:
            raise InvalidConfig("scale must be positive")
        roots = [j for j, p in enumerate(self.fk_parents) if p < 0]
        if len(roots) != 1:
            raise InvalidConfig("hierarchy needs exactly one root")
        self.fk_order  # raises on cycles
        for a, b in self.topology.limbs:
            if self.fk_parents[a] != b and self.fk_parents[b] != a:
                raise InvalidConfig(f"limb ({a}, {b}) is not a bone of the hierarchy")

    @property
    def root(self) -> int:
        return self.fk_parents.index(-1)

    @property
    def fk_order(self) -> list[int]:
        """Joints sorted parents-first."""
        order, seen = [], set()
        children = {j: [] for j in range(len(self.fk_parents))}
        for j, p in enumerate(self.fk_parents):
            if p >= 0:
                children[p].append(j)
        stack = [self.root]
        while stack:
            j = stack.pop()
            if j in seen:
                raise InvalidConfig("hierarchy contains a cycle")
            seen.add(j)
            order.append(j)
            stack.extend(reversed(children[j]))
        if len(order) != len(self.fk_parents):
            raise InvalidConfig("hierarchy is not connected")
        return order

    @property
    def limb_child(self) -> np.ndarray:
        """Distal (FK child) joint of each limb."""
        return np.array([a if self.fk_parents[a] == b else b for a, b in self.topology.limbs])

    @property
    def limb_lengths(self) -> np.ndarray:
        limbs = self.topology.limb_array
        d = self.rest_positions[limbs[:, 1]] - self.rest_positions[limbs[:, 0]]
        return np.linalg.norm(d, axis=1) * self.scale

    @property
    def capsule_radii(self) -> np.ndarray:
        return self.limb_radii * self.scale

    def jittered(self, rng: np.random.Generator, fraction: Optional[float] = None) -> "CapsuleBody":
        """Random body shape: every bone length and radius scaled by U(1-f, 1+f), then re-grounded."""
        f = self.shape_jitter if fraction is None else fraction
        L = len(self.topology.limbs)
        len_factor = rng.uniform(1 - f, 1 + f, size=L)
        rad_factor = rng.uniform(1 - f, 1 + f, size=L)
        bone_factor = np.ones(len(self.fk_parents))
        bone_factor[self.limb_child] = len_factor
        rest = self.rest_positions.copy()
        for j in self.fk_order:
            p = self.fk_parents[j]
            if p >= 0:
                rest[j] = rest[p] + bone_factor[j] * (self.rest_positions[j] - self.rest_positions[p])
        out = replace(self, rest_positions=rest, limb_radii=self.limb_radii * rad_factor)
        return out.grounded()

    def grounded(self) -> "CapsuleBody":
        """Shift the rest pose vertically so the lowest capsule touches z = 0."""
        limbs = self.topology.limb_array
        lowest = np.inf
        for l, (a, b) in enumerate(limbs):
            lowest = min(lowest, self.rest_positions[a, 2] - self.limb_radii[l], self.rest_positions[b, 2] - self.limb_radii[l])
        rest = self.rest_positions.copy()
        rest[:, 2] -= lowest
        return replace(self, rest_positions=rest)

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.topology.joint_names),
            "fk_parents": list(self.fk_parents),
            "rest_positions": self.rest_positions.tolist(),
            "limbs": [list(l) for l in self.topology.limbs],
            "limb_radii": self.limb_radii.tolist(),
            "angle_noise_deg": self.angle_noise_deg.tolist(),
            "shape_jitter": self.shape_jitter,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CapsuleBody":
        try:
            topo = SkeletonTopology(tuple(d["joint_names"]), tuple(tuple(l) for l in d["limbs"]))
            return cls(topo, tuple(d["fk_parents"]), d["rest_positions"], d["limb_radii"],
                       d["angle_noise_deg"], float(d.get("shape_jitter", 0.1)), float(d.get("scale", 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfig(f"malformed body config: {exc}") from exc


def load_body(path: Union[str, Path, None] = None) -> CapsuleBody:
    """Load a body config; ``None`` loads the packaged default."""
    if path is None:
        text = resources.files("limbfit.data").joinpath("default_body.json").read_text()
    else:
        text = Path(path).read_text()
    return CapsuleBody.from_dict(json.loads(text))


def default_body() -> CapsuleBody:
    return load_body(None).grounded()


def default_topology() -> SkeletonTopology:
    return default_body().topology


class Kinematics(NamedTuple):
    positions: np.ndarray  # (J, 3)
    limb_rotations: np.ndarray  # (L, 3, 3)
    limb_origins: np.ndarray  # (L, 3), world position of each limb's proximal joint


def _rotations(angles_deg: np.ndarray) -> np.ndarray:
    return Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix()


def forward_kinematics(body: CapsuleBody, angles_deg, placement_rotation=None,
                       placement_translation=None) -> Kinematics:
    """Posed joint positions and per-limb rigid transforms.

    A rest-frame point x on limb l maps to ``o_l + R_l (x - rest_proximal_l)``;
    limb-local coordinates are therefore ``R_l^T (p - o_l)``.
    """
    angles_deg = np.asarray(angles_deg, dtype=np.float64)
    J = len(body.fk_parents)
    local = _rotations(angles_deg.reshape(J, 3))
    R0 = np.eye(3) if placement_rotation is None else np.asarray(placement_rotation, dtype=np.float64)
    t0 = np.zeros(3) if placement_translation is None else np.asarray(placement_translation, dtype=np.float64)
    rest = body.rest_positions * body.scale
    glob = np.zeros((J, 3, 3))
    pos = np.zeros((J, 3))
    for j in body.fk_order:
        p = body.fk_parents[j]
        if p < 0:
            glob[j] = R0 @ local[j]
            pos[j] = t0 + R0 @ rest[j]
        else:
            glob[j] = glob[p] @ local[j]
            pos[j] = pos[p] + glob[j] @ (rest[j] - rest[p])
    child = body.limb_child
    proximal = np.array([body.fk_parents[c] for c in child])
    return Kinematics(pos, glob[child], pos[proximal])


def to_local(points, limb_id, kin: Kinematics) -> np.ndarray:
    R = kin.limb_rotations[limb_id]
    return np.einsum("nji,nj->ni", R, np.asarray(points) - kin.limb_origins[limb_id])


def from_local(local, limb_id, kin: Kinematics) -> np.ndarray:
    R = kin.limb_rotations[limb_id]
    return kin.limb_origins[limb_id] + np.einsum("nij,nj->ni", R, np.asarray(local))


def sample_end_pose(body: CapsuleBody, seed, bounds_deg=None) -> np.ndarray:
    """Rest angles plus per-joint uniform noise within the joint's bound (degrees)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bounds = body.angle_noise_deg if bounds_deg is None else np.asarray(bounds_deg, dtype=np.float64)
    noise = rng.uniform(-1.0, 1.0, size=body.rest_angles.shape) * bounds[:, None]
    return body.rest_angles + noise


def interpolate_sequence(start, end, frames: int) -> list[np.ndarray]:
    if frames < 2:
        raise InvalidConfig("a sequence needs at least 2 frames")
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    out = [start + (k / (frames - 1)) * (end - start) for k in range(frames - 1)]
    # exact endpoint, and exactly constant when start == end
    out.append(end.copy())
    return out
