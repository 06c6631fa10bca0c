"""Core types and per-limb cylindrical geometry.

All coordinates are meters. Functions broadcast over leading axes so the
same code evaluates a single point/limb or whole (batch, limb, point) grids.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from limbfit.errors import DegenerateLimb, InvalidBandwidth, ShapeMismatch, ValidationError

EPS_LEN = 1e-9
MAX_POINTS = 1024


@dataclass(frozen=True)
class SkeletonTopology:
    """Keypoint names plus the limb list.

    A limb ``(a, b)`` connects the labelling keypoint ``a`` (the limb's
    "parent" in the loss sense: its surface points carry class ``a``) with
    keypoint ``b``. Classes ``0..J-1`` are parts, class ``J`` is background.
    """

    joint_names: tuple[str, ...]
    limbs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "limbs", tuple((int(a), int(b)) for a, b in self.limbs))
        J = len(self.joint_names)
        if J < 1:
            raise ValidationError("topology needs at least one joint")
        if len(set(self.limbs)) != len(self.limbs):
            raise ValidationError("duplicate limb in topology")
        for a, b in self.limbs:
            if not (0 <= a < J and 0 <= b < J) or a == b:
                raise ValidationError(f"invalid limb ({a}, {b}) for J={J}")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_classes(self) -> int:
        return self.num_joints + 1

    @property
    def background_class(self) -> int:
        return self.num_joints

    @property
    def limb_array(self) -> np.ndarray:
        return np.asarray(self.limbs, dtype=np.int64).reshape(-1, 2)

    def adjacent_limbs(self, joint: int) -> list[int]:
        return [i for i, (a, b) in enumerate(self.limbs) if joint in (a, b)]

    def to_dict(self) -> dict:
        return {"joint_names": list(self.joint_names), "limbs": [list(l) for l in self.limbs]}

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonTopology":
        return cls(tuple(d["joint_names"]), tuple(tuple(l) for l in d["limbs"]))


@dataclass
class SkeletonPose:
    positions: np.ndarray
    visible: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeMismatch(f"pose must be (J, 3), got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("pose contains non-finite coordinates")
        if self.visible is None:
            self.visible = np.ones(len(self.positions), dtype=bool)
        else:
            self.visible = np.asarray(self.visible, dtype=bool)
            if self.visible.shape != (len(self.positions),):
                raise ShapeMismatch("visibility length must equal J")

    @property
    def num_joints(self) -> int:
        return len(self.positions)


@dataclass
class PointCloud:
    """N points with optional per-point fields (all of length N when set).

    ``limb_id`` is -1 for points not attached to any limb (injected clutter).
    """

    points: np.ndarray
    forward_flow: Optional[np.ndarray] = None
    backward_flow: Optional[np.ndarray] = None
    gt_label: Optional[np.ndarray] = None
    limb_id: Optional[np.ndarray] = None
    local: Optional[np.ndarray] = None
    valid_mask: Optional[np.ndarray] = None

    _vec_fields = ("forward_flow", "backward_flow", "local")
    _int_fields = ("gt_label", "limb_id")

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        for name in self._vec_fields:
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.float64).reshape(-1, 3)
                if len(val) != n:
                    raise ShapeMismatch(f"{name} has {len(val)} rows, expected {n}")
                setattr(self, name, val)
        for name in self._int_fields:
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.int64).reshape(-1)
                if len(val) != n:
                    raise ShapeMismatch(f"{name} has {len(val)} entries, expected {n}")
                setattr(self, name, val)
        if self.valid_mask is not None:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool).reshape(-1)
            if len(self.valid_mask) != n:
                raise ShapeMismatch("valid_mask length must equal N")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def num_valid(self) -> int:
        return len(self) if self.valid_mask is None else int(self.valid_mask.sum())

    def subset(self, index) -> "PointCloud":
        """Row selection (boolean mask or integer index) applied to every field."""
        kw = {}
        for name in ("points",) + self._vec_fields + self._int_fields + ("valid_mask",):
            val = getattr(self, name)
            kw[name] = None if val is None else val[index]
        return PointCloud(**kw)

    def valid(self) -> "PointCloud":
        """Drop padding rows."""
        if self.valid_mask is None:
            return self
        out = self.subset(self.valid_mask)
        out.valid_mask = None
        return out

    def copy(self) -> "PointCloud":
        return self.subset(slice(None))

    def with_fields(self, **kw) -> "PointCloud":
        return replace(self, **kw)


def pad_or_downsample(cloud: PointCloud, max_points: int, rng: np.random.Generator,
                      pad: bool = False) -> PointCloud:
    """Cap a cloud at ``max_points`` by random subsampling; optionally zero-pad up to it.

    Padded rows are flagged invalid in ``valid_mask`` and ignored by every loss.
    """
    cloud = cloud.valid()
    n = len(cloud)
    if n > max_points:
        keep = np.sort(rng.choice(n, size=max_points, replace=False))
        cloud = cloud.subset(keep)
        n = max_points
    if not pad or n == max_points:
        return cloud
    extra = max_points - n
    kw = {"points": np.vstack([cloud.points, np.zeros((extra, 3))])}
    for name in PointCloud._vec_fields:
        val = getattr(cloud, name)
        if val is not None:
            kw[name] = np.vstack([val, np.zeros((extra, 3))])
    for name in PointCloud._int_fields:
        val = getattr(cloud, name)
        if val is not None:
            kw[name] = np.concatenate([val, np.full(extra, -1, dtype=np.int64)])
    kw["valid_mask"] = np.concatenate([np.ones(n, bool), np.zeros(extra, bool)])
    return PointCloud(**kw)


def check_soft_assignment(W, num_points: int, num_classes: int, atol: float = 1e-6) -> np.ndarray:
    """Validate an N x (J+1) row-stochastic assignment and return it as float64."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (num_points, num_classes):
        raise ShapeMismatch(f"assignment shape {W.shape} != ({num_points}, {num_classes})")
    if np.any(W < 0) or not np.all(np.isfinite(W)):
        raise ValidationError("assignment entries must be finite and non-negative")
    if num_points and np.max(np.abs(W.sum(axis=1) - 1.0)) > atol:
        raise ValidationError("assignment rows must sum to 1")
    return W


class LimbCoords(NamedTuple):
    z: np.ndarray
    r: np.ndarray


def limb_axis(ya, yb, eps_len: float = EPS_LEN):
    """Return (direction, unit direction, length) for limbs; raises on degenerate limbs."""
    d = np.asarray(yb, dtype=np.float64) - np.asarray(ya, dtype=np.float64)
    length = np.linalg.norm(d, axis=-1)
    if np.any(length <= eps_len):
        raise DegenerateLimb(f"limb length {np.min(length):.3g} m <= {eps_len:g} m")
    return d, d / length[..., None], length


def cylindrical_coords(p, ya, yb, eps_len: float = EPS_LEN) -> LimbCoords:
    """Signed axial coordinate ``z`` and radial distance ``r`` of ``p`` w.r.t. limb ya->yb.

    ``z`` is not clamped: points behind ``ya`` get negative values.
    """
    p = np.asarray(p, dtype=np.float64)
    ya = np.asarray(ya, dtype=np.float64)
    _, u, _ = limb_axis(ya, yb, eps_len)
    q = p - ya
    z = np.sum(q * u, axis=-1)
    w = q - z[..., None] * u
    return LimbCoords(z, np.linalg.norm(w, axis=-1))


def point_segment_distance(p, ya, yb) -> np.ndarray:
    """Euclidean distance from ``p`` to the closed segment ya-yb (point distance if ya == yb)."""
    p = np.asarray(p, dtype=np.float64)
    ya = np.asarray(ya, dtype=np.float64)
    d = np.asarray(yb, dtype=np.float64) - ya
    dd = np.sum(d * d, axis=-1)
    q = p - ya
    safe = np.where(dd > 0, dd, 1.0)
    t = np.where(dd > 0, np.sum(q * d, axis=-1) / safe, 0.0)
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm(q - t[..., None] * d, axis=-1)


def gaussian_kernel(x, y, h: float):
    if not h > 0:
        raise InvalidBandwidth(f"kernel bandwidth must be positive, got {h}")
    return np.exp(-(((np.asarray(x) - np.asarray(y)) / h) ** 2))


def limb_endpoints(poses, topo: SkeletonTopology):
    """Split poses (..., J, 3) into limb endpoint arrays (..., L, 3) for ``a`` and ``b``."""
    poses = np.asarray(poses, dtype=np.float64)
    limbs = topo.limb_array
    return poses[..., limbs[:, 0], :], poses[..., limbs[:, 1], :]


def as_positions(pose) -> np.ndarray:
    if isinstance(pose, SkeletonPose):
        return pose.positions
    return np.asarray(pose, dtype=np.float64)
