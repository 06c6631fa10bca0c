"""Two-frame sample augmentation. Both frames always share one draw of parameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from limbfit.errors import InvalidConfig
from limbfit.geometry import PointCloud


@dataclass(frozen=True)
class AugmentationConfig:
    downsample: bool = False
    keep_fraction: float = 0.8
    mask: bool = False
    mask_size: float = 0.35  # edge of the removed cube, meters
    ground: bool = False
    ground_clusters: int = 2
    ground_points: int = 40
    background: bool = False
    background_clusters: int = 2
    background_points: int = 40
    cluster_spread: float = 0.15
    second_person: bool = False
    second_person_offset: tuple[float, float] = (0.8, 1.6)
    noise: bool = False
    noise_sigma: float = 0.01
    scale: bool = False
    scale_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise InvalidConfig("keep_fraction must be in (0, 1]")
        if self.noise_sigma < 0 or self.mask_size < 0 or self.cluster_spread < 0:
            raise InvalidConfig("sizes and sigma must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise InvalidConfig("scale range must be positive and ordered")
        lo, hi = self.second_person_offset
        if not 0 <= lo <= hi:
            raise InvalidConfig("second person offset range must be ordered")
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        object.__setattr__(self, "second_person_offset", tuple(self.second_person_offset))

    @classmethod
    def all_enabled(cls, **kw) -> "AugmentationConfig":
        on = dict(downsample=True, mask=True, ground=True, background=True,
                  second_person=True, noise=True, scale=True)
        on.update(kw)
        return cls(**on)

    @property
    def enabled(self) -> bool:
        return any((self.downsample, self.mask, self.ground, self.background,
                    self.second_person, self.noise, self.scale))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["second_person_offset"] = list(self.second_person_offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TwoFrameSample:
    clouds: list[PointCloud]
    poses: np.ndarray  # (2, J, 3)
    visible: np.ndarray  # (2, J)

    @property
    def num_joints(self) -> int:
        return self.poses.shape[1]


def _clutter(points: np.ndarray, J: int) -> PointCloud:
    n = len(points)
    zeros = np.zeros((n, 3))
    return PointCloud(points, forward_flow=zeros, backward_flow=zeros, gt_label=np.full(n, J),
                      limb_id=np.full(n, -1), local=zeros)


def _concat(a: PointCloud, b: PointCloud) -> PointCloud:
    kw = {"points": np.vstack([a.points, b.points])}
    for name in PointCloud._vec_fields:
        va, vb = getattr(a, name), getattr(b, name)
        if va is not None:
            kw[name] = np.vstack([va, vb if vb is not None else np.zeros((len(b), 3))])
    for name in PointCloud._int_fields:
        va, vb = getattr(a, name), getattr(b, name)
        if va is not None:
            kw[name] = np.concatenate([va, vb])
    return PointCloud(**kw)



def augment(sample: TwoFrameSample, config: AugmentationConfig,
            rng: Optional[np.random.Generator] = None) -> TwoFrameSample:
    """Apply the enabled augmentations, drawing each parameter once for both frames.

    Injected points (ground, background, second person) are background class
    with zero flow and no limb attachment.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    J = sample.num_joints
    clouds = [c.copy() for c in sample.clouds]
    poses = np.array(sample.poses, dtype=np.float64, copy=True)
    center = np.array([*poses[0].mean(axis=0)[:2], 0.0])

    if config.scale:
        s = rng.uniform(*config.scale_range)
        poses = center + s * (poses - center)
        for c in clouds:
            c.points = center + s * (c.points - center)
            for name in ("forward_flow", "backward_flow", "local"):
                val = getattr(c, name)
                if val is not None:
                    setattr(c, name, s * val)

    if config.second_person:
        offset = rng.uniform(*config.second_person_offset)
        direction = rng.uniform(0, 2 * np.pi)
        yaw = Rotation.from_euler("z", rng.uniform(0, 360), degrees=True).as_matrix()
        shift = offset * np.array([np.cos(direction), np.sin(direction), 0.0])
        clouds = [_concat(c, _clutter((c.points[c.limb_id >= 0] - center) @ yaw.T + center + shift, J))
                  if c.limb_id is not None else c for c in clouds]

    if config.ground:
        patches = []
        for _ in range(config.ground_clusters):
            mid = center + np.array([*rng.normal(0.0, 0.6, size=2), 0.0])
            xy = rng.normal(0.0, config.cluster_spread * 2, size=(config.ground_points, 2))
            patches.append(np.column_stack([xy, np.zeros(len(xy))]) + mid)
        ground = np.vstack(patches) if patches else np.zeros((0, 3))
        clouds = [_concat(c, _clutter(ground, J)) for c in clouds]

    if config.background:
        blobs = []
        for _ in range(config.background_clusters):
            ang = rng.uniform(0, 2 * np.pi)
            mid = center + np.array([1.2 * np.cos(ang), 1.2 * np.sin(ang), rng.uniform(0.2, 1.6)])
            blobs.append(mid + rng.normal(0.0, config.cluster_spread, size=(config.background_points, 3)))
        bg = np.vstack(blobs) if blobs else np.zeros((0, 3))
        clouds = [_concat(c, _clutter(bg, J)) for c in clouds]

    if config.mask:
        lo = center + np.array([*rng.uniform(-0.3, 0.3, size=2), rng.uniform(0.0, 1.5)]) - config.mask_size / 2
        hi = lo + config.mask_size
        clouds = [c.subset(~np.all((c.points >= lo) & (c.points <= hi), axis=1)) for c in clouds]

    if config.downsample:
        frac = config.keep_fraction
        # one seed for both frames so the subsampling pattern is the same draw
        sub_seed = int(rng.integers(2**31))
        kept = []
        for c in clouds:
            sub = np.random.default_rng(sub_seed)
            k = int(round(frac * len(c)))
            kept.append(c.subset(np.sort(sub.choice(len(c), size=k, replace=False))))
        clouds = kept

    if config.noise and config.noise_sigma > 0:
        for c in clouds:
            c.points = c.points + rng.normal(0.0, config.noise_sigma, size=c.points.shape)

    return TwoFrameSample(clouds, poses, np.array(sample.visible, copy=True))
