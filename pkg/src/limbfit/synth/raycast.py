"""Spinning-LiDAR ray caster against capsule bodies."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from limbfit.errors import EmptyCloud, InvalidConfig
from limbfit.geometry import point_segment_distance


@dataclass(frozen=True)
class RayCasterConfig:
    azimuth_steps: int = 2650
    beams: int = 64
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 3.0
    origin: tuple[float, float, float] = (0.0, 0.0, 1.5)
    max_range: float = 75.0

    def __post_init__(self):
        if self.azimuth_steps < 1 or self.beams < 1:
            raise InvalidConfig("azimuth_steps and beams must be >= 1")
        if self.elevation_max_deg < self.elevation_min_deg:
            raise InvalidConfig("elevation range is inverted")
        if not self.max_range > 0:
            raise InvalidConfig("max_range must be positive")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def azimuths(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps

    @property
    def elevations(self) -> np.ndarray:
        if self.beams == 1:
            return np.array([np.deg2rad(0.5 * (self.elevation_min_deg + self.elevation_max_deg))])
        return np.deg2rad(np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.beams))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["origin"] = list(self.origin)
        return d


class RayHits(NamedTuple):
    points: np.ndarray  # (M, 3)
    capsule: np.ndarray  # (M,) index of the capsule hit first
    ranges: np.ndarray  # (M,)


def _directions(az, el) -> np.ndarray:
    A, E = np.meshgrid(az, el, indexing="ij")
    A, E = A.ravel(), E.ravel()
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=1)


def _sphere_entry(o, d, center, radius):
    """First positive hit of rays (M, 3) on spheres (L, 3) -> (M, L), inf when missed."""
    oc = o - center  # (L, 3)
    b = d @ oc.T  # (M, L)
    c = np.sum(oc * oc, axis=1) - radius**2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    t = -b - root
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _cylinder_entry(o, d, a, b, radius):
    """First positive hit on the open cylinder side between a and b -> (M, L)."""
    ba = b - a
    oa = o - a
    baba = np.sum(ba * ba, axis=1)
    bard = d @ ba.T
    baoa = np.sum(ba * oa, axis=1)
    rdoa = d @ oa.T
    oaoa = np.sum(oa * oa, axis=1)
    k2 = baba - bard**2
    k1 = baba * rdoa - baoa * bard
    k0 = baba * oaoa - baoa**2 - radius**2 * baba
    h = k1 * k1 - k2 * k0
    ok = (k2 > 1e-12 * np.maximum(baba, 1e-300)) & (h >= 0)
    t = np.where(ok, (-k1 - np.sqrt(np.maximum(h, 0.0))) / np.where(ok, k2, 1.0), np.inf)
    y = baoa + np.where(ok, t, 0.0) * bard
    inside = ok & (t > 0) & (y >= 0) & (y <= baba)
    return np.where(inside, t, np.inf)


def intersect_capsules(origin, directions, a, b, radius) -> tuple[np.ndarray, np.ndarray]:
    """Nearest capsule hit per ray: returns (t, capsule index); t = inf for misses.

    The capsule is the union of two end spheres and the cylinder side, so the
    first entry is the minimum over those three pieces (the ray starts outside).
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    radius = np.asarray(radius, dtype=np.float64).reshape(-1)
    t = np.minimum(_sphere_entry(o, d, a, radius), _sphere_entry(o, d, b, radius))
    t = np.minimum(t, _cylinder_entry(o, d, a, b, radius))
    idx = np.argmin(t, axis=1)
    return t[np.arange(len(d)), idx], idx


def _window(values, center, half, period=None):
    diff = values - center
    if period is not None:
        diff = (diff + period / 2) % period - period / 2
    return np.abs(diff) <= half


def raycast(a, b, radius, config: RayCasterConfig) -> RayHits:
    """Cast the sensor's ray grid against capsules with endpoints a, b (L, 3).

    Only rays inside the angular window of the capsules' bounding sphere are
    traced; no ray outside that window can hit.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    radius = np.asarray(radius, dtype=np.float64).reshape(-1)
    o = np.asarray(config.origin)
    ends = np.vstack([a, b])
    center = ends.mean(axis=0)
    bound = np.max(np.linalg.norm(ends - center, axis=1)) + radius.max()
    rel = center - o
    dist = np.linalg.norm(rel)
    horiz = np.linalg.norm(rel[:2])
    az, el = config.azimuths, config.elevations
    az_step = 2 * np.pi / config.azimuth_steps
    el_step = (el[-1] - el[0]) / max(config.beams - 1, 1)
    if dist > bound and horiz > bound:
        az = az[_window(az, np.arctan2(rel[1], rel[0]), np.arcsin(bound / horiz) + az_step, 2 * np.pi)]
        el = el[_window(el, np.arcsin(rel[2] / dist), np.arcsin(bound / dist) + el_step)]
    dirs = _directions(az, el)
    if len(dirs) == 0:
        raise EmptyCloud("no ray passes near the body")
    t, idx = intersect_capsules(o, dirs, a, b, radius)
    hit = np.isfinite(t) & (t <= config.max_range)
    if not np.any(hit):
        raise EmptyCloud("no ray hit the body")
    return RayHits(o + t[hit, None] * dirs[hit], idx[hit], t[hit])


def capsule_surface_distance(points, a, b, radius) -> np.ndarray:
    """Unsigned distance of each point to the nearest capsule surface (L capsules)."""
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    seg = point_segment_distance(p, np.asarray(a)[None], np.asarray(b)[None])
    return np.min(np.abs(seg - np.asarray(radius)[None]), axis=1)
