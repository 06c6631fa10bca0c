"""Per-point scene flow providers: exact synthetic flow and two simple estimators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from limbfit.errors import EmptyCloud, MissingAttachment, ShapeMismatch, ValidationError
from limbfit.geometry import PointCloud


@dataclass
class FlowField:
    forward: np.ndarray  # (N_t, 3) displacement of frame-t points
    backward: np.ndarray  # (N_t1, 3) displacement of frame-(t+1) points

    def __post_init__(self):
        self.forward = np.asarray(self.forward, dtype=np.float64).reshape(-1, 3)
        self.backward = np.asarray(self.backward, dtype=np.float64).reshape(-1, 3)
        if not (np.all(np.isfinite(self.forward)) and np.all(np.isfinite(self.backward))):
            raise ValidationError("flow field contains non-finite values")

    def check(self, n_t: int, n_t1: int) -> "FlowField":
        if len(self.forward) != n_t or len(self.backward) != n_t1:
            raise ShapeMismatch("flow field sizes do not match the frames")
        return self

    def apply(self, cloud_t: PointCloud, cloud_t1: PointCloud) -> tuple[PointCloud, PointCloud]:
        """Copies of the two clouds carrying this field."""
        self.check(len(cloud_t), len(cloud_t1))
        return cloud_t.with_fields(forward_flow=self.forward), cloud_t1.with_fields(backward_flow=self.backward)


def gt_flow_provider(cloud_t: PointCloud, cloud_t1: PointCloud, kin_t=None, kin_t1=None) -> FlowField:
    """Exact flow of limb-attached points.

    With the two frames' kinematics the field is recomputed from the limb
    attachments; without them the flows stored on the clouds are returned.
    """
    if kin_t is not None and kin_t1 is not None:
        from limbfit.synth.sequence import exact_flow

        fwd = exact_flow(cloud_t.limb_id, cloud_t.local, kin_t, kin_t1)
        bwd = exact_flow(cloud_t1.limb_id, cloud_t1.local, kin_t1, kin_t)
        return FlowField(fwd, bwd)
    if cloud_t.forward_flow is None or cloud_t1.backward_flow is None:
        raise MissingAttachment("clouds carry no exact flow and no kinematics were given")
    return FlowField(cloud_t.forward_flow, cloud_t1.backward_flow)


def _points(cloud) -> np.ndarray:
    P = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise EmptyCloud("flow needs nonempty frames")
    return P


def nn_flow(cloud_t, cloud_t1) -> FlowField:
    """Nearest neighbour in the other frame minus the point, both directions."""
    A, B = _points(cloud_t), _points(cloud_t1)
    fwd = B[cKDTree(B).query(A)[1]] - A
    bwd = A[cKDTree(A).query(B)[1]] - B
    return FlowField(fwd, bwd)


def kabsch(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation R and translation t with ``dst ~ src @ R.T + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    sign = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    D = np.diag([1.0, 1.0, sign])
    R = Vt.T @ D @ U.T
    return R, cd - cs @ R.T


def icp(src, dst, iters: int = 50, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Rigid alignment of ``src`` onto ``dst`` by nearest-neighbour ICP.

    Starts from the centroid translation. Fewer than three source points
    give the translation only.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    R = np.eye(3)
    t = dst.mean(axis=0) - src.mean(axis=0)
    if len(src) < 3 or len(dst) < 3:
        return R, t
    tree = cKDTree(dst)
    prev = np.inf
    for _ in range(iters):
        moved = src @ R.T + t
        dist, idx = tree.query(moved)
        R, t = kabsch(src, dst[idx])
        err = float(np.mean(dist**2))
        if prev - err <= tol:
            break
        prev = err
    return R, t


def rigid_part_flow(cloud_t, labels_t, cloud_t1, labels_t1, iters: int = 50) -> FlowField:
    """Flow from one rigid transform per label, estimated by ICP between the frames.

    Labels present in only one frame get zero flow.
    """
    A, B = _points(cloud_t), _points(cloud_t1)
    la, lb = np.asarray(labels_t), np.asarray(labels_t1)
    if len(la) != len(A) or len(lb) != len(B):
        raise ShapeMismatch("one label per point required")
    fwd = np.zeros_like(A)
    bwd = np.zeros_like(B)
    for c in np.intersect1d(la, lb):
        ma, mb = la == c, lb == c
        R, t = icp(A[ma], B[mb], iters)
        fwd[ma] = A[ma] @ R.T + t - A[ma]
        # inverse transform: p = R^T (q - t)
        bwd[mb] = (B[mb] - t) @ R - B[mb]
    return FlowField(fwd, bwd)


def estimate_flow(kind: str, cloud_t: PointCloud, cloud_t1: PointCloud, labels_t=None, labels_t1=None,
                  kin_t=None, kin_t1=None) -> FlowField:
    """Dispatch by provider name: ``gt``, ``nn`` or ``rigid``."""
    if kind == "gt":
        return gt_flow_provider(cloud_t, cloud_t1, kin_t, kin_t1)
    if kind == "nn":
        return nn_flow(cloud_t, cloud_t1)
    if kind == "rigid":
        if labels_t is None or labels_t1 is None:
            raise ValidationError("rigid flow needs labels for both frames")
        return rigid_part_flow(cloud_t, labels_t, cloud_t1, labels_t1)
    raise ValidationError(f"unknown flow provider {kind!r}")


def attach_flows(clouds, kind: str, labels: Optional[list] = None) -> list[PointCloud]:
    """Copies of a sequence's clouds with forward/backward flow from the chosen provider."""
    out = [c.copy() for c in clouds]
    if kind == "gt":
        for c in out:
            n = len(c)
            if c.forward_flow is None:
                c.forward_flow = np.zeros((n, 3))
            if c.backward_flow is None:
                c.backward_flow = np.zeros((n, 3))
        return out
    for k in range(len(out) - 1):
        lt = labels[k] if labels is not None else None
        lt1 = labels[k + 1] if labels is not None else None
        f = estimate_flow(kind, out[k], out[k + 1], lt, lt1)
        out[k].forward_flow = f.forward
        out[k + 1].backward_flow = f.backward
    return out
