"""Label-free part segmentation from KMeans clusters tracked across frames."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from limbfit.errors import EmptyCluster, EmptySet, LabelOutOfRange, TooFewPoints, ValidationError
from limbfit.evaluation import hungarian
from limbfit.geometry import point_segment_distance


@dataclass
class ClusterLabeling:
    labels: np.ndarray  # (N,) cluster index in [0, K)
    centers: np.ndarray  # (K, 3)
    inertia: float
    history: Optional[list[float]] = None  # inertia after every Lloyd iteration

    @property
    def num_clusters(self) -> int:
        return len(self.centers)

    def relabeled(self, perm) -> "ClusterLabeling":
        """Rename cluster c to ``perm[c]``."""
        perm = np.asarray(perm, dtype=np.int64)
        centers = np.empty_like(self.centers)
        centers[perm] = self.centers
        return ClusterLabeling(perm[self.labels], centers, self.inertia, self.history)


def _sq_dist(points, centers):
    return np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=-1)


def _kmeans_pp(points, K, rng):
    """Greedy k-means++: each step draws 2 + ln K candidates by D^2 weighting and keeps the best."""
    n = len(points)
    trials = 2 + int(np.log(K))
    idx = [int(rng.integers(n))]
    d2 = np.sum((points - points[idx[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # every point already coincides with a chosen center
            rest = np.setdiff1d(np.arange(n), idx)
            nxt = int(rest[0])
            d2_new = np.sum((points - points[nxt]) ** 2, axis=1)
        else:
            cand = np.searchsorted(np.cumsum(d2), rng.uniform(0, total, size=trials), side="right")
            cand = np.minimum(cand, n - 1)
            d2_cand = np.minimum(d2, _sq_dist(points, points[cand]).T)
            best = int(np.argmin(d2_cand.sum(axis=1)))
            nxt, d2_new = int(cand[best]), d2_cand[best]
        idx.append(nxt)
        d2 = np.minimum(d2, d2_new)
    return points[idx].copy()


def kmeans(points, K: int, seed: int = 0, max_iters: int = 100) -> ClusterLabeling:
    """Lloyd iterations from a k-means++ start until the assignment stops changing.

    An empty cluster is reseeded at the point farthest from its center, which
    can only lower the inertia. The inertia after each iteration is checked to
    be non-increasing.
    """
    P = np.asarray(points, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if K < 1:
        raise ValidationError("K must be >= 1")
    if len(P) < K:
        raise TooFewPoints(f"{len(P)} points for K={K}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(P, K, rng)
    labels = None
    history: list[float] = []
    for _ in range(max(int(max_iters), 1)):
        d2 = _sq_dist(P, centers)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=K)
        for c in np.flatnonzero(counts == 0):
            own = d2[np.arange(len(P)), new]
            # only steal from clusters that keep at least one member
            own = np.where(counts[new] > 1, own, -1.0)
            far = int(np.argmax(own))
            counts[new[far]] -= 1
            new[far] = c
            counts[c] = 1
            centers[c] = P[far]
        for c in range(K):
            centers[c] = P[new == c].mean(axis=0)
        inertia = float(np.sum((P - centers[new]) ** 2))
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-15:
            raise AssertionError(f"KMeans inertia rose from {history[-1]} to {inertia}")
        history.append(inertia)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    return ClusterLabeling(labels, centers, history[-1], history)


def _as_set(A):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if len(A) == 0:
        raise EmptySet("Chamfer distance needs two nonempty sets")
    return A


def chamfer_distance(A, B) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    A, B = _as_set(A), _as_set(B)
    ab = cKDTree(B).query(A)[0]
    ba = cKDTree(A).query(B)[0]
    return float(ab.mean() + ba.mean())


def chamfer_matrix(points_t, labels_t, points_t1, labels_t1, K: int) -> np.ndarray:
    sets_t = [np.asarray(points_t)[labels_t == c] for c in range(K)]
    sets_t1 = [np.asarray(points_t1)[labels_t1 == c] for c in range(K)]
    if any(len(s) == 0 for s in sets_t + sets_t1):
        raise EmptyCluster("every cluster needs at least one point")
    return np.array([[chamfer_distance(a, b) for b in sets_t1] for a in sets_t])


def match_clusters(labeling_t: ClusterLabeling, points_t, labeling_t1: ClusterLabeling, points_t1) -> np.ndarray:
    """Permutation ``perm`` with cluster c of frame t matched to ``perm[c]`` of frame t+1."""
    K = labeling_t.num_clusters
    if labeling_t1.num_clusters != K:
        raise ValidationError("both labelings need the same K")
    cost = chamfer_matrix(points_t, labeling_t.labels, points_t1, labeling_t1.labels, K)
    return hungarian(cost).cols


def propagate_labels(frames: Sequence, K: int, seed: int = 0, max_iters: int = 100) -> list[ClusterLabeling]:
    """Cluster each frame, then rename clusters so indices follow frame 0 through the chain."""
    if len(frames) == 0:
        raise ValidationError("sequence is empty")
    out = [kmeans(frames[0], K, seed, max_iters)]
    for prev_pts, pts in zip(frames[:-1], frames[1:]):
        cur = kmeans(pts, K, seed, max_iters)
        perm = match_clusters(out[-1], prev_pts, cur, pts)
        # perm maps previous index -> current index; invert to rename current clusters
        inv = np.empty(K, dtype=np.int64)
        inv[perm] = np.arange(K)
        out.append(cur.relabeled(inv))
    return out


def to_one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    W = np.zeros((len(labels), num_classes))
    W[np.arange(len(labels)), labels.astype(np.int64)] = 1.0
    return W


def foreground_mask(points, ground_height: float = 0.05, radius: float = 1.0, center=None) -> np.ndarray:
    """Points above the ground and within ``radius`` (horizontal) of the body center.

    The default center is the per-axis median of the points above the ground,
    which is robust to a minority of clutter.
    """
    P = np.asarray(points, dtype=np.float64)
    above = P[:, 2] > ground_height
    if center is None:
        ref = P[above] if np.any(above) else P
        center = np.median(ref[:, :2], axis=0) if len(ref) else np.zeros(2)
    horiz = np.linalg.norm(P[:, :2] - np.asarray(center)[:2], axis=1)
    return above & (horiz <= radius)


def _yaw(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def template_class_map(centers, counts, seg_a, seg_b, seg_classes, yaw_steps: int = 72,
                       refine_iters: int = 5) -> np.ndarray:
    """Name each cluster after the nearest limb of a standing-pose template.

    Several clusters may share a class (a torso usually splits in two).
    The template is searched over ``yaw_steps`` headings; for each heading
    the horizontal offset is refined by re-centering on the member-weighted
    residuals. The heading with the lowest weighted distance wins. A
    symmetric body cannot tell front from back, so left and right may come
    out swapped.
    """
    C = np.asarray(centers, dtype=np.float64)
    w = np.asarray(counts, dtype=np.float64)
    A = np.asarray(seg_a, dtype=np.float64)
    B = np.asarray(seg_b, dtype=np.float64)
    ref = np.sum(w[:, None] * C, axis=0) / max(w.sum(), 1e-12)
    mid = 0.5 * (A + B)
    base = C - np.array([ref[0], ref[1], 0.0]) + np.array([*mid[:, :2].mean(axis=0), 0.0])
    best_cost, best_idx = np.inf, None
    for theta in 2 * np.pi * np.arange(yaw_steps) / yaw_steps:
        R = _yaw(theta)
        X = base @ R.T
        shift = np.zeros(3)
        for _ in range(refine_iters):
            d = point_segment_distance((X + shift)[:, None, :], A[None], B[None])
            idx = np.argmin(d, axis=1)
            # move toward the matched segment midpoints horizontally
            delta = np.sum(w[:, None] * (mid[idx] - (X + shift)), axis=0) / max(w.sum(), 1e-12)
            shift[:2] += 0.5 * delta[:2]
        d = point_segment_distance((X + shift)[:, None, :], A[None], B[None])
        idx = np.argmin(d, axis=1)
        cost = float(np.sum(w * d[np.arange(len(C)), idx]))
        if cost < best_cost - 1e-12:
            best_cost, best_idx = cost, idx
    return np.asarray(seg_classes, dtype=np.int64)[best_idx]


def segment_sequence(clouds, seg_a, seg_b, seg_classes, num_classes: int, background_class: int,
                     seed: int = 0, max_iters: int = 100, ground_height: float = 0.05,
                     radius: float = 1.0) -> list[np.ndarray]:
    """One-hot assignments for every frame from KMeans with tracked cluster identities.

    Clutter rejected by ``foreground_mask`` goes to ``background_class``;
    the remaining points take the class of their tracked cluster, which is
    named once on the first (standing) frame.
    """
    K = len(seg_classes)
    masks = [foreground_mask(c.points, ground_height, radius) for c in clouds]
    fg = [c.points[m] for c, m in zip(clouds, masks)]
    labelings = propagate_labels(fg, K, seed, max_iters)
    first = labelings[0]
    cls = template_class_map(first.centers, np.bincount(first.labels, minlength=K), seg_a, seg_b, seg_classes)
    out = []
    for c, m, lab in zip(clouds, masks, labelings):
        labels = np.full(len(c), background_class, dtype=np.int64)
        labels[m] = cls[lab.labels]
        out.append(to_one_hot(labels, num_classes))
    return out
