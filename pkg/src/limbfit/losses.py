"""Unsupervised and supervised loss terms.

Every pose-dependent loss accepts poses shaped ``(..., J, 3)`` and returns
values shaped ``(...)``, so many candidate poses can be scored at once.
Points and assignments are shared across the leading axes.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from limbfit.errors import InvalidBandwidth, MissingFlow, ShapeMismatch, ValidationError
from limbfit.geometry import (
    EPS_LEN,
    PointCloud,
    SkeletonTopology,
    as_positions,
    limb_axis,
    limb_endpoints,
)

TERMS = ("flow", "p2l", "sym", "j2p", "seg")


@dataclass(frozen=True)
class LossConfig:
    lambda_flow: float = 0.02
    lambda_p2l: float = 0.01
    lambda_sym: float = 0.5
    lambda_j2p: float = 2.0
    lambda_seg: float = 0.5
    lambda_kp: float = 0.5
    h: float = 0.1
    eps_len: float = EPS_LEN
    eps_denom: float = 1e-12
    eps_prob: float = 1e-12

    def __post_init__(self):
        for name in ("lambda_flow", "lambda_p2l", "lambda_sym", "lambda_j2p", "lambda_seg", "lambda_kp"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"{name} must be >= 0")
        if not self.h > 0:
            raise InvalidBandwidth(f"kernel bandwidth must be positive, got {self.h}")

    @classmethod
    def stage2(cls) -> "LossConfig":
        """Weights used for in-the-wild refinement (flow 0.02, p2l 0.01, sym 0.5, j2p 2, seg 0.5)."""
        return cls()

    @classmethod
    def supp_demo(cls) -> "LossConfig":
        """Perturbation demo: only flow/p2l/sym, weighted 0.2/0.1/5."""
        return cls(lambda_flow=0.2, lambda_p2l=0.1, lambda_sym=5.0, lambda_j2p=0.0, lambda_seg=0.0)

    @classmethod
    def stage1(cls) -> "LossConfig":
        return cls(lambda_kp=0.5, lambda_seg=1.0)

    @classmethod
    def preset(cls, name: str) -> "LossConfig":
        presets = {"stage2": cls.stage2, "supp-demo": cls.supp_demo, "stage1": cls.stage1}
        try:
            return presets[name]()
        except KeyError:
            raise ValidationError(f"unknown loss preset {name!r}") from None

    def weights(self) -> dict[str, float]:
        return {t: getattr(self, f"lambda_{t}") for t in TERMS}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FramePair:
    cloud_t: PointCloud
    cloud_t1: PointCloud
    W_t: np.ndarray
    W_t1: np.ndarray
    pose_t: np.ndarray
    pose_t1: np.ndarray


def _valid_rows(cloud: PointCloud, W) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (valid index, points, W rows) with padding removed."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or len(W) != len(cloud):
        raise ShapeMismatch(f"assignment rows {W.shape[0] if W.ndim else 0} != cloud size {len(cloud)}")
    idx = np.arange(len(cloud)) if cloud.valid_mask is None else np.flatnonzero(cloud.valid_mask)
    return idx, cloud.points[idx], W[idx]


def _parent_weights(W: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """(N, L) weight of each point on each limb's labelling class."""
    return W[:, topo.limb_array[:, 0]]


def _coords(P, a, b, eps_len):
    """z, r of points P (N, 3) for limbs a, b (..., L, 3) -> arrays (..., L, N)."""
    _, u, _ = limb_axis(a, b, eps_len)
    q = P - a[..., :, None, :]
    z = np.einsum("...lnk,...lk->...ln", q, u)
    w = q - z[..., None] * u[..., :, None, :]
    return z, np.linalg.norm(w, axis=-1)


def weighted_pairs(w: np.ndarray):
    """(limb, point, weight) for every positive entry of a (N, L) weight matrix."""
    n_idx, l_idx = np.nonzero(w > 0)
    return l_idx, n_idx, w[n_idx, l_idx]


def _pair_coords(P, a, b, eps_len):
    """z, r for explicit pairs: P (M, 3), a, b (..., M, 3) -> (..., M)."""
    _, u, _ = limb_axis(a, b, eps_len)
    q = P - a
    z = np.sum(q * u, axis=-1)
    return z, np.linalg.norm(q - z[..., None] * u, axis=-1)


def _per_limb(values, limb_idx, weights, num_limbs):
    """Weighted sums of pair values (..., M) into limbs (..., L)."""
    onehot = np.zeros((len(limb_idx), num_limbs))
    onehot[np.arange(len(limb_idx)), limb_idx] = weights
    return values @ onehot


def _flow_direction(P, F, w, pose_src, pose_dst, topo, eps_len):
    """One flow direction: sum_i w_il (|dr| + |dz|) / N for every limb -> (..., L)."""
    n = len(P)
    a0, b0 = limb_endpoints(pose_src, topo)
    a1, b1 = limb_endpoints(pose_dst, topo)
    limb_axis(a0, b0, eps_len)
    limb_axis(a1, b1, eps_len)
    if n == 0:
        return np.zeros(np.shape(pose_src)[:-2] + (len(topo.limbs),))
    li, ni, wv = weighted_pairs(w)
    z0, r0 = _pair_coords(P[ni], a0[..., li, :], b0[..., li, :], eps_len)
    z1, r1 = _pair_coords(P[ni] + F[ni], a1[..., li, :], b1[..., li, :], eps_len)
    return _per_limb(np.abs(r1 - r0) + np.abs(z1 - z0), li, wv, len(topo.limbs)) / n


def flow_loss(pair: FramePair, topo: SkeletonTopology, eps_len: float = EPS_LEN):
    """Forward/backward flow consistency of limb-local (z, r) coordinates."""
    if pair.cloud_t.forward_flow is None:
        raise MissingFlow("frame t has no forward flow")
    if pair.cloud_t1.backward_flow is None:
        raise MissingFlow("frame t+1 has no backward flow")
    idx0, P0, W0 = _valid_rows(pair.cloud_t, pair.W_t)
    idx1, P1, W1 = _valid_rows(pair.cloud_t1, pair.W_t1)
    pose_t, pose_t1 = as_positions(pair.pose_t), as_positions(pair.pose_t1)
    ff = _flow_direction(P0, pair.cloud_t.forward_flow[idx0], _parent_weights(W0, topo),
                         pose_t, pose_t1, topo, eps_len)
    bf = _flow_direction(P1, pair.cloud_t1.backward_flow[idx1], _parent_weights(W1, topo),
                         pose_t1, pose_t, topo, eps_len)
    return np.mean((ff + bf) / 2.0, axis=-1)


def p2l_loss(cloud: PointCloud, W, pose, topo: SkeletonTopology, eps_len: float = EPS_LEN):
    """Weighted point-to-segment distance, averaged over points and limbs."""
    _, P, W = _valid_rows(cloud, W)
    pose = as_positions(pose)
    a, b = limb_endpoints(pose, topo)
    limb_axis(a, b, eps_len)
    if len(P) == 0:
        return np.zeros(pose.shape[:-2])
    li, ni, wv = weighted_pairs(_parent_weights(W, topo))
    pa, pb = a[..., li, :], b[..., li, :]
    d = pb - pa
    q = P[ni] - pa
    t = np.clip(np.sum(q * d, axis=-1) / np.sum(d * d, axis=-1), 0.0, 1.0)
    dist = np.linalg.norm(q - t[..., None] * d, axis=-1)
    per_limb = _per_limb(dist, li, wv, len(topo.limbs)) / len(P)
    return per_limb.mean(axis=-1)


_SYM_CACHE: "OrderedDict[tuple, dict]" = OrderedDict()
_SYM_CACHE_SIZE = 64


def _limb_sets(W: np.ndarray, a: int, J: int):
    rows = np.flatnonzero(W[:, a] > 0)
    if len(rows) == 0:
        return None
    S = W[rows, :J] @ W[:, :J].T
    cols = np.flatnonzero(np.any(S > 0, axis=0))
    union, inv = np.unique(np.concatenate([rows, cols]), return_inverse=True)
    return rows, cols, S[:, cols], union, inv[: len(rows)], inv[len(rows):]


def sym_structure(W: np.ndarray, topo: SkeletonTopology) -> dict:
    """Index structure of every limb's symmetry term, keyed by labelling class.

    Rows are points with weight on the class; columns are all points with
    positive similarity to any row. Each entry is (rows, cols, S, union,
    row_pos, col_pos), or None when the class has no points. The structure
    depends on W alone and is cached by content, because an optimizer
    re-evaluates one assignment many times.
    """
    W = np.ascontiguousarray(W, dtype=np.float64)
    J = topo.num_joints
    classes = tuple(sorted({a for a, _ in topo.limbs}))
    key = (W.shape, J, classes, hashlib.blake2b(W.view(np.uint8), digest_size=16).digest())
    hit = _SYM_CACHE.get(key)
    if hit is not None:
        _SYM_CACHE.move_to_end(key)
        return hit
    out = {a: _limb_sets(W, a, J) for a in classes}
    _SYM_CACHE[key] = out
    if len(_SYM_CACHE) > _SYM_CACHE_SIZE:
        _SYM_CACHE.popitem(last=False)
    return out


def sym_limb_terms(P, W, a_pt, b_pt, a: int, sets, h: float, eps_len: float, eps_denom: float):
    """Per-limb symmetry pieces shared with the gradient code.

    ``sets`` is this limb's entry of ``sym_structure``. Returns a dict with
    index sets and the intermediate arrays (batched over the leading axes of
    ``a_pt``/``b_pt``), or None when no point has weight on class ``a``.
    """
    if sets is None:
        return None
    rows, cols, S, union, row_pos, col_pos = sets
    z, r = _coords(P[union], a_pt[..., None, :], b_pt[..., None, :], eps_len)
    z, r = z[..., 0, :], r[..., 0, :]
    zi, zj = z[..., row_pos], z[..., col_pos]
    diff = zi[..., :, None] - zj[..., None, :]
    K = np.exp(-((diff / h) ** 2))
    A = K * S
    D = A.sum(axis=-1)
    ok = D > eps_denom
    rj = r[..., col_pos]
    rbar = np.where(ok, np.einsum("...ij,...j->...i", A, rj) / np.where(ok, D, 1.0), 0.0)
    e = np.where(ok, r[..., row_pos] - rbar, 0.0)
    return dict(union=union, row_pos=row_pos, col_pos=col_pos, rows=rows, z=z, r=r,
                diff=diff, A=A, D=D, ok=ok, rbar=rbar, e=e, w=W[rows, a])


def sym_loss(cloud: PointCloud, W, pose, topo: SkeletonTopology, h: float = 0.1,
             eps_len: float = EPS_LEN, eps_denom: float = 1e-12):
    """Squared deviation of each point's radius from its kernel-weighted neighbourhood mean."""
    if not h > 0:
        raise InvalidBandwidth(f"kernel bandwidth must be positive, got {h}")
    _, P, W = _valid_rows(cloud, W)
    pose = as_positions(pose)
    a_pt, b_pt = limb_endpoints(pose, topo)
    limb_axis(a_pt, b_pt, eps_len)
    out = np.zeros(pose.shape[:-2])
    if len(P) == 0:
        return out
    structure = sym_structure(W, topo)
    for l, (a, _) in enumerate(topo.limbs):
        t = sym_limb_terms(P, W, a_pt[..., l, :], b_pt[..., l, :], a, structure[a], h, eps_len, eps_denom)
        if t is None:
            continue
        out = out + np.einsum("...i,i->...", t["e"] ** 2, t["w"]) / len(P)
    return out / len(topo.limbs)


def part_centroids(cloud: PointCloud, W, num_joints: int, eps_denom: float = 1e-12):
    """Weighted centroid of each part class; returns (centroids (J, 3), nonempty mask)."""
    _, P, W = _valid_rows(cloud, W)
    mass = W[:, :num_joints].sum(axis=0)
    ok = mass > eps_denom
    cent = np.zeros((num_joints, 3))
    cent[ok] = (W[:, :num_joints].T @ P)[ok] / mass[ok, None]
    return cent, ok


def j2p_loss(cloud: PointCloud, W, pose, eps_denom: float = 1e-12, diagnostics: list | None = None):
    """Mean distance of each joint to the centroid of its part.

    Joints whose part has no mass contribute 0; their indices are appended to
    ``diagnostics`` when a list is given.
    """
    pose = as_positions(pose)
    J = pose.shape[-2]
    cent, ok = part_centroids(cloud, W, J, eps_denom)
    if diagnostics is not None:
        diagnostics.extend(int(j) for j in np.flatnonzero(~ok))
    dist = np.linalg.norm(pose - cent, axis=-1)
    return np.sum(np.where(ok, dist, 0.0), axis=-1) / J


def seg_cross_entropy(W_pred, W_gt, eps_prob: float = 1e-12) -> float:
    W_pred = np.asarray(W_pred, dtype=np.float64)
    W_gt = np.asarray(W_gt, dtype=np.float64)
    if W_pred.shape != W_gt.shape:
        raise ShapeMismatch(f"{W_pred.shape} != {W_gt.shape}")
    return float(-np.sum(W_gt * np.log(np.maximum(W_pred, eps_prob))))


def kp_l2(pred, gt):
    """Mean per-joint Euclidean distance."""
    pred, gt = as_positions(pred), as_positions(gt)
    if pred.shape[-2:] != gt.shape[-2:]:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def surrogate_seg_loss(W, eps_prob: float = 1e-12) -> float:
    """Cross entropy of a fixed assignment against the one-hot of its own argmax."""
    W = np.asarray(W, dtype=np.float64)
    if len(W) == 0:
        return 0.0
    hard = np.zeros_like(W)
    hard[np.arange(len(W)), W.argmax(axis=1)] = 1.0
    return seg_cross_entropy(W, hard, eps_prob)


def stage1_objective(pred_pose, gt_pose, W_pred, W_gt, config: LossConfig) -> float:
    return float(config.lambda_kp * kp_l2(pred_pose, gt_pose)
                 + config.lambda_seg * seg_cross_entropy(W_pred, W_gt, config.eps_prob))


def combine(terms: dict, config: LossConfig):
    w = config.weights()
    return sum(w[k] * terms[k] for k in TERMS)


def sequence_terms(clouds: Sequence[PointCloud], poses, Ws, topo: SkeletonTopology,
                   config: LossConfig, skip_zero_weight: bool = False) -> dict:
    """Per-term values of the refinement objective over a frame sequence.

    Flow is averaged over consecutive pairs, the per-frame terms over frames.
    ``poses`` may carry extra leading batch axes: (..., T, J, 3).
    """
    poses = np.asarray(poses, dtype=np.float64)
    T = len(clouds)
    if poses.shape[-3] != T or len(Ws) != T:
        raise ShapeMismatch("poses, clouds and assignments must have the same frame count")
    batch = poses.shape[:-3]
    w = config.weights()
    terms = {k: np.zeros(batch) for k in TERMS}

    def want(k):
        return not (skip_zero_weight and w[k] == 0)

    if T > 1 and want("flow"):
        for t in range(T - 1):
            pair = FramePair(clouds[t], clouds[t + 1], Ws[t], Ws[t + 1], poses[..., t, :, :], poses[..., t + 1, :, :])
            terms["flow"] = terms["flow"] + flow_loss(pair, topo, config.eps_len)
        terms["flow"] = terms["flow"] / (T - 1)
    for t in range(T):
        pose = poses[..., t, :, :]
        if want("p2l"):
            terms["p2l"] = terms["p2l"] + p2l_loss(clouds[t], Ws[t], pose, topo, config.eps_len)
        if want("sym"):
            terms["sym"] = terms["sym"] + sym_loss(clouds[t], Ws[t], pose, topo, config.h,
                                                   config.eps_len, config.eps_denom)
        if want("j2p"):
            terms["j2p"] = terms["j2p"] + j2p_loss(clouds[t], Ws[t], pose, config.eps_denom)
        if want("seg"):
            _, _, Wv = _valid_rows(clouds[t], Ws[t])
            terms["seg"] = terms["seg"] + surrogate_seg_loss(Wv, config.eps_prob)
    for k in ("p2l", "sym", "j2p", "seg"):
        terms[k] = terms[k] / T
    return terms


def stage2_objective(pair: FramePair, topo: SkeletonTopology, config: LossConfig) -> float:
    """Weighted refinement objective for one frame pair."""
    poses = np.stack([as_positions(pair.pose_t), as_positions(pair.pose_t1)])
    terms = sequence_terms([pair.cloud_t, pair.cloud_t1], poses, [pair.W_t, pair.W_t1], topo, config)
    return float(combine(terms, config))


def sequence_objective(clouds, poses, Ws, topo, config: LossConfig):
    terms = sequence_terms(clouds, poses, Ws, topo, config)
    return combine(terms, config), terms
