"""Analytic keypoint gradients of the refinement objective, plus a finite-difference checker.

Subgradient conventions: d|x|/dx = 0 at x = 0, a zero-length radial or
displacement vector has zero gradient, and the point-to-segment distance
uses the interior (radial) formula whenever the foot parameter lies in
[0, 1] inclusive.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from limbfit.errors import InvalidBandwidth, MissingFlow, ShapeMismatch
from limbfit.geometry import EPS_LEN, PointCloud, SkeletonTopology, as_positions, limb_axis, limb_endpoints
from limbfit.losses import (
    TERMS,
    LossConfig,
    _valid_rows,
    part_centroids,
    sym_limb_terms,
    sym_structure,
    weighted_pairs,
)


def _incidence(topo: SkeletonTopology) -> tuple[np.ndarray, np.ndarray]:
    J, limbs = topo.num_joints, topo.limb_array
    Ma = np.zeros((J, len(limbs)))
    Mb = np.zeros((J, len(limbs)))
    Ma[limbs[:, 0], np.arange(len(limbs))] = 1.0
    Mb[limbs[:, 1], np.arange(len(limbs))] = 1.0
    return Ma, Mb


def _scatter(topo, ga, gb):
    """Accumulate per-limb endpoint gradients (..., L, 3) into joints (..., J, 3)."""
    Ma, Mb = _incidence(topo)
    return np.einsum("jl,...lk->...jk", Ma, ga) + np.einsum("jl,...lk->...jk", Mb, gb)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def coord_jacobians(P, a, b, eps_len: float = EPS_LEN):
    """z, r of points P (N, 3) w.r.t. limbs a, b (..., L, 3) and their endpoint gradients.

    Returns z, r (..., L, N) and dz_da, dz_db, dr_da, dr_db (..., L, N, 3).
    """
    _, u, length = limb_axis(a, b, eps_len)
    u = u[..., :, None, :]
    length = length[..., :, None, None]
    q = P - a[..., :, None, :]
    z = np.sum(q * u, axis=-1)
    w = q - z[..., None] * u
    r = np.linalg.norm(w, axis=-1)
    w_hat = _unit(w)
    dz_db = w / length
    dz_da = -u - dz_db
    ratio = z[..., None] / length
    dr_db = -ratio * w_hat
    dr_da = -w_hat - dr_db
    return z, r, dz_da, dz_db, dr_da, dr_db


def pair_jacobians(P, a, b, eps_len: float = EPS_LEN):
    """Like ``coord_jacobians`` for explicit (point, limb) pairs: P, a, b all (M, 3)."""
    _, u, length = limb_axis(a, b, eps_len)
    length = length[:, None]
    q = P - a
    z = np.sum(q * u, axis=-1)
    w = q - z[:, None] * u
    r = np.linalg.norm(w, axis=-1)
    w_hat = _unit(w)
    dz_db = w / length
    dz_da = -u - dz_db
    dr_db = -(z[:, None] / length) * w_hat
    dr_da = -w_hat - dr_db
    return z, r, dz_da, dz_db, dr_da, dr_db


def _limb_sum(topo, limb_idx, ga, gb):
    """Sum pair gradients (M, 3) per limb, then scatter into joints (J, 3)."""
    L = len(topo.limbs)
    sa = np.zeros((L, 3))
    sb = np.zeros((L, 3))
    for k in range(3):
        sa[:, k] = np.bincount(limb_idx, weights=ga[:, k], minlength=L)
        sb[:, k] = np.bincount(limb_idx, weights=gb[:, k], minlength=L)
    return _scatter(topo, sa, sb)


def _flow_direction_grad(P, F, w, pose_src, pose_dst, topo, eps_len):
    """Gradients of one flow direction (per-limb sum, not yet averaged) w.r.t. both poses.

    Only (limb, point) pairs with positive weight are evaluated, so a one-hot
    assignment costs one limb per point.
    """
    n = len(P)
    a0, b0 = limb_endpoints(pose_src, topo)
    a1, b1 = limb_endpoints(pose_dst, topo)
    limb_axis(a0, b0, eps_len)
    limb_axis(a1, b1, eps_len)
    zeros = np.zeros(np.shape(pose_src))
    if n == 0:
        return zeros, zeros.copy()
    li, ni, wv = weighted_pairs(w)
    z0, r0, dz0a, dz0b, dr0a, dr0b = pair_jacobians(P[ni], a0[li], b0[li], eps_len)
    z1, r1, dz1a, dz1b, dr1a, dr1b = pair_jacobians(P[ni] + F[ni], a1[li], b1[li], eps_len)
    sr = (np.sign(r1 - r0) * wv / n)[:, None]
    sz = (np.sign(z1 - z0) * wv / n)[:, None]
    g_src = _limb_sum(topo, li, sr * dr0a + sz * dz0a, sr * dr0b + sz * dz0b)
    g_dst = _limb_sum(topo, li, sr * dr1a + sz * dz1a, sr * dr1b + sz * dz1b)
    return -g_src, g_dst


def flow_loss_grad(cloud_t: PointCloud, cloud_t1: PointCloud, W_t, W_t1, pose_t, pose_t1,
                   topo: SkeletonTopology, eps_len: float = EPS_LEN):
    """Gradient of the pair flow loss w.r.t. (pose_t, pose_t1), each (J, 3)."""
    if cloud_t.forward_flow is None or cloud_t1.backward_flow is None:
        raise MissingFlow("flow gradient needs forward flow on frame t and backward flow on frame t+1")
    idx0, P0, W0 = _valid_rows(cloud_t, W_t)
    idx1, P1, W1 = _valid_rows(cloud_t1, W_t1)
    pose_t, pose_t1 = as_positions(pose_t), as_positions(pose_t1)
    parents = topo.limb_array[:, 0]
    g_src, g_dst = _flow_direction_grad(P0, cloud_t.forward_flow[idx0], W0[:, parents],
                                        pose_t, pose_t1, topo, eps_len)
    b_src, b_dst = _flow_direction_grad(P1, cloud_t1.backward_flow[idx1], W1[:, parents],
                                        pose_t1, pose_t, topo, eps_len)
    scale = 1.0 / (2.0 * len(topo.limbs))
    return (g_src + b_dst) * scale, (g_dst + b_src) * scale


def p2l_loss_grad(cloud: PointCloud, W, pose, topo: SkeletonTopology, eps_len: float = EPS_LEN):
    """Gradient of the point-to-limb term w.r.t. one pose (J, 3)."""
    _, P, W = _valid_rows(cloud, W)
    pose = as_positions(pose)
    a, b = limb_endpoints(pose, topo)
    limb_axis(a, b, eps_len)
    if len(P) == 0:
        return np.zeros_like(pose)
    li, ni, wv = weighted_pairs(W[:, topo.limb_array[:, 0]])
    pa, pb, pp = a[li], b[li], P[ni]
    z, _, _, _, dra, drb = pair_jacobians(pp, pa, pb, eps_len)
    t = (z / np.linalg.norm(pb - pa, axis=-1))[:, None]
    before, after = t < 0, t > 1
    ga = np.where(before, -_unit(pp - pa), np.where(after, 0.0, dra))
    gb = np.where(after, -_unit(pp - pb), np.where(before, 0.0, drb))
    scale = (wv / (len(P) * len(topo.limbs)))[:, None]
    return _limb_sum(topo, li, scale * ga, scale * gb)


def sym_loss_grad(cloud: PointCloud, W, pose, topo: SkeletonTopology, h: float = 0.1,
                  eps_len: float = EPS_LEN, eps_denom: float = 1e-12):
    if not h > 0:
        raise InvalidBandwidth(f"kernel bandwidth must be positive, got {h}")
    _, P, W = _valid_rows(cloud, W)
    pose = as_positions(pose)
    a_pt, b_pt = limb_endpoints(pose, topo)
    limb_axis(a_pt, b_pt, eps_len)
    ga = np.zeros_like(a_pt)
    gb = np.zeros_like(b_pt)
    n = len(P)
    structure = sym_structure(W, topo) if n else {}
    for l, (a, _) in enumerate(topo.limbs):
        if n == 0:
            break
        t = sym_limb_terms(P, W, a_pt[..., l, :], b_pt[..., l, :], a, structure[a], h, eps_len, eps_denom)
        if t is None:
            continue
        row_pos, col_pos, ok = t["row_pos"], t["col_pos"], t["ok"]
        c = 2.0 * t["w"] * t["e"] / n
        coef = np.where(ok, c / np.where(ok, t["D"], 1.0), 0.0)
        A = t["A"]
        g_r = np.zeros_like(t["r"])
        g_z = np.zeros_like(t["z"])
        g_r[..., row_pos] += c
        g_r[..., col_pos] -= np.einsum("...i,...ij->...j", coef, A)
        G = A * (-2.0 * t["diff"] / h**2)
        spread = t["r"][..., None, col_pos] - t["rbar"][..., :, None]
        M = coef[..., :, None] * G * spread
        g_z[..., row_pos] -= M.sum(axis=-1)
        g_z[..., col_pos] += M.sum(axis=-2)
        _, _, dza, dzb, dra, drb = coord_jacobians(P[t["union"]], a_pt[..., l, None, :], b_pt[..., l, None, :], eps_len)
        ga[..., l, :] = np.einsum("...n,...nk->...k", g_r, dra[..., 0, :, :]) + np.einsum("...n,...nk->...k", g_z, dza[..., 0, :, :])
        gb[..., l, :] = np.einsum("...n,...nk->...k", g_r, drb[..., 0, :, :]) + np.einsum("...n,...nk->...k", g_z, dzb[..., 0, :, :])
    return _scatter(topo, ga, gb) / len(topo.limbs)


def j2p_loss_grad(cloud: PointCloud, W, pose, eps_denom: float = 1e-12):
    pose = as_positions(pose)
    J = pose.shape[-2]
    cent, ok = part_centroids(cloud, W, J, eps_denom)
    return np.where(ok[:, None], _unit(pose - cent), 0.0) / J


def term_gradients(clouds: Sequence[PointCloud], poses, Ws, topo: SkeletonTopology,
                   config: LossConfig, skip_zero_weight: bool = False) -> dict:
    """Unweighted gradient of each pose-dependent term over a sequence, shaped like ``poses``.

    Normalization mirrors ``losses.sequence_terms``; the segmentation term is
    constant in the poses and its gradient is identically zero.
    """
    poses = np.asarray(poses, dtype=np.float64)
    T = len(clouds)
    if poses.shape[-3] != T or len(Ws) != T:
        raise ShapeMismatch("poses, clouds and assignments must have the same frame count")
    w = config.weights()
    grads = {k: np.zeros_like(poses) for k in TERMS}

    def want(k):
        return not (skip_zero_weight and w[k] == 0)

    if T > 1 and want("flow"):
        for t in range(T - 1):
            g0, g1 = flow_loss_grad(clouds[t], clouds[t + 1], Ws[t], Ws[t + 1],
                                    poses[..., t, :, :], poses[..., t + 1, :, :], topo, config.eps_len)
            grads["flow"][..., t, :, :] += g0 / (T - 1)
            grads["flow"][..., t + 1, :, :] += g1 / (T - 1)
    for t in range(T):
        pose = poses[..., t, :, :]
        if want("p2l"):
            grads["p2l"][..., t, :, :] = p2l_loss_grad(clouds[t], Ws[t], pose, topo, config.eps_len) / T
        if want("sym"):
            grads["sym"][..., t, :, :] = sym_loss_grad(clouds[t], Ws[t], pose, topo, config.h,
                                                       config.eps_len, config.eps_denom) / T
        if want("j2p"):
            grads["j2p"][..., t, :, :] = j2p_loss_grad(clouds[t], Ws[t], pose, config.eps_denom) / T
    return grads


def objective_gradient(clouds, poses, Ws, topo: SkeletonTopology, config: LossConfig) -> np.ndarray:
    """Gradient of the weighted refinement objective w.r.t. all frame poses (T, J, 3)."""
    grads = term_gradients(clouds, poses, Ws, topo, config, skip_zero_weight=True)
    w = config.weights()
    total = np.zeros_like(np.asarray(poses, dtype=np.float64))
    for k in TERMS:
        if w[k]:
            total += w[k] * grads[k]
    return total


def numeric_gradient(objective: Callable, x, step: float = 1e-5, batched: bool = False) -> np.ndarray:
    """Central-difference gradient of a scalar function of the array ``x``.

    With ``batched=True`` the objective must accept a stack of inputs along a
    new leading axis and return one value per input; all 2*x.size evaluations
    then happen in a single call.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    D = x.size
    eye = np.eye(D).reshape((D,) + x.shape) * step
    if batched:
        vals = np.asarray(objective(np.concatenate([x + eye, x - eye])), dtype=np.float64)
        plus, minus = vals[:D], vals[D:]
    else:
        plus = np.array([objective(x + e) for e in eye], dtype=np.float64)
        minus = np.array([objective(x - e) for e in eye], dtype=np.float64)
    return ((plus - minus) / (2.0 * step)).reshape(x.shape)


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def normwise_relative_error(analytic, numeric, floor: float = 1e-300) -> float:
    """``|a - n| / max(|a|, |n|)`` over the whole gradient array."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def finite_diff_check(objective: Callable, poses, step: float, gradient, batched: bool = False) -> float:
    """Max coordinate-wise relative error between ``gradient`` and central differences."""
    numeric = numeric_gradient(objective, poses, step, batched)
    return float(np.max(relative_error(gradient, numeric)))
