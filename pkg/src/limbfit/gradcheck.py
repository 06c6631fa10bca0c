"""Random configurations for checking analytic gradients against finite differences.

Sampling keeps every point away from the kinks of the objective (the
absolute values in the flow term, the segment ends and the axis in the
point-to-limb term), so central differences with a small step see a smooth
function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from limbfit.geometry import PointCloud, SkeletonTopology, limb_endpoints
from limbfit.gradients import normwise_relative_error, objective_gradient, relative_error, term_gradients
from limbfit.losses import FramePair, LossConfig, flow_loss, j2p_loss, p2l_loss, sym_loss

CHECKED_TERMS = ("flow", "p2l", "sym", "j2p")


@dataclass
class GradConfig:
    clouds: list[PointCloud]
    poses: np.ndarray  # (2, J, 3)
    Ws: list[np.ndarray]


def _rest_like_pose(topo: SkeletonTopology, rng) -> np.ndarray:
    from limbfit.synth.body import default_body

    body = default_body()
    if body.topology.num_joints == topo.num_joints:
        base = body.rest_positions
    else:
        base = rng.uniform(-0.5, 0.5, size=(topo.num_joints, 3))
    return base + rng.normal(0.0, 0.05, size=base.shape)


def _sparse_assignment(own: np.ndarray, topo: SkeletonTopology, rng) -> np.ndarray:
    """Soft rows on three classes: the point's own part, one other part, and background."""
    n, J = len(own), topo.num_joints
    W = np.zeros((n, topo.num_classes))
    other = (own + rng.integers(1, J, size=n)) % J
    mix = rng.dirichlet([4.0, 1.0, 1.0], size=n)
    W[np.arange(n), own] = mix[:, 0]
    W[np.arange(n), other] += mix[:, 1]
    W[:, J] += mix[:, 2]
    return W


def _coords(P, a, b):
    d = b - a
    L = np.linalg.norm(d)
    q = P - a
    z = q @ (d / L)
    r = np.linalg.norm(q - z[:, None] * (d / L), axis=1)
    return z, r, L


def _safe(P, F, W, pose0, pose1, topo, margin, axis_margin):
    """Rows of P that keep clear of every kink on every weighted limb.

    Sign changes (flow differences, segment ends) need only ``margin``. The
    radius is smooth off the axis but curves like 1/r, so the central
    difference error grows as (step / r)^2 and needs the wider ``axis_margin``.
    """
    a0, b0 = limb_endpoints(pose0, topo)
    a1, b1 = limb_endpoints(pose1, topo)
    ok = np.ones(len(P), dtype=bool)
    for l, (a, _) in enumerate(topo.limbs):
        on = W[:, a] > 0
        z0, r0, L0 = _coords(P, a0[l], b0[l])
        z1, r1, _ = _coords(P + F, a1[l], b1[l])
        t = z0 / L0
        bad = (np.abs(r1 - r0) < margin) | (np.abs(z1 - z0) < margin)
        bad |= (np.abs(t) < margin) | (np.abs(t - 1.0) < margin)
        # radii also enter the symmetry term as neighbours of other points
        ok &= ~(on & bad) & (r0 >= axis_margin) & (r1 >= axis_margin)
    return ok


def random_config(topo: SkeletonTopology, rng: np.random.Generator, num_points: int = 256,
                  margin: float = 1e-4, axis_margin: float = 1e-2, max_rounds: int = 50) -> GradConfig:
    """Two frames of ``num_points`` labelled points scattered around the limbs."""
    pose0 = _rest_like_pose(topo, rng)
    pose1 = pose0 + rng.normal(0.0, 0.03, size=pose0.shape)
    limbs = topo.limb_array
    frames = []
    for pose_src, pose_dst in ((pose0, pose1), (pose1, pose0)):
        a, b = limb_endpoints(pose_src, topo)
        P = np.zeros((num_points, 3))
        F = np.zeros((num_points, 3))
        own = np.zeros(num_points, dtype=np.int64)
        W = np.zeros((num_points, topo.num_classes))
        todo = np.arange(num_points)
        for _ in range(max_rounds):
            m = len(todo)
            limb = rng.integers(len(limbs), size=m)
            s = rng.uniform(-0.2, 1.2, size=m)
            P[todo] = a[limb] + s[:, None] * (b[limb] - a[limb]) + rng.normal(0.0, 0.08, size=(m, 3))
            F[todo] = rng.normal(0.0, 0.03, size=(m, 3))
            own[todo] = limbs[limb, 0]
            W[todo] = _sparse_assignment(own[todo], topo, rng)
            todo = np.flatnonzero(~_safe(P, F, W, pose_src, pose_dst, topo, margin, axis_margin))
            if len(todo) == 0:
                break
        frames.append((P, F, W))
    (P0, F0, W0), (P1, F1, W1) = frames
    clouds = [PointCloud(P0, forward_flow=F0), PointCloud(P1, backward_flow=F1)]
    return GradConfig(clouds, np.stack([pose0, pose1]), [W0, W1])


def _perturbations(pose, joints, step):
    """Stack of +step then -step copies of ``pose``, one per coordinate of ``joints``."""
    idx = [(j, k) for j in joints for k in range(3)]
    batch = np.repeat(pose[None], 2 * len(idx), axis=0)
    for i, (j, k) in enumerate(idx):
        batch[i, j, k] += step
        batch[len(idx) + i, j, k] -= step
    return batch, idx


def _scatter_fd(grad, vals, idx, step, scale):
    m = len(idx)
    for i, (j, k) in enumerate(idx):
        grad[j, k] += (vals[i] - vals[m + i]) / (2.0 * step) * scale


def numeric_term_gradients(cfg: GradConfig, topo: SkeletonTopology, loss_config: LossConfig,
                           step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of each term, one limb at a time.

    Every limb term is a mean over limbs of a function of that limb's two
    keypoints, so each limb is evaluated on a one-limb topology with only its
    own six coordinates perturbed. The sequence normalization (pairs for
    flow, frames for the rest) is applied on top.
    """
    poses = cfg.poses
    T, J = poses.shape[:2]
    L = len(topo.limbs)
    out = {k: np.zeros_like(poses) for k in CHECKED_TERMS}
    for l, limb in enumerate(topo.limbs):
        sub = SkeletonTopology(topo.joint_names, (limb,))
        for t in range(T):
            batch, idx = _perturbations(poses[t], limb, step)
            c, W = cfg.clouds[t], cfg.Ws[t]
            _scatter_fd(out["p2l"][t], p2l_loss(c, W, batch, sub, loss_config.eps_len), idx, step, 1.0 / (L * T))
            vals = sym_loss(c, W, batch, sub, loss_config.h, loss_config.eps_len, loss_config.eps_denom)
            _scatter_fd(out["sym"][t], vals, idx, step, 1.0 / (L * T))
        for t in range(T - 1):
            for src, dst in ((t, t + 1), (t + 1, t)):
                batch, idx = _perturbations(poses[src], limb, step)
                fixed = np.repeat(poses[dst][None], len(batch), axis=0)
                pair_poses = (batch, fixed) if src == t else (fixed, batch)
                pair = FramePair(cfg.clouds[t], cfg.clouds[t + 1], cfg.Ws[t], cfg.Ws[t + 1], *pair_poses)
                _scatter_fd(out["flow"][src], flow_loss(pair, sub, loss_config.eps_len), idx, step, 1.0 / (L * (T - 1)))
    for t in range(T):
        batch, idx = _perturbations(poses[t], range(J), step)
        _scatter_fd(out["j2p"][t], j2p_loss(cfg.clouds[t], cfg.Ws[t], batch, loss_config.eps_denom),
                    idx, step, 1.0 / T)
    return out


@dataclass
class GradErrors:
    normwise: dict[str, float]  # |a - n| / max(|a|, |n|) per term
    elementwise: dict[str, float]  # worst single coordinate, floor 1e-8


def check_config(cfg: GradConfig, topo: SkeletonTopology, loss_config: LossConfig,
                 step: float = 1e-5) -> GradErrors:
    """Relative errors of each term's gradient and of the weighted objective's gradient.

    The coordinate-wise maximum (denominator floor 1e-8) is the pass figure.
    The norm-wise error is reported alongside: a coordinate that happens to
    sit orders of magnitude below the gradient's scale can show a large
    coordinate-wise error from the O(step^2) truncation alone.
    """
    analytic = term_gradients(cfg.clouds, cfg.poses, cfg.Ws, topo, loss_config)
    numeric = numeric_term_gradients(cfg, topo, loss_config, step)
    # the pose-independent segmentation term has no numeric contribution
    w = loss_config.weights()
    analytic = {k: analytic[k] for k in CHECKED_TERMS}
    analytic["stage2"] = objective_gradient(cfg.clouds, cfg.poses, cfg.Ws, topo, loss_config)
    numeric["stage2"] = sum(w[k] * numeric[k] for k in CHECKED_TERMS)
    return GradErrors(
        {k: normwise_relative_error(analytic[k], numeric[k]) for k in analytic},
        {k: float(np.max(relative_error(analytic[k], numeric[k]))) for k in analytic},
    )


def run_gradcheck(topo: SkeletonTopology, seed: int = 0, configs: int = 200, num_points: int = 256,
                  loss_config: LossConfig | None = None, step: float = 1e-5) -> list[GradErrors]:
    """Errors for ``configs`` seeded random configurations (J from ``topo``, ``num_points`` per frame)."""
    loss_config = loss_config or LossConfig.stage2()
    out = []
    for i in range(configs):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        out.append(check_config(random_config(topo, rng, num_points), topo, loss_config, step))
    return out


def worst(errors: list[GradErrors], kind: str = "elementwise") -> dict[str, float]:
    keys = CHECKED_TERMS + ("stage2",)
    return {k: max((getattr(e, kind)[k] for e in errors), default=0.0) for k in keys}
