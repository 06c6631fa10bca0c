"""Command-line front end: gen, fit, eval, perturb, gradcheck.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric failure.
``LIMBFIT_THREADS`` caps the BLAS/OpenMP thread pools; it must be set
before the process starts.
"""

from __future__ import annotations

import os

_threads = os.environ.get("LIMBFIT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from limbfit.errors import FrameCountMismatch, InvalidConfig, LimbfitError, NumericError, ValidationError
from limbfit.evaluation import matched_mpjpe, mpjpe, perturb_recovery
from limbfit.flow import attach_flows
from limbfit.geometry import MAX_POINTS, PointCloud
from limbfit.io import (
    FLOAT_FMT,
    SCHEMA_VERSION,
    read_manifest,
    read_ply,
    read_pose,
    write_json,
    write_ply,
    write_pose,
)
from limbfit.losses import TERMS, LossConfig, sequence_objective
from limbfit.optim import OptimConfig, fit_sequence
from limbfit.segmentation import segment_sequence, to_one_hot
from limbfit.synth.augment import AugmentationConfig, TwoFrameSample, augment
from limbfit.synth.body import CapsuleBody, default_body, forward_kinematics, load_body
from limbfit.synth.raycast import RayCasterConfig
from limbfit.synth.sequence import generate_sequence, sequence_rng

GRADCHECK_TOL = 1e-4


def _fmt(x: float) -> str:
    return FLOAT_FMT % x


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    if args.frames < 2:
        raise InvalidConfig("--frames must be >= 2 (flow needs consecutive pairs)")
    if args.sequences < 0:
        raise InvalidConfig("--sequences must be >= 0")
    body = load_body(args.body) if args.body else default_body()
    aug = AugmentationConfig()
    if args.augment_config:
        with open(args.augment_config, encoding="utf-8") as fh:
            aug = AugmentationConfig.from_dict(json.load(fh))
    ray = RayCasterConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = body.topology.joint_names
    listing = []
    for i in range(args.sequences):
        rng = sequence_rng(args.seed, i)
        seq = generate_sequence(body, rng, args.frames, ray, args.max_points)
        clouds, poses = seq.clouds, seq.poses
        visible = np.stack([f.visible for f in seq.frames])
        if aug.enabled:
            sample = augment(TwoFrameSample(clouds, poses, visible), aug, rng)
            clouds, poses = sample.clouds, sample.poses
        rel = Path(f"seq_{i:04d}")
        (out / rel).mkdir(exist_ok=True)
        entry = {"clouds": [], "poses": [], "distance": round(float(seq.distance), 9)}
        for t in range(args.frames):
            c_rel, p_rel = rel / f"cloud_{t:02d}.ply", rel / f"pose_{t:02d}.txt"
            write_ply(out / c_rel, clouds[t])
            write_pose(out / p_rel, names, poses[t], visible[t])
            entry["clouds"].append(c_rel.as_posix())
            entry["poses"].append(p_rel.as_posix())
        listing.append(entry)
    write_json(out / "manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "master_seed": args.seed,
        "body": body.to_dict(),
        "ray_caster": ray.to_dict(),
        "max_points": args.max_points,
        "sequences": args.sequences,
        "frames": args.frames,
        "augmentation": aug.to_dict(),
        "sequence_paths": listing,
    })
    print(f"wrote {args.sequences} sequences x {args.frames} frames to {out}")
    return 0


# ---------------------------------------------------------------- dataset loading


class LoadedSequence:
    def __init__(self, clouds, poses, visible):
        self.clouds: list[PointCloud] = clouds
        self.poses: np.ndarray = poses
        self.visible: np.ndarray = visible


def load_dataset(root) -> tuple[dict, CapsuleBody, list[LoadedSequence]]:
    root = Path(root)
    man = read_manifest(root)
    body = CapsuleBody.from_dict(man["body"])
    seqs = []
    for entry in man["sequence_paths"]:
        clouds = [read_ply(root / rel) for rel in entry["clouds"]]
        poses, vis = [], []
        for rel in entry["poses"]:
            _, p, v = read_pose(root / rel)
            poses.append(p)
            vis.append(v)
        seqs.append(LoadedSequence(clouds, np.stack(poses), np.stack(vis)))
    return man, body, seqs


def rest_template(body: CapsuleBody):
    """Limb endpoints and classes of the standing rest pose, for naming clusters."""
    kin = forward_kinematics(body, body.rest_angles)
    limbs = body.topology.limb_array
    return kin.positions[limbs[:, 0]], kin.positions[limbs[:, 1]], limbs[:, 0]


def assignments(seq: LoadedSequence, body: CapsuleBody, mode: str, seed: int = 0) -> list[np.ndarray]:
    topo = body.topology
    if mode == "gt":
        if any(c.gt_label is None for c in seq.clouds):
            raise ValidationError("--seg gt needs seg_label in every frame")
        return [to_one_hot(c.gt_label, topo.num_classes) for c in seq.clouds]
    if mode == "kmeans":
        seg_a, seg_b, classes = rest_template(body)
        return segment_sequence(seq.clouds, seg_a, seg_b, classes, topo.num_classes, topo.background_class, seed)
    raise ValidationError(f"unknown segmentation mode {mode!r}")


def with_flows(seq: LoadedSequence, Ws, mode: str) -> list[PointCloud]:
    if mode == "gt":
        for k, c in enumerate(seq.clouds):
            if (k + 1 < len(seq.clouds) and c.forward_flow is None) or (k > 0 and c.backward_flow is None):
                raise ValidationError("--flow gt needs stored flows in every frame")
        return attach_flows(seq.clouds, "gt")
    labels = [W.argmax(axis=1) for W in Ws]
    return attach_flows(seq.clouds, mode, labels)


# ---------------------------------------------------------------- fit


def _trace_lines(fit_trace, term_trace) -> list[str]:
    lines = ["iter\ttotal\t" + "\t".join(TERMS)]
    for i, (tot, terms) in enumerate(zip(fit_trace, term_trace)):
        lines.append("\t".join([str(i), _fmt(tot)] + [_fmt(terms[k]) for k in TERMS]))
    return lines


def cmd_fit(args) -> int:
    if args.iters < 0:
        raise InvalidConfig("--iters must be >= 0")
    man, body, seqs = load_dataset(args.input)
    topo = body.topology
    loss_config = LossConfig.preset(args.weights)
    if args.h is not None:
        loss_config = LossConfig(**{**loss_config.to_dict(), "h": args.h})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for i, seq in enumerate(seqs):
        if args.limit is not None and i >= args.limit:
            break
        rng = sequence_rng(args.seed, i)
        Ws = assignments(seq, body, args.seg, args.seed)
        clouds = with_flows(seq, Ws, args.flow)
        init = seq.poses.copy()
        if args.init == "perturb":
            init = init + rng.normal(0.0, args.sigma, size=init.shape)
        if args.iters == 0:
            total, terms = sequence_objective(clouds, init, Ws, topo, loss_config)
            final, trace = init, [float(total)]
            term_trace = [{k: float(v) for k, v in terms.items()}]
        else:
            optim = OptimConfig(learning_rate=args.lr, iterations=args.iters, seed=args.seed)
            fit = fit_sequence(clouds, init, Ws, topo, loss_config, optim)
            final, trace, term_trace = fit.poses, fit.trace, fit.term_trace
        rel = Path(man["sequence_paths"][i]["poses"][0]).parent
        (out / rel).mkdir(parents=True, exist_ok=True)
        for t, pose_rel in enumerate(man["sequence_paths"][i]["poses"]):
            write_pose(out / pose_rel, topo.joint_names, final[t], seq.visible[t])
        (out / rel / "trace.tsv").write_text("\n".join(_trace_lines(trace, term_trace)) + "\n", encoding="ascii")
        summary.append({"sequence": rel.as_posix(), "initial_loss": _fmt(trace[0]), "best_loss": _fmt(min(trace)),
                        "poses": man["sequence_paths"][i]["poses"]})
        print(f"{rel.as_posix()}: objective {_fmt(trace[0])} -> {_fmt(min(trace))}")
    write_json(out / "fit.json", {
        "input": str(args.input),
        "loss": loss_config.to_dict(),
        "weights_preset": args.weights,
        "iterations": args.iters,
        "learning_rate": args.lr,
        "seg": args.seg,
        "flow": args.flow,
        "init": args.init,
        "sigma": args.sigma,
        "seed": args.seed,
        "sequences": summary,
    })
    return 0


# ---------------------------------------------------------------- eval


def _pose_files(root: Path) -> list[str]:
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("pose_*.txt"))


def cmd_eval(args) -> int:
    pred_root, gt_root = Path(args.pred), Path(args.gt)
    gt_files = _pose_files(gt_root)
    pred_files = _pose_files(pred_root)
    if not gt_files:
        raise ValidationError(f"no pose_*.txt files under {gt_root}")
    if gt_files != pred_files:
        raise FrameCountMismatch(f"{len(pred_files)} predicted frames vs {len(gt_files)} ground-truth frames "
                                 "(or differing file names)")
    metric = matched_mpjpe if args.matched else mpjpe
    rows = ["frame,mpjpe_m,mpjpe_cm"]
    errs = []
    for rel in gt_files:
        names_g, gt, vis = read_pose(gt_root / rel)
        names_p, pred, _ = read_pose(pred_root / rel)
        if len(names_g) != len(names_p):
            raise FrameCountMismatch(f"{rel}: joint counts differ")
        e = metric(pred, gt, vis)
        errs.append(e)
        rows.append(f"{rel},{e:.6f},{100 * e:.2f}")
    mean = float(np.mean(errs))
    rows.append(f"mean,{mean:.6f},{100 * mean:.2f}")
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="ascii")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- perturb


def cmd_perturb(args) -> int:
    if args.trials < 0:
        raise InvalidConfig("--trials must be >= 0")
    if args.sigma < 0:
        raise InvalidConfig("--sigma must be >= 0")
    man, body, seqs = load_dataset(args.input)
    topo = body.topology
    loss_config = LossConfig.preset(args.weights)
    optim = OptimConfig(learning_rate=args.lr, iterations=args.iters, seed=args.seed)
    rows = ["trial,sequence,frame,initial_mpjpe,final_mpjpe,initial_matched,final_matched,reduction"]
    reductions, wins = [], []
    for k in range(args.trials):
        rng = sequence_rng(args.seed, k)
        s = k % len(seqs)
        seq = seqs[s]
        t = int(rng.integers(len(seq.clouds) - 1))
        pair = LoadedSequence(seq.clouds[t:t + 2], seq.poses[t:t + 2], seq.visible[t:t + 2])
        Ws = assignments(pair, body, "gt")
        clouds = with_flows(pair, Ws, "gt")
        rep = perturb_recovery(clouds, pair.poses, Ws, topo, args.sigma, rng, loss_config, optim, pair.visible)
        reductions.append(rep.reduction)
        wins.append(rep.improved)
        rows.append(",".join([str(k), str(s), str(t), f"{rep.initial_mpjpe:.6f}", f"{rep.final_mpjpe:.6f}",
                              f"{rep.initial_matched_mpjpe:.6f}", f"{rep.final_matched_mpjpe:.6f}",
                              f"{rep.reduction:.6f}"]))
    if reductions:
        rows.append(f"# win_rate {np.mean(wins):.4f}")
        rows.append(f"# median_reduction {np.median(reductions):.6f}")
    else:
        rows.append("# win_rate nan")
        rows.append("# median_reduction nan")
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="ascii")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from limbfit.gradcheck import CHECKED_TERMS, check_config, random_config
    from limbfit.synth.body import default_topology

    if args.configs < 1:
        raise InvalidConfig("--configs must be >= 1")
    topo = default_topology()
    keys = CHECKED_TERMS + ("stage2",)
    print("config\t" + "\t".join(keys))
    worst = 0.0
    for i in range(args.configs):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, i]))
        errs = check_config(random_config(topo, rng, args.points), topo, LossConfig.stage2(), args.step)
        vals = [errs.elementwise[k] for k in keys]
        worst = max(worst, *vals)
        print(str(i) + "\t" + "\t".join(f"{v:.3e}" for v in vals))
    if worst > GRADCHECK_TOL:
        print(f"max relative error {worst:.3e} exceeds {GRADCHECK_TOL:g}", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="limbfit", description=__doc__.splitlines()[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=fmt)
    g.add_argument("--sequences", type=int, default=1000, help="number of sequences")
    g.add_argument("--frames", type=int, default=16, help="frames per sequence")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--augment-config", default=None, help="JSON file of augmentation settings")
    g.add_argument("--body", default=None, help="body JSON (default: packaged capsule body)")
    g.add_argument("--max-points", type=int, default=MAX_POINTS, help="points kept per frame")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", help="fit keypoints to a dataset", formatter_class=fmt)
    f.add_argument("--input", required=True, help="dataset directory")
    f.add_argument("--out", required=True, help="output directory for fitted poses")
    f.add_argument("--weights", choices=["stage2", "supp-demo"], default="stage2",
                   help="stage2: flow/p2l/sym/j2p/seg = 0.02/0.01/0.5/2/0.5, h=0.1; "
                        "supp-demo: flow/p2l/sym = 0.2/0.1/5")
    f.add_argument("--iters", type=int, default=100, help="Adam iterations (0 writes the initialization)")
    f.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    f.add_argument("--h", type=float, default=None, help="symmetry kernel bandwidth override")
    f.add_argument("--seg", choices=["gt", "kmeans"], default="gt", help="part assignment source")
    f.add_argument("--flow", choices=["gt", "nn", "rigid"], default="gt", help="scene flow source")
    f.add_argument("--init", choices=["perturb", "gt"], default="perturb", help="initial keypoints")
    f.add_argument("--sigma", type=float, default=0.06, help="init noise std (m) for --init perturb")
    f.add_argument("--seed", type=int, default=0, help="seed for noise and clustering")
    f.add_argument("--limit", type=int, default=None, help="fit only the first N sequences")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score predicted poses", formatter_class=fmt)
    e.add_argument("--pred", required=True, help="directory of predicted pose files")
    e.add_argument("--gt", required=True, help="directory of ground-truth pose files")
    e.add_argument("--matched", action="store_true", help="Hungarian-match keypoints first")
    e.add_argument("--out", default=None, help="also write the CSV here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("perturb", help="perturbation-recovery experiment", formatter_class=fmt)
    r.add_argument("--input", required=True, help="dataset directory")
    r.add_argument("--sigma", type=float, default=0.06, help="noise std (m)")
    r.add_argument("--trials", type=int, default=200, help="number of trials")
    r.add_argument("--seed", type=int, default=0, help="master seed")
    r.add_argument("--weights", choices=["stage2", "supp-demo"], default="supp-demo", help="loss weight preset")
    r.add_argument("--iters", type=int, default=100, help="Adam iterations")
    r.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    r.add_argument("--out", default=None, help="also write the CSV here")
    r.set_defaults(func=cmd_perturb)

    c = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients", formatter_class=fmt)
    c.add_argument("--seed", type=int, default=0, help="master seed")
    c.add_argument("--configs", type=int, default=200, help="random configurations")
    c.add_argument("--points", type=int, default=256, help="points per configuration")
    c.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"limbfit: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (LimbfitError, OSError) as exc:
        print(f"limbfit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
