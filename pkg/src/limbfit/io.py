"""On-disk formats: ASCII PLY frames, pose text records, and the dataset manifest."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from limbfit.errors import InvalidConfig, ShapeMismatch, ValidationError
from limbfit.geometry import PointCloud

SCHEMA_VERSION = 1
FLOAT_FMT = "%.9g"

PathLike = Union[str, Path]

# (PointCloud field, PLY property names, is integer)
_PLY_FIELDS = (
    ("forward_flow", ("flow_x", "flow_y", "flow_z"), False),
    ("backward_flow", ("bflow_x", "bflow_y", "bflow_z"), False),
    ("gt_label", ("seg_label",), True),
    ("limb_id", ("limb_id",), True),
    ("local", ("local_x", "local_y", "local_z"), False),
)


def write_ply(path: PathLike, cloud: PointCloud) -> None:
    """Write the valid rows of ``cloud``; unset optional fields are left out."""
    cloud = cloud.valid()
    cols = [cloud.points]
    names = ["x", "y", "z"]
    kinds = [False] * 3
    for field, props, is_int in _PLY_FIELDS:
        val = getattr(cloud, field)
        if val is None:
            continue
        cols.append(np.asarray(val).reshape(len(cloud), -1))
        names.extend(props)
        kinds.extend([is_int] * len(props))
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += [f"property {'int' if k else 'double'} {n}" for n, k in zip(names, kinds)]
    header.append("end_header")
    data = np.hstack(cols) if cols else np.zeros((0, 3))
    fmt = " ".join("%d" if k else FLOAT_FMT for k in kinds)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(header) + "\n")
        for row in data:
            fh.write(fmt % tuple(row) + "\n")


def read_ply(path: PathLike) -> PointCloud:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValidationError(f"{path}: not a PLY file")
    count, props, i = None, [], 1
    while i < len(lines) and lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["format", "ascii"]:
            pass
        elif parts[:1] == ["format"]:
            raise ValidationError(f"{path}: only ASCII PLY is supported")
        elif parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"]:
            props.append(parts[-1])
        i += 1
    if count is None or i == len(lines):
        raise ValidationError(f"{path}: malformed header")
    rows = lines[i + 1: i + 1 + count]
    if len(rows) != count:
        raise ValidationError(f"{path}: expected {count} vertices, found {len(rows)}")
    data = np.array([r.split() for r in rows], dtype=np.float64).reshape(count, len(props))
    col = {n: data[:, k] for k, n in enumerate(props)}
    if not {"x", "y", "z"} <= set(col):
        raise ValidationError(f"{path}: missing x/y/z")
    kw = {"points": np.column_stack([col["x"], col["y"], col["z"]])}
    for field, names, is_int in _PLY_FIELDS:
        present = [n in col for n in names]
        if all(present):
            val = np.column_stack([col[n] for n in names])
            kw[field] = val.reshape(-1).astype(np.int64) if is_int else val
        elif any(present):
            raise ValidationError(f"{path}: incomplete property group {names}")
    return PointCloud(**kw)


def write_pose(path: PathLike, joint_names, positions, visible=None) -> None:
    """One line per joint: ``name x y z visible``."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (len(joint_names), 3):
        raise ShapeMismatch("pose must have one row per joint name")
    visible = np.ones(len(joint_names), dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for name, p, v in zip(joint_names, positions, visible):
            fh.write(f"{name} {FLOAT_FMT % p[0]} {FLOAT_FMT % p[1]} {FLOAT_FMT % p[2]} {int(v)}\n")


def read_pose(path: PathLike):
    """Returns (joint names, positions (J, 3), visible (J,))."""
    names, pos, vis = [], [], []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise ValidationError(f"{path}: expected 'name x y z visible', got {line.strip()!r}")
            names.append(parts[0])
            pos.append([float(v) for v in parts[1:4]])
            vis.append(bool(int(parts[4])))
    return names, np.array(pos, dtype=np.float64).reshape(-1, 3), np.array(vis, dtype=bool)


def write_json(path: PathLike, data: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(root: PathLike) -> dict:
    """Load and validate ``manifest.json`` under a dataset directory."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise InvalidConfig(f"{root}: no manifest.json")
    with open(path, encoding="utf-8") as fh:
        man = json.load(fh)
    if man.get("schema_version") != SCHEMA_VERSION:
        raise InvalidConfig(f"unsupported schema_version {man.get('schema_version')!r}")
    for key in ("master_seed", "body", "sequences", "frames", "augmentation", "sequence_paths"):
        if key not in man:
            raise InvalidConfig(f"manifest lacks {key!r}")
    if len(man["sequence_paths"]) != man["sequences"]:
        raise InvalidConfig("sequence count does not match the listed sequences")
    for seq in man["sequence_paths"]:
        if len(seq["clouds"]) != man["frames"] or len(seq["poses"]) != man["frames"]:
            raise InvalidConfig("frame count does not match the listed files")
        for rel in seq["clouds"] + seq["poses"]:
            if not (root / rel).is_file():
                raise InvalidConfig(f"manifest references missing file {rel}")
    return man
