"""File formats: ASCII PLY, headerless CSV, JSON-lines actions and logs, extrinsics, key=value configs."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .cloud import PointCloud, RigidTransform, WORLD
from .dynamics import GraspAction
from .errors import InvalidInputError

FLOAT_FMT = "%.9g"


def _fmt(v: float) -> str:
    return FLOAT_FMT % v


def write_ply(path, cloud: PointCloud):
    """ASCII PLY with ``x y z`` float properties and a ``comment frame=<name>`` line."""
    pts = cloud.points
    lines = ["ply", "format ascii 1.0", f"comment frame={cloud.frame}",
             f"element vertex {pts.shape[0]}",
             "property float x", "property float y", "property float z", "end_header"]
    lines += [" ".join(_fmt(v) for v in row) for row in pts.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY vertex list; properties other than x, y, z are ignored."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise InvalidInputError(f"{path}: not a PLY file")
    frame = WORLD
    n = None
    props = []
    in_vertex = False
    body = None
    for i, line in enumerate(text[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1:2] != ["ascii"]:
            raise InvalidInputError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "comment" and len(tok) > 1 and tok[1].startswith("frame="):
            frame = tok[1][len("frame="):]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body = i + 1
            break
    if body is None or n is None:
        raise InvalidInputError(f"{path}: incomplete PLY header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise InvalidInputError(f"{path}: vertex element lacks x, y, z") from None
    rows = [line.split() for line in text[body:body + n]]
    if len(rows) != n or any(len(r) != len(props) for r in rows):
        raise InvalidInputError(f"{path}: expected {n} vertices with {len(props)} values")
    data = np.array(rows, dtype=np.float64).reshape(n, len(props))
    return PointCloud(data[:, cols], frame)


def write_csv(path, cloud: PointCloud):
    Path(path).write_text("".join(",".join(_fmt(v) for v in row) + "\n"
                                  for row in cloud.points.tolist()))


def read_csv(path, frame: str = WORLD) -> PointCloud:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    if any(len(r) != 3 for r in rows):
        raise InvalidInputError(f"{path}: every line must be x,y,z")
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3), frame)


def read_cloud(path, frame: str | None = None) -> PointCloud:
    """PLY or CSV by extension."""
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"{path}: no such file")
    if path.suffix.lower() == ".ply":
        cloud = read_ply(path)
        return cloud if frame is None else PointCloud(cloud.points, frame)
    if path.suffix.lower() == ".csv":
        return read_csv(path, WORLD if frame is None else frame)
    raise InvalidInputError(f"{path}: unsupported point-cloud extension")


def write_labels(path, labels):
    Path(path).write_text("".join(f"{label}\n" for label in labels))


def read_labels(path) -> np.ndarray:
    lines = [line.strip() for line in Path(path).read_text().splitlines()]
    return np.array([line for line in lines if line], dtype=object)


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise InvalidInputError(f"{path}:{n}: {e}") from None
    return out


def write_actions(path, actions):
    write_jsonl(path, [a.to_dict() for a in actions])


def read_actions(path) -> list:
    return [GraspAction.from_dict(rec) for rec in read_jsonl(path)]


def write_extrinsics(path, transforms: dict):
    """One ``camera <name>`` line followed by four rows of the 4x4 matrix per camera."""
    lines = []
    for name, T in transforms.items():
        lines.append(f"camera {name}")
        lines += [" ".join(repr(float(v)) for v in row) for row in T.matrix]
    Path(path).write_text("\n".join(lines) + "\n")


def read_extrinsics(path) -> dict:
    lines = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    out = {}
    i = 0
    while i < len(lines):
        if lines[i][0] != "camera" or len(lines[i]) != 2:
            raise InvalidInputError(f"{path}: expected 'camera <name>' at block {len(out)}")
        rows = lines[i + 1:i + 5]
        if len(rows) != 4 or any(len(r) != 4 for r in rows):
            raise InvalidInputError(f"{path}: camera {lines[i][1]} needs four rows of four values")
        out[lines[i][1]] = RigidTransform.from_matrix(np.array(rows, dtype=np.float64))
        i += 5
    return out


def parse_config(text: str, allowed) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into raw strings.

    Unknown or repeated keys raise :class:`InvalidInputError`.
    """
    allowed = set(allowed)
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise InvalidInputError(f"config line {n}: unknown key {key!r}")
        if key in out:
            raise InvalidInputError(f"config line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path, allowed) -> dict:
    if not os.path.exists(path):
        raise InvalidInputError(f"{path}: no such config file")
    return parse_config(Path(path).read_text(), allowed)


def write_config(path, values: dict):
    Path(path).write_text("".join(f"{k} = {values[k]}\n" for k in sorted(values)))
