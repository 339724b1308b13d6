"""Plain-text and binary exchange formats: PLY meshes, TUM trajectories, PGM images."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose
from .mesher import TriangleMesh
from .semantics import DEFAULT_PALETTE, palette_colors


def _num(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- PLY

def write_ply(path, mesh: TriangleMesh, palette=DEFAULT_PALETTE) -> None:
    """ASCII PLY. With labels, each vertex carries the palette colour of its class
    plus the raw class id as a ``label`` property."""
    has_lab = mesh.labels is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
             "property double x", "property double y", "property double z"]
    if has_lab:
        lines += ["property uchar red", "property uchar green", "property uchar blue", "property int label"]
    lines += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    colors = palette_colors(palette) if has_lab else None
    for i, v in enumerate(mesh.vertices):
        row = [_num(v[0]), _num(v[1]), _num(v[2])]
        if has_lab:
            lab = int(mesh.labels[i])
            rgb = colors[lab] if 0 <= lab < len(colors) else (0, 0, 0)
            row += [str(int(c)) for c in rgb] + [str(lab)]
        lines.append(" ".join(row))
    for f in mesh.faces:
        lines.append(f"3 {int(f[0])} {int(f[1])} {int(f[2])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> TriangleMesh:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError("not a PLY file")
    n_v = n_f = 0
    props: list[str] = []
    current = None
    i = 1
    while i < len(text):
        line = text[i].strip()
        i += 1
        if line.startswith("format") and "ascii" not in line:
            raise ValueError("only ASCII PLY is supported")
        if line.startswith("element"):
            _, name, count = line.split()
            current = name
            if name == "vertex":
                n_v = int(count)
            elif name == "face":
                n_f = int(count)
        elif line.startswith("property") and current == "vertex":
            props.append(line.split()[-1])
        elif line == "end_header":
            break
    body = text[i:]
    verts = np.array([[float(t) for t in body[k].split()] for k in range(n_v)]).reshape(n_v, len(props))
    faces = []
    for k in range(n_v, n_v + n_f):
        tok = body[k].split()
        if int(tok[0]) != 3:
            raise ValueError("only triangular faces are supported")
        faces.append([int(t) for t in tok[1:4]])
    xyz = verts[:, [props.index("x"), props.index("y"), props.index("z")]] if n_v else np.zeros((0, 3))
    labels = verts[:, props.index("label")].astype(np.int64) if "label" in props else None
    return TriangleMesh.from_arrays(xyz, np.array(faces, dtype=np.int64).reshape(-1, 3), labels)


# ---------------------------------------------------------------- TUM

def write_tum(path, stamps: Sequence[float], poses: Sequence[Pose]) -> None:
    """timestamp tx ty tz qx qy qz qw, one pose per line."""
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for s, p in zip(stamps, poses):
        q = Rotation.from_matrix(p.R).as_quat()
        if q[3] < 0:  # fixed sign so files are canonical
            q = -q
        lines.append(" ".join(_num(v) for v in (s, *p.t, *q)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path) -> tuple[np.ndarray, list[Pose]]:
    stamps, poses = [], []
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        tok = raw.replace(",", " ").split()
        if len(tok) != 8:
            raise ValueError(f"{path}:{n}: expected 8 fields, got {len(tok)}")
        v = [float(t) for t in tok]
        stamps.append(v[0])
        poses.append(Pose(Rotation.from_quat(v[4:8]).as_matrix(), v[1:4]))
    return np.array(stamps), poses


# ---------------------------------------------------------------- PGM

def write_pgm(path, image: np.ndarray, maxval: int) -> None:
    """Binary PGM (P5); 16-bit samples are big-endian as the format requires."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2D")
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError("pixel value outside [0, maxval]")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + img.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data, dtype, w * h, m.end()).reshape(h, w).astype(np.int64)


def write_depth_pgm(path, depth_m: np.ndarray) -> None:
    write_pgm(path, np.clip(np.rint(depth_m * 1000.0), 0, 65535).astype(np.int64), 65535)


def read_depth_pgm(path) -> np.ndarray:
    return read_pgm(path) / 1000.0


def write_label_pgm(path, labels: np.ndarray) -> None:
    write_pgm(path, labels, 255)
