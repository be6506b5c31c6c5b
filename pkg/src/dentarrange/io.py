"""Point-cloud files (XYZ text, binary little-endian PLY) and case manifests."""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .geometry import Dentition, RigidMotion, Tooth, as_cloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_xyz(path) -> np.ndarray:
    data = np.loadtxt(path, dtype=np.float64, ndmin=2, usecols=(0, 1, 2))
    return as_cloud(data)


def write_xyz(path, cloud) -> None:
    # repr-precision floats so a round trip is exact
    lines = [" ".join(repr(float(v)) for v in p) for p in as_cloud(cloud)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_ply(path, cloud) -> None:
    cloud = as_cloud(cloud)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(cloud.astype("<f8").tobytes())


def read_ply(path) -> np.ndarray:
    """Vertex positions from a binary little-endian (or ASCII) PLY file.

    Other elements and vertex properties are skipped.
    """
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:body_start].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties before vertex data are not supported")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise ValueError(f"{path}: vertex element must come first")
    _, count, props = elements[0]
    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        verts = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
        cloud = np.stack([verts["x"], verts["y"], verts["z"]], axis=1).astype(np.float64)
    elif fmt == "ascii":
        names = [name for name, _ in props]
        rows = raw[body_start:].decode("ascii").split("\n")[:count]
        table = np.array([[float(v) for v in re.split(r"\s+", r.strip())] for r in rows])
        cloud = table[:, [names.index("x"), names.index("y"), names.index("z")]]
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    return as_cloud(cloud)


def read_cloud(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def write_cloud(path, cloud) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(path, cloud)
    else:
        write_xyz(path, cloud)


def write_manifest(path, cloud_paths: dict, motions: dict | None = None, extra: dict | None = None) -> None:
    """Case manifest: ``{"teeth": {"11": {"cloud": ..., "motion": {q, t, c}}, ...}}``.

    Cloud paths are written relative to the manifest's directory when possible.
    """
    path = Path(path)
    teeth = {}
    for label in sorted(cloud_paths):
        p = Path(cloud_paths[label])
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        entry = {"cloud": str(p)}
        if motions and label in motions:
            entry["motion"] = motions[label].to_dict()
        teeth[str(label)] = entry
    doc = {"teeth": teeth}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_manifest(path) -> tuple[Dentition, dict[int, RigidMotion]]:
    path = Path(path)
    doc = json.loads(path.read_text())
    teeth, motions = {}, {}
    for key, entry in doc["teeth"].items():
        label = int(key)
        if isinstance(entry, str):
            entry = {"cloud": entry}
        cloud_path = Path(entry["cloud"])
        if not cloud_path.is_absolute():
            cloud_path = path.parent / cloud_path
        teeth[label] = Tooth(label, read_cloud(cloud_path))
        if "motion" in entry:
            motions[label] = RigidMotion.from_dict(entry["motion"])
    return Dentition(teeth), motions
