"""Binary little-endian PLY I/O for splat scenes and sampled point clouds,
plus the ground-truth JSON sidecar.

Scene vertices carry, in order: position, scalar-first quaternion, per-axis
scale, RGB in [0, 1], opacity, and three 3-float semantic code groups
(lang_s_*, lang_p_*, lang_w_*), all float32. Files written by
`save_scene_ply` round-trip through `load_scene_ply` bit-exactly.
"""

from __future__ import annotations

import warnings

import numpy as np

from .scene import CODE_DIM, LEVELS, Scene

FLOAT_TYPES = {"float", "float32"}
UINT_TYPES = {"uint", "uint32"}

_PLY_TO_NUMPY = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

CORE_PROPERTIES = ("x", "y", "z",
                   "rot_w", "rot_x", "rot_y", "rot_z",
                   "scale_x", "scale_y", "scale_z",
                   "red", "green", "blue", "opacity")
CODE_PROPERTIES = tuple(f"lang_{lvl}_{i}"
                        for lvl in LEVELS for i in range(CODE_DIM))
SCENE_PROPERTIES = CORE_PROPERTIES + CODE_PROPERTIES


class PlyParseError(ValueError):
    """Raised for malformed PLY input; the message names the offender."""


class SceneFormatWarning(UserWarning):
    """Non-fatal scene file deficiencies (e.g. missing semantic fields)."""


def _parse_header(f, path):
    magic = f.readline()
    if magic.strip() != b"ply":
        raise PlyParseError(f"{path}: missing 'ply' magic line")
    fmt = None
    elements = []  # (name, count, [(prop_name, ply_type)])
    while True:
        line = f.readline()
        if not line:
            raise PlyParseError(f"{path}: header ended before 'end_header'")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens:
            continue
        if tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "binary_little_endian":
                got = tokens[1] if len(tokens) > 1 else "?"
                raise PlyParseError(
                    f"{path}: format '{got}' not supported; expected "
                    f"binary_little_endian")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise PlyParseError(f"{path}: malformed element line "
                                    f"{line!r}")
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyParseError(f"{path}: property before any element")
            if tokens[1] == "list":
                raise PlyParseError(
                    f"{path}: list property '{tokens[-1]}' not supported")
            if len(tokens) != 3:
                raise PlyParseError(f"{path}: malformed property line "
                                    f"{line!r}")
            elements[-1][2].append((tokens[2], tokens[1]))
        elif tokens[0] == "end_header":
            break
        else:
            raise PlyParseError(f"{path}: unknown header keyword "
                                f"'{tokens[0]}'")
    if fmt is None:
        raise PlyParseError(f"{path}: header has no format line")
    if not elements:
        raise PlyParseError(f"{path}: header declares no elements")
    name, count, props = elements[0]
    if name != "vertex":
        raise PlyParseError(f"{path}: first element is '{name}', expected "
                            f"'vertex'")
    return count, props


def _read_vertices(path):
    with open(path, "rb") as f:
        count, props = _parse_header(f, path)
        fields = []
        for pname, ptype in props:
            if ptype not in _PLY_TO_NUMPY:
                raise PlyParseError(
                    f"{path}: property '{pname}' has unsupported type "
                    f"'{ptype}'")
            fields.append((pname, "<" + _PLY_TO_NUMPY[ptype]))
        dtype = np.dtype(fields)
        raw = f.read(count * dtype.itemsize)
    if len(raw) < count * dtype.itemsize:
        raise PlyParseError(
            f"{path}: truncated payload, expected {count * dtype.itemsize} "
            f"bytes for {count} vertices, got {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=count)
    types = {pname: ptype for pname, ptype in props}
    return data, types


def _require(data, types, name, allowed, path):
    if name not in types:
        raise PlyParseError(f"{path}: vertex property '{name}' missing")
    if types[name] not in allowed:
        raise PlyParseError(
            f"{path}: property '{name}' has type '{types[name]}', expected "
            f"one of {sorted(allowed)}")
    col = np.asarray(data[name])
    bad = np.where(~np.isfinite(col))[0]
    if bad.size:
        raise PlyParseError(
            f"{path}: non-finite value in property '{name}' at vertex "
            f"{bad[0]}")
    return col.astype(np.float64)


def save_scene_ply(scene: Scene, path) -> None:
    """Write a scene; output bytes depend only on the scene contents."""
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0",
              "comment splat scene with per-splat semantic codes",
              f"element vertex {n}"]
    header += [f"property float {p}" for p in SCENE_PROPERTIES]
    header.append("end_header")
    rec = np.empty(n, dtype=[(p, "<f4") for p in SCENE_PROPERTIES])
    for i, axis in enumerate("xyz"):
        rec[axis] = scene.centers[:, i]
    for i, comp in enumerate("wxyz"):
        rec[f"rot_{comp}"] = scene.rotations[:, i]
    for i, axis in enumerate("xyz"):
        rec[f"scale_{axis}"] = scene.scales[:, i]
    for i, ch in enumerate(("red", "green", "blue")):
        rec[ch] = scene.colors[:, i]
    rec["opacity"] = scene.opacities
    for li, lvl in enumerate(LEVELS):
        for ci in range(CODE_DIM):
            rec[f"lang_{lvl}_{ci}"] = scene.codes[:, li, ci]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def load_scene_ply(path, convention: str = "linear") -> Scene:
    """Read a scene PLY.

    Args:
        path: file to read.
        convention: "linear" expects opacity in [0, 1] and scales as stored;
            "3dgs" applies sigmoid to opacity and exp to scales on import.

    Missing semantic code properties load as zeros with a
    SceneFormatWarning. Malformed files raise PlyParseError naming the
    offending element.
    """
    if convention not in ("linear", "3dgs"):
        raise ValueError(f"unknown convention '{convention}'")
    data, types = _read_vertices(path)
    n = data.shape[0]

    cols = {name: _require(data, types, name, FLOAT_TYPES, path)
            for name in CORE_PROPERTIES}
    codes = np.zeros((n, len(LEVELS), CODE_DIM), dtype=np.float64)
    missing = []
    for li, lvl in enumerate(LEVELS):
        names = [f"lang_{lvl}_{ci}" for ci in range(CODE_DIM)]
        if all(nm in types for nm in names):
            for ci, nm in enumerate(names):
                codes[:, li, ci] = _require(data, types, nm, FLOAT_TYPES,
                                            path)
        else:
            missing.extend(nm for nm in names if nm not in types)
    if missing:
        warnings.warn(
            f"{path}: semantic properties {missing} missing, codes set to "
            f"zero", SceneFormatWarning, stacklevel=2)

    centers = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    rotations = np.stack([cols["rot_w"], cols["rot_x"], cols["rot_y"],
                          cols["rot_z"]], axis=1)
    scales = np.stack([cols["scale_x"], cols["scale_y"], cols["scale_z"]],
                      axis=1)
    colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
    opacity = cols["opacity"]
    if convention == "3dgs":
        opacity = 1.0 / (1.0 + np.exp(-opacity))
        scales = np.exp(scales)
    return Scene(centers, rotations, scales, colors, opacity, codes)


CLOUD_CORE = ("x", "y", "z", "red", "green", "blue")
CLOUD_NORMALS = ("nx", "ny", "nz")


def save_cloud_ply(cloud, path) -> None:
    """Write a sampled point cloud (see pointcloud.PointCloud)."""
    n = cloud.positions.shape[0]
    props = list(CLOUD_CORE)
    if cloud.normals is not None:
        props += list(CLOUD_NORMALS)
    fields = [(p, "<f4") for p in props] + [("source_index", "<u4")]
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header.append("property uint source_index")
    header.append("end_header")
    rec = np.empty(n, dtype=fields)
    for i, axis in enumerate("xyz"):
        rec[axis] = cloud.positions[:, i]
    for i, ch in enumerate(("red", "green", "blue")):
        rec[ch] = cloud.colors[:, i]
    if cloud.normals is not None:
        for i, nm in enumerate(CLOUD_NORMALS):
            rec[nm] = cloud.normals[:, i]
    rec["source_index"] = cloud.source_index.astype(np.uint32)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def load_cloud_ply(path):
    """Read a point cloud PLY written by save_cloud_ply."""
    from .pointcloud import PointCloud  # local import avoids a cycle

    data, types = _read_vertices(path)
    cols = {name: _require(data, types, name, FLOAT_TYPES, path)
            for name in CLOUD_CORE}
    normals = None
    if all(nm in types for nm in CLOUD_NORMALS):
        normals = np.stack([_require(data, types, nm, FLOAT_TYPES, path)
                            for nm in CLOUD_NORMALS], axis=1)
    if "source_index" not in types:
        raise PlyParseError(f"{path}: vertex property 'source_index' missing")
    if types["source_index"] not in UINT_TYPES:
        raise PlyParseError(
            f"{path}: property 'source_index' has type "
            f"'{types['source_index']}', expected one of "
            f"{sorted(UINT_TYPES)}")
    positions = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
    source = np.asarray(data["source_index"]).astype(np.int64)
    return PointCloud(positions=positions, colors=colors, normals=normals,
                      source_index=source)


def save_ground_truth(gt, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(gt.to_json())
        f.write("\n")


def load_ground_truth(path):
    from .scene import GroundTruth

    with open(path, "r", encoding="ascii") as f:
        return GroundTruth.from_json(f.read())
