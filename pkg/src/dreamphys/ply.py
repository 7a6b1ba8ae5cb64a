"""3DGS PLY ingestion (binary little-endian or ascii) and a debug writer."""

from __future__ import annotations

import numpy as np

from .errors import EmptyScene, MalformedPly
from .scene import Scene

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}

_REQUIRED = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2",
             "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3"]

# f_rest property count per SH degree (3 channels x ((deg+1)^2 - 1) coeffs)
_REST_TO_DEGREE = {0: 0, 9: 1, 24: 2, 45: 3}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _parse_header(blob: bytes):
    end = blob.find(b"end_header")
    if end < 0:
        raise MalformedPly("missing end_header")
    end = blob.find(b"\n", end) + 1
    try:
        lines = blob[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise MalformedPly("header is not ascii") from exc
    if not lines or lines[0].strip() != "ply":
        raise MalformedPly("missing ply magic line")

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in lines[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise MalformedPly("list properties unsupported for vertex element")
            if tok[1] not in _PLY_TYPES:
                raise MalformedPly(f"unsupported property type {tok[1]!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("binary_little_endian", "ascii"):
        raise MalformedPly(f"unsupported format {fmt!r}")
    if count is None:
        raise MalformedPly("no vertex element")
    return fmt, count, props, end


def load_ply(path) -> Scene:
    """Load a 3DGS PLY file.

    Applies the de-facto 3DGS storage activations: sigmoid on opacity,
    exp on scales, quaternion renormalization. SH degree is inferred from
    the f_rest property count (0 when absent).
    """
    with open(path, "rb") as f:
        blob = f.read()
    fmt, count, props, body_off = _parse_header(blob)
    if count == 0:
        raise EmptyScene(f"{path}: vertex element has 0 entries")

    names = [n for n, _ in props]
    for name in _REQUIRED:
        if name not in names:
            raise MalformedPly(f"missing vertex property {name!r}")

    rest_names = sorted(
        (n for n in names if n.startswith("f_rest_")),
        key=lambda n: int(n.split("_")[-1]),
    )
    if len(rest_names) not in _REST_TO_DEGREE:
        raise MalformedPly(f"unexpected f_rest count {len(rest_names)}")
    degree = _REST_TO_DEGREE[len(rest_names)]

    if fmt == "binary_little_endian":
        dtype = np.dtype(props)
        need = body_off + count * dtype.itemsize
        if len(blob) < need:
            raise MalformedPly("truncated vertex data")
        data = np.frombuffer(blob, dtype=dtype, count=count, offset=body_off)
        col = lambda n: data[n].astype(np.float64)
    else:
        rows = blob[body_off:].decode("ascii").split()
        if len(rows) < count * len(props):
            raise MalformedPly("truncated ascii vertex data")
        arr = np.array(rows[: count * len(props)], dtype=np.float64)
        arr = arr.reshape(count, len(props))
        idx = {n: i for i, (n, _) in enumerate(props)}
        col = lambda n: arr[:, idx[n]]

    centers = np.stack([col("x"), col("y"), col("z")], axis=1)
    opacities = _sigmoid(col("opacity"))
    scales = np.exp(np.stack([col("scale_0"), col("scale_1"), col("scale_2")], axis=1))
    rotations = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)

    n_coeff = (degree + 1) ** 2
    sh = np.zeros((count, n_coeff, 3))
    sh[:, 0, 0] = col("f_dc_0")
    sh[:, 0, 1] = col("f_dc_1")
    sh[:, 0, 2] = col("f_dc_2")
    if degree > 0:
        # file layout is channel-major: all R rest coeffs, then G, then B
        k = n_coeff - 1
        rest = np.stack([col(n) for n in rest_names], axis=1).reshape(count, 3, k)
        sh[:, 1:, :] = rest.transpose(0, 2, 1)

    return Scene(centers, opacities, scales, rotations, sh, sh_degree=degree)


def save_ply(scene: Scene, path) -> None:
    """Debug writer: inverse of load_ply on all stored fields."""
    n = len(scene)
    k = (scene.sh_degree + 1) ** 2 - 1
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * k)]
    names += ["opacity", "scale_0", "scale_1", "scale_2"]
    names += [f"rot_{i}" for i in range(4)]

    data = np.empty(n, dtype=np.dtype([(nm, "<f4") for nm in names]))
    data["x"], data["y"], data["z"] = scene.centers.T
    for c in range(3):
        data[f"f_dc_{c}"] = scene.sh[:, 0, c]
    if k:
        rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * k)
        for i in range(3 * k):
            data[f"f_rest_{i}"] = rest[:, i]
    op = np.clip(scene.opacities, 1e-7, 1 - 1e-7)
    data["opacity"] = np.log(op / (1 - op))
    for a in range(3):
        data[f"scale_{a}"] = np.log(scene.scales[:, a])
    for a in range(4):
        data[f"rot_{a}"] = scene.rotations[:, a]

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {nm}" for nm in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())
