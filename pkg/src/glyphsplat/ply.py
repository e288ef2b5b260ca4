"""Binary PLY persistence for Gaussian clouds.

The schema is fixed: float32 position, color, opacity logit, log scales and
quaternion (wxyz), plus an int32 component label, little-endian. Writing is
fully deterministic: identical clouds produce byte-identical files. The
float64 working precision is quantized through float32 on save, so a
save/load round trip is exact only after the first quantization; callers
that need render-identical round trips should quantize before rendering
(cloud initialization does exactly that).
"""

from __future__ import annotations

import numpy as np

from .cloud import GaussianCloud

_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("f_dc_0", "<f4"),
        ("f_dc_1", "<f4"),
        ("f_dc_2", "<f4"),
        ("opacity", "<f4"),
        ("scale_0", "<f4"),
        ("scale_1", "<f4"),
        ("scale_2", "<f4"),
        ("rot_0", "<f4"),
        ("rot_1", "<f4"),
        ("rot_2", "<f4"),
        ("rot_3", "<f4"),
        ("component_id", "<i4"),
    ]
)

_PROPERTY_TYPES = {"<f4": "float", "<i4": "int"}


def _header(n):
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for name in _DTYPE.names:
        kind = _PROPERTY_TYPES[_DTYPE.fields[name][0].str]
        lines.append(f"property {kind} {name}")
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def quantize(cloud):
    """Round all parameters through float32, as saving would.

    Returns a new cloud whose save/load round trip is bit-exact.
    """
    return GaussianCloud(
        positions=cloud.positions.astype(np.float32).astype(np.float64),
        log_scales=cloud.log_scales.astype(np.float32).astype(np.float64),
        rotations=cloud.rotations.astype(np.float32).astype(np.float64),
        colors=cloud.colors.astype(np.float32).astype(np.float64),
        opacity_logits=cloud.opacity_logits.astype(np.float32).astype(np.float64),
        component_ids=cloud.component_ids.copy(),
    )


def save_ply(cloud, path):
    n = len(cloud)
    rows = np.empty(n, dtype=_DTYPE)
    rows["x"], rows["y"], rows["z"] = cloud.positions.T.astype(np.float32)
    rows["f_dc_0"], rows["f_dc_1"], rows["f_dc_2"] = cloud.colors.T.astype(np.float32)
    rows["opacity"] = cloud.opacity_logits.astype(np.float32)
    rows["scale_0"], rows["scale_1"], rows["scale_2"] = cloud.log_scales.T.astype(np.float32)
    for k in range(4):
        rows[f"rot_{k}"] = cloud.rotations[:, k].astype(np.float32)
    rows["component_id"] = cloud.component_ids
    with open(path, "wb") as fh:
        fh.write(_header(n))
        fh.write(rows.tobytes())


def load_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[: end + len(b"end_header\n")]
    expected = _header(0)
    n = None
    for line in header.decode("ascii").splitlines():
        if line.startswith("element vertex "):
            n = int(line.split()[-1])
    if n is None:
        raise ValueError(f"{path}: missing vertex element")
    if header != _header(n):
        raise ValueError(f"{path}: unsupported PLY layout for Gaussian clouds")
    body = data[end + len(b"end_header\n") :]
    if len(body) != n * _DTYPE.itemsize:
        raise ValueError(f"{path}: truncated body ({len(body)} bytes for {n} vertices)")
    rows = np.frombuffer(body, dtype=_DTYPE, count=n)
    return GaussianCloud(
        positions=np.stack([rows["x"], rows["y"], rows["z"]], axis=1).astype(np.float64),
        colors=np.stack([rows["f_dc_0"], rows["f_dc_1"], rows["f_dc_2"]], axis=1).astype(
            np.float64
        ),
        opacity_logits=rows["opacity"].astype(np.float64),
        log_scales=np.stack([rows["scale_0"], rows["scale_1"], rows["scale_2"]], axis=1).astype(
            np.float64
        ),
        rotations=np.stack([rows[f"rot_{k}"] for k in range(4)], axis=1).astype(np.float64),
        component_ids=rows["component_id"].astype(np.int32),
    )
