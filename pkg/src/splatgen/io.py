"""Persistence formats and the guidance wire protocol.

Formats are strict by design: any deviation from the declared layout is a
parse error (silent hyperparameter or layout drift is the main
reproducibility hazard).
"""

from __future__ import annotations

import base64
import dataclasses
import json
import os
import struct
import tempfile

import numpy as np

from splatgen.errors import ConfigError, ParseError
from splatgen.gaussians import CameraPose, GaussianCloud

FEATURE_MAGIC = b"FTV1"


def atomic_write(path: str, data: bytes) -> None:
    """Write via temp file + rename so partially written files never appear."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PLY (common Gaussian-splatting vertex layout, binary little-endian)


def _ply_property_names(sh_count: int) -> list[str]:
    rest = 3 * (sh_count - 1)
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def save_ply(cloud: GaussianCloud, path: str) -> None:
    n = cloud.count
    m = cloud.sh_coeffs.shape[1]
    names = _ply_property_names(m)
    header = "ply\nformat binary_little_endian 1.0\n"
    header += f"element vertex {n}\n"
    header += "".join(f"property float {name}\n" for name in names)
    header += "end_header\n"

    cols = [cloud.positions, cloud.sh_coeffs[:, 0, :]]
    if m > 1:
        # rest coefficients channel-major: f_rest index = channel*(m-1) + coeff
        rest = np.transpose(cloud.sh_coeffs[:, 1:, :], (0, 2, 1)).reshape(n, -1)
        cols.append(rest)
    cols += [
        cloud.opacity_logits[:, None],
        cloud.log_scales,
        cloud.rotations,
    ]
    payload = np.concatenate(cols, axis=1).astype("<f4")
    atomic_write(path, header.encode("ascii") + payload.tobytes())


def load_ply(path: str) -> GaussianCloud:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ParseError("missing end_header", offset=0)
    header_bytes = raw[: end + len(b"end_header\n")]
    lines = header_bytes.decode("ascii", errors="replace").splitlines()
    if not lines or lines[0] != "ply":
        raise ParseError("not a PLY file", offset=0)
    if len(lines) < 2 or lines[1] != "format binary_little_endian 1.0":
        raise ParseError("unsupported PLY format line", offset=len(lines[0]) + 1)
    if len(lines) < 3 or not lines[2].startswith("element vertex "):
        raise ParseError("expected 'element vertex N'", offset=header_bytes.find(b"element"))
    try:
        n = int(lines[2].split()[-1])
    except ValueError:
        raise ParseError("bad vertex count", offset=header_bytes.find(b"element"))
    props = []
    for ln in lines[3:-1]:
        parts = ln.split()
        if len(parts) != 3 or parts[0] != "property" or parts[1] != "float":
            raise ParseError(f"bad property line {ln!r}", offset=header_bytes.find(ln.encode()))
        props.append(parts[2])

    # infer SH count from property list and validate exact order
    rest = len(props) - 14
    if rest < 0 or rest % 3 != 0:
        raise ParseError("unexpected property count")
    m = rest // 3 + 1
    if int(np.sqrt(m)) ** 2 != m:
        raise ParseError(f"SH coefficient count {m} is not (L+1)^2")
    if props != _ply_property_names(m):
        raise ParseError("property names/order do not match the Gaussian layout")

    body = raw[len(header_bytes):]
    want = 4 * len(props) * n
    if len(body) != want:
        raise ParseError(
            f"payload size {len(body)} != expected {want}", offset=len(header_bytes)
        )
    data = np.frombuffer(body, dtype="<f4").reshape(n, len(props)).astype(float)
    if n and not np.isfinite(data).all():
        bad = int(np.argwhere(~np.isfinite(data))[0, 0])
        raise ParseError("non-finite field value", offset=len(header_bytes) + bad * 4 * len(props))

    positions = data[:, 0:3]
    dc = data[:, 3:6]
    sh = np.zeros((n, m, 3))
    sh[:, 0, :] = dc
    if m > 1:
        sh[:, 1:, :] = data[:, 6 : 6 + 3 * (m - 1)].reshape(n, 3, m - 1).transpose(0, 2, 1)
    off = 6 + 3 * (m - 1)
    opacity = data[:, off]
    log_scales = data[:, off + 1 : off + 4]
    rotations = data[:, off + 4 : off + 8]
    return GaussianCloud(positions, rotations, log_scales, opacity, sh)


# ---------------------------------------------------------------------------
# FeatureFile ("FTV1"): u32 K, u32 D, then K*D float32 row-major LE


def save_features(matrix: np.ndarray, path: str) -> None:
    if matrix.ndim != 2:
        raise ConfigError("feature matrix must be 2-D")
    k, d = matrix.shape
    buf = FEATURE_MAGIC + struct.pack("<II", k, d) + matrix.astype("<f4").tobytes()
    atomic_write(path, buf)


def load_features(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise ParseError("truncated feature file", offset=len(raw))
    if raw[:4] != FEATURE_MAGIC:
        raise ParseError("bad magic", offset=0)
    k, d = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * k * d:
        raise ParseError(f"file size {len(raw)} != {12 + 4 * k * d}", offset=12)
    return np.frombuffer(raw[12:], dtype="<f4").reshape(k, d).astype(float)


# ---------------------------------------------------------------------------
# Guidance wire protocol (JSON + base64 float32)


def encode_image_b64(image: np.ndarray) -> str:
    return base64.b64encode(image.astype("<f4").tobytes()).decode("ascii")


def decode_image_b64(data: str, height: int, width: int) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"))
    want = 4 * height * width * 3
    if len(raw) != want:
        raise ParseError(f"image payload {len(raw)} bytes, expected {want}")
    return np.frombuffer(raw, dtype="<f4").reshape(height, width, 3).astype(float)


def guidance_request_json(mode, prompt, negative_prompt, timestep, cfg_scale, images, cameras):
    if mode not in ("sd", "mv"):
        raise ConfigError(f"wire mode must be 'sd' or 'mv', got {mode!r}")
    return {
        "mode": mode,
        "prompt": prompt,
        "negative_prompt": negative_prompt,
        "timestep": int(timestep),
        "cfg_scale": float(cfg_scale),
        "images": [
            {
                "camera": {
                    "azimuth": cam.azimuth,
                    "elevation": cam.elevation,
                    "distance": cam.distance,
                    "fov_deg": cam.fov_deg,
                },
                "rgb": encode_image_b64(img),
                "height": img.shape[0],
                "width": img.shape[1],
            }
            for img, cam in zip(images, cameras)
        ],
    }


# ---------------------------------------------------------------------------
# Flat key=value run configuration


def serialize_config(cfg) -> str:
    """Dataclass -> flat ``key=value`` lines (sorted by field order)."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={v!r}" if isinstance(v, str) else f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, cfg_cls):
    """Parse flat key=value text into cfg_cls; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(cfg_cls)}
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        ftype = fields[key].type
        if ftype in ("int", int):
            kwargs[key] = int(val)
        elif ftype in ("float", float):
            kwargs[key] = float(val)
        elif ftype in ("bool", bool):
            if val not in ("True", "False", "true", "false"):
                raise ConfigError(f"line {lineno}: bad bool {val!r}")
            kwargs[key] = val in ("True", "true")
        else:
            if val.startswith(("'", '"')) and val.endswith(val[0]) and len(val) >= 2:
                val = val[1:-1]
            kwargs[key] = val
    return cfg_cls(**kwargs)


def save_json(obj, path: str) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# Turntable export


def turntable_cameras(frames: int = 120, width: int = 256, height: int = 256):
    """Evaluation cameras: evenly spaced azimuths, distance 3.0, FOV 40."""
    return [
        CameraPose(
            azimuth=360.0 * k / frames,
            elevation=0.0,
            distance=3.0,
            fov_deg=40.0,
            width=width,
            height=height,
        )
        for k in range(frames)
    ]


def render_turntable(
    cloud: GaussianCloud,
    out_dir: str,
    frames: int = 120,
    width: int = 256,
    height: int = 256,
) -> list[str]:
    """Render PNG frames on white background; returns written paths."""
    from PIL import Image

    from splatgen.rasterizer import render

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k, cam in enumerate(turntable_cameras(frames, width, height)):
        out = render(cloud, cam, background=(1.0, 1.0, 1.0))
        img = np.clip(np.round(out.rgb * 255.0), 0, 255).astype(np.uint8)
        path = os.path.join(out_dir, f"frame_{k:03d}.png")
        Image.fromarray(img).save(path)
        paths.append(path)
    return paths
