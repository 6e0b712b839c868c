"""On-disk formats.

Weights file (``.tmlm``)::

    b"TMLM"                      magic
    u32 little-endian            format version (1)
    u32 little-endian            byte length n of the JSON config
    n bytes                      UTF-8 JSON ModelConfig (sorted keys)
    float32 little-endian ...    every parameter, row-major, in param_shapes() order

Images are raw little-endian float32 pixels (height, width, channels) in
[0, 1] with a JSON sidecar ``{"height", "width", "channels"}`` next to them
(``<name>.f32`` + ``<name>.json``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, VisualInput, param_shapes

MAGIC = b"TMLM"
FORMAT_VERSION = 1


def params_to_bytes(params: ModelParams) -> bytes:
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg]
    for name, shape in param_shapes(params.config):
        arr = params.arrays[name]
        if arr.shape != shape:
            raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def params_from_bytes(blob: bytes) -> ModelParams:
    if blob[:4] != MAGIC:
        raise ValueError("not a TMLM weights file")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {version}")
    off = 12
    config = ModelConfig.from_dict(json.loads(blob[off:off + n].decode()))
    off += n
    arrays = {}
    for name, shape in param_shapes(config):
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        arrays[name] = arr.astype(np.float64).reshape(shape)
        off += 4 * count
    if off != len(blob):
        raise ValueError(f"weights file has {len(blob) - off} trailing bytes")
    return ModelParams(config, arrays)


def save_params(params: ModelParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())


def quantize_params(params: ModelParams) -> ModelParams:
    """Round-trip through the float32 file format."""
    return params_from_bytes(params_to_bytes(params))


def _image_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    base = p.with_suffix("") if p.suffix in (".f32", ".json") else p
    return base.with_suffix(".f32"), base.with_suffix(".json")


def save_image(image: VisualInput | np.ndarray, path) -> Path:
    px = image.pixels if isinstance(image, VisualInput) else np.asarray(image)
    raw, side = _image_paths(path)
    raw.write_bytes(np.ascontiguousarray(px, dtype="<f4").tobytes())
    h, w, c = px.shape
    side.write_text(json.dumps({"height": h, "width": w, "channels": c}, sort_keys=True))
    return raw


def load_image(path) -> VisualInput:
    raw, side = _image_paths(path)
    meta = json.loads(side.read_text())
    shape = (int(meta["height"]), int(meta["width"]), int(meta["channels"]))
    px = np.frombuffer(raw.read_bytes(), dtype="<f4")
    if px.size != np.prod(shape):
        raise ValueError(f"{raw} holds {px.size} floats, sidecar says {shape}")
    return VisualInput(px.astype(np.float64).reshape(shape))


def export_ppm(image: VisualInput | np.ndarray, path, upscale: int = 8) -> None:
    """Binary PPM (P6) for eyeballing; each pixel becomes an upscale x upscale block."""
    px = image.pixels if isinstance(image, VisualInput) else np.asarray(image)
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    px = np.repeat(np.repeat(px[:, :, :3], upscale, axis=0), upscale, axis=1)
    data = np.clip(np.rint(px * 255), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())
