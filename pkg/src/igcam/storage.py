"""On-disk formats: parameter checkpoints, float grids and key=value configs.

Checkpoint::

    IGCAM01\\n
    {json header: spec fields, extra metadata, segment table}\\n
    <segments as little-endian float64, in layout order>

Grid file (influence maps and CAMs)::

    IGGRID width=W height=H scale=S source_id=ID epoch_stamp=E\\n
    <W*H little-endian float32, row-major>
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .diffmodel import ModelSpec, ParamVector, Segment
from .errors import ConfigurationError

MAGIC = b"IGCAM01\n"
GRID_MAGIC = "IGGRID"


def save_checkpoint(path, spec: ModelSpec, params: ParamVector, extra_segments: Optional[dict] = None,
                    meta: Optional[dict] = None) -> bytes:
    extra_segments = extra_segments or {}
    segs = [[s.name, s.length, list(s.shape)] for s in params.layout]
    segs += [[name, int(np.asarray(v).size), list(np.asarray(v).shape)] for name, v in extra_segments.items()]
    header = {"spec": spec.to_dict(), "meta": meta or {}, "segments": segs, "model_segments": len(params.layout)}
    body = [np.asarray(params.values, dtype="<f8").tobytes()]
    body += [np.asarray(v, dtype="<f8").ravel().tobytes() for v in extra_segments.values()]
    blob = MAGIC + json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + b"".join(body)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path_or_bytes) -> tuple[ModelSpec, ParamVector, dict, dict]:
    blob = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    if not blob.startswith(MAGIC):
        raise ConfigurationError("not an IGCAM01 checkpoint")
    end = blob.index(b"\n", len(MAGIC))
    header = json.loads(blob[len(MAGIC) : end])
    spec = ModelSpec.from_dict(header["spec"])
    data = np.frombuffer(blob[end + 1 :], dtype="<f8").astype(np.float64)
    total = sum(n for _, n, _ in header["segments"])
    if data.size != total:
        raise ConfigurationError(f"checkpoint body holds {data.size} values, header declares {total}")
    n_model = header["model_segments"]
    layout, off = [], 0
    for name, n, shape in header["segments"][:n_model]:
        layout.append(Segment(name, off, n, tuple(shape)))
        off += n
    params = ParamVector(data[:off].copy(), tuple(layout))
    extras = {}
    for name, n, shape in header["segments"][n_model:]:
        extras[name] = data[off : off + n].reshape(shape).copy()
        off += n
    return spec, params, extras, header["meta"]


def save_grid(path, values, scale: float = 1.0, source_id: str = "", epoch_stamp: int = 0) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ConfigurationError("grid files hold two-dimensional maps")
    if any(c.isspace() for c in source_id) or "=" in source_id:
        raise ConfigurationError("source_id may not contain whitespace or '='")
    h, w = values.shape
    head = f"{GRID_MAGIC} width={w} height={h} scale={scale!r} source_id={source_id} epoch_stamp={int(epoch_stamp)}\n"
    blob = head.encode() + np.asarray(values, dtype="<f4").tobytes()
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def load_grid(path_or_bytes) -> tuple[np.ndarray, dict]:
    blob = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    end = blob.index(b"\n")
    tokens = blob[:end].decode().split()
    if tokens[0] != GRID_MAGIC:
        raise ConfigurationError("not an IGGRID file")
    meta = dict(t.split("=", 1) for t in tokens[1:])
    w, h = int(meta["width"]), int(meta["height"])
    values = np.frombuffer(blob[end + 1 :], dtype="<f4").reshape(h, w).astype(np.float64)
    info = {"scale": float(meta["scale"]), "source_id": meta["source_id"], "epoch_stamp": int(meta["epoch_stamp"])}
    return values, info


def _coerce(text: str, kind: Any):
    text = text.strip()
    if kind is bool or isinstance(kind, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {text!r}")
    if isinstance(kind, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        elem = type(kind[0]) if kind else float
        return tuple(elem(float(p)) if elem is int else elem(p) for p in parts)
    if isinstance(kind, int):
        return int(float(text))
    if isinstance(kind, float):
        return float(text)
    return text


def parse_config(text: str, defaults, source: str = "<config>") -> Any:
    """Apply flat ``key = value`` lines onto a dataclass instance of defaults."""
    known = {f.name for f in fields(defaults)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_").replace(" ", "_").lower()
        if key not in known:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        updates[key] = _coerce(value, getattr(defaults, key))
    return type(defaults)(**{**{f.name: getattr(defaults, f.name) for f in fields(defaults)}, **updates})


def read_config(path, defaults) -> Any:
    return parse_config(Path(path).read_text(), defaults, str(path))


def write_config(cfg, path):
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")
