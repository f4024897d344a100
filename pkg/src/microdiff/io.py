"""File formats: PGM (2-D phases), raw bytes + JSON header (3-D), CSV curves, JSON."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .descriptors import Microstructure
from .errors import ValidationError

PHASE_ENCODING = {"matrix": 0, "inclusion": 1}
_KNOWN_SUFFIXES = (".pgm", ".raw", ".json")


def _with_ext(path: Path, ext: str) -> Path:
    """Swap a known extension for ``ext``; otherwise append it (so ``eta_0.20`` keeps its dot)."""
    if path.suffix.lower() in _KNOWN_SUFFIXES:
        return path.with_suffix(ext)
    return path.with_name(path.name + ext)


def write_pgm(path, phase: np.ndarray) -> None:
    """Binary P5 with maxval 255; phase 1 is stored as 255."""
    phase = np.asarray(phase)
    if phase.ndim != 2:
        raise ValidationError("PGM holds 2-D images only")
    h, w = phase.shape
    data = np.where(phase > 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _pgm_tokens(raw: bytes):
    """Yield (token, end offset) for the 4 header fields, skipping comments."""
    pos, out = 0, []
    while len(out) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError("truncated PGM header")
        out.append(raw[start:pos])
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a P5 image and binarise it at half of maxval."""
    raw = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(raw)
    if tokens[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValidationError(f"{path}: 16-bit PGM is not supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w)
    return (data > maxval // 2).astype(np.uint8)


def write_raw(path, phase: np.ndarray) -> Path:
    """Write ``<stem>.raw`` (uint8 phases, x fastest) plus ``<stem>.json`` header; returns the header path."""
    path = Path(path)
    phase = np.ascontiguousarray(np.asarray(phase, dtype=np.uint8))
    raw_path = _with_ext(path, ".raw")
    header = {
        "shape": list(phase.shape),
        "order": "x-fastest",
        "dtype": "uint8",
        "phase_encoding": PHASE_ENCODING,
        "data": raw_path.name,
    }
    raw_path.write_bytes(phase.tobytes())
    json_path = _with_ext(path, ".json")
    json_path.write_text(json.dumps(header, indent=2))
    return json_path


def read_raw(path) -> np.ndarray:
    path = Path(path)
    header_path = path.with_suffix(".json")
    header = json.loads(header_path.read_text())
    if header.get("order", "x-fastest") != "x-fastest":
        raise ValidationError(f"{header_path}: unsupported voxel order {header.get('order')!r}")
    raw_path = header_path.parent / header.get("data", path.with_suffix(".raw").name)
    shape = tuple(int(n) for n in header["shape"])
    data = np.frombuffer(raw_path.read_bytes(), dtype=np.uint8)
    if data.size != int(np.prod(shape)):
        raise ValidationError(f"{raw_path}: {data.size} bytes do not match shape {shape}")
    return (data.reshape(shape) > 0).astype(np.uint8)


def write_microstructure(path, phase: np.ndarray) -> Path:
    path = Path(path)
    if np.ndim(phase) == 2:
        path = _with_ext(path, ".pgm")
        write_pgm(path, phase)
        return path
    return write_raw(path, phase)


def read_microstructure(path, periodic: bool = True) -> Microstructure:
    path = Path(path)
    if not path.exists() and not path.with_suffix(".json").exists():
        raise ValidationError(f"{path}: no such file")
    if path.suffix.lower() == ".pgm":
        return Microstructure(read_pgm(path), periodic)
    if path.suffix.lower() in (".raw", ".json"):
        return Microstructure(read_raw(path), periodic)
    raise ValidationError(f"{path}: unknown microstructure format (expected .pgm, .raw or .json)")


def list_microstructures(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError(f"{d}: not a directory")
    files = sorted(list(d.glob("*.pgm")) + [p for p in d.glob("*.json") if p.with_suffix(".raw").exists()])
    if not files:
        raise ValidationError(f"{d}: no .pgm or .raw/.json microstructures found")
    return files


def write_field(path, values: np.ndarray, **meta) -> Path:
    """Float32 little-endian dump plus JSON header (e.g. velocity fields)."""
    path = Path(path)
    values = np.ascontiguousarray(values, dtype="<f4")
    raw_path = _with_ext(path, ".raw")
    raw_path.write_bytes(values.tobytes())
    header = {"shape": list(values.shape), "dtype": "<f4", "order": "x-fastest", "data": raw_path.name, **meta}
    json_path = _with_ext(path, ".json")
    json_path.write_text(json.dumps(header, indent=2))
    return json_path


def write_curves_csv(path, r, columns: dict) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["r", *columns])
        for i, rv in enumerate(r):
            wr.writerow([int(rv), *(f"{float(v[i]):.12g}" for v in columns.values())])


def read_curves_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(row[k]) for row in rows]) for k in rows[0]} if rows else {}


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
