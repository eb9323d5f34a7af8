"""On-disk formats: raw float32 images with text sidecars, PGM previews, stacks."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = [
    "write_image",
    "read_image",
    "write_pgm",
    "write_stack",
    "read_stack",
    "read_kv",
    "write_kv",
    "sha256_file",
    "find_images",
]


def write_kv(path: Path, items: dict):
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_pgm(path: Path, img: np.ndarray):
    """16-bit binary PGM, max-normalized (negative values clipped to 0)."""
    img = np.asarray(img, dtype=float)
    peak = img.max()
    scaled = np.clip(img / peak, 0, 1) if peak > 0 else np.zeros_like(img)
    data = np.rint(scaled * 65535).astype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def write_image(path: Path, img: np.ndarray, pitch: float, role: str, preview: bool = True):
    """Write ``<path>.f32`` (little-endian float32, row-major) plus ``<path>.hdr``."""
    path = Path(path)
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("write_image expects a 2D array")
    path.with_suffix(".f32").write_bytes(img.astype("<f4").tobytes())
    write_kv(path.with_suffix(".hdr"), {
        "format": "float32-le",
        "n1": img.shape[0],
        "n2": img.shape[1],
        "pitch": repr(float(pitch)),
        "role": role,
    })
    if preview:
        write_pgm(path.with_suffix(".pgm"), img)


def read_image(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = read_kv(path.with_suffix(".hdr"))
    n1, n2 = int(meta["n1"]), int(meta["n2"])
    data = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype="<f4")
    if data.size != n1 * n2:
        raise ValueError(f"{path}: expected {n1 * n2} samples, found {data.size}")
    return data.reshape(n1, n2).astype(float), meta


def write_stack(directory: Path, stack: np.ndarray, pitch: float, role: str, prefix: str = "frame"):
    """One image per frame with a zero-padded index, plus ``stack.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(stack.shape[0] - 1)))
    names = []
    for i, frame in enumerate(stack):
        name = f"{prefix}_{i:0{width}d}"
        write_image(directory / name, frame, pitch, role, preview=False)
        names.append(name)
    write_kv(directory / "stack.txt", {
        "m": stack.shape[0],
        "n1": stack.shape[1],
        "n2": stack.shape[2],
        "pitch": repr(float(pitch)),
        "role": role,
        "frames": ",".join(names),
    })


def read_stack(directory: Path) -> tuple[np.ndarray, dict]:
    directory = Path(directory)
    meta = read_kv(directory / "stack.txt")
    frames = [read_image(directory / name)[0] for name in meta["frames"].split(",")]
    if len(frames) != int(meta["m"]):
        raise ValueError(f"{directory}: stack manifest lists {meta['m']} frames, found {len(frames)}")
    return np.stack(frames), meta


def sha256_file(path: Path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def find_images(directory: Path, suffix: str = ".f32") -> list[Path]:
    return sorted(p for p in Path(directory).rglob(f"*{suffix}"))
