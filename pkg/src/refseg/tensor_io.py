"""On-disk formats: EAVT tensor blobs and portable pixmap images.

EAVT layout (little-endian): magic ``EAVT``, u32 rank, u32 dims[rank],
then the raw f32 or f64 payload.  Precision is recovered from the payload
byte count.  PPM (P6) and PGM (P5) are used for dataset images, masks and
debug dumps.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

EAVT_MAGIC = b"EAVT"


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    if arr.dtype not in (np.float32, np.float64):
        raise CheckpointError(f"EAVT stores f32/f64 payloads, got {arr.dtype}")
    header = EAVT_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != EAVT_MAGIC:
        raise CheckpointError("not an EAVT blob (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank > 8:
        raise CheckpointError(f"EAVT rank {rank} out of range")
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise CheckpointError("EAVT blob truncated in dims")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims)) if rank else 1
    payload = len(blob) - dims_end
    if payload == 4 * count:
        dtype = np.dtype("<f4")
    elif payload == 8 * count:
        dtype = np.dtype("<f8")
    else:
        raise CheckpointError(
            f"EAVT payload of {payload} bytes does not match {count} f32 or f64 elements"
        )
    return np.frombuffer(blob, dtype=dtype, offset=dims_end).reshape(dims).copy()


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# netpbm images


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary PPM."""
    h, w, _ = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (H, W) array as binary PGM; floats in [0, 1] are scaled."""
    if gray.dtype != np.uint8:
        gray = np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(gray.tobytes())


def _read_pnm_header(f):
    def token():
        t = b""
        while True:
            ch = f.read(1)
            if not ch:
                raise CheckpointError("truncated netpbm header")
            if ch == b"#":
                f.readline()
                continue
            if ch.isspace():
                if t:
                    return t
                continue
            t += ch

    magic = token()
    w, h, maxval = int(token()), int(token()), int(token())
    return magic, w, h, maxval


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic != b"P6":
            raise CheckpointError(f"expected P6 ppm, got {magic!r}")
        raw = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return (raw.reshape(h, w, 3).astype(np.float32)) / maxval


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic != b"P5":
            raise CheckpointError(f"expected P5 pgm, got {magic!r}")
        raw = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return raw.reshape(h, w)
