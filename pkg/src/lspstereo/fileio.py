"""PFM (grayscale float) and binary PPM/PGM readers and writers."""

from __future__ import annotations

import re

import numpy as np


class FormatError(ValueError):
    pass


def _read_header_tokens(buf: bytes, count: int) -> tuple[list, int]:
    """Return ``count`` whitespace-separated header tokens (``#`` comments skipped) and the payload offset."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        tokens.append(buf[start:pos].decode("ascii"))
    # exactly one whitespace byte separates the header from the payload
    if pos >= n and count:
        return tokens, pos
    return tokens, pos + 1


# ---------------------------------------------------------------------------
# PFM


def encode_pfm(data: np.ndarray) -> bytes:
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise FormatError(f"PFM writer expects an H×W map, got shape {arr.shape}")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes()


def decode_pfm(buf: bytes) -> np.ndarray:
    lines = buf.split(b"\n", 3)
    if len(lines) < 4:
        raise FormatError("truncated PFM header")
    magic = lines[0].strip()
    if magic != b"Pf":
        if magic == b"PF":
            raise FormatError("colour PFM ('PF') is not supported; expected grayscale 'Pf'")
        raise FormatError(f"bad PFM magic {magic[:8]!r}")
    dims = lines[1].split()
    if len(dims) != 2:
        raise FormatError(f"bad PFM dimension line {lines[1][:40]!r}")
    w, h = int(dims[0]), int(dims[1])
    try:
        scale = float(lines[2].strip())
    except ValueError as exc:
        raise FormatError(f"bad PFM scale line {lines[2][:40]!r}") from exc
    if scale == 0:
        raise FormatError("PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    payload = lines[3]
    need = 4 * w * h
    if len(payload) < need:
        raise FormatError(f"truncated PFM payload: expected {need} bytes, found {len(payload)}")
    arr = np.frombuffer(payload[:need], dtype=dtype).reshape(h, w)
    return arr[::-1].astype(np.float32)


def write_pfm(path, data: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pfm(data))


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pfm(fh.read())


# ---------------------------------------------------------------------------
# PPM / PGM


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 0..255 with round-half-up."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_pnm(image: np.ndarray) -> bytes:
    """3×H×W → P6, H×W → P5. Values in [0, 1]; uint8 arrays are written as-is."""
    arr = np.asarray(image)
    raw = arr if arr.dtype == np.uint8 else to_bytes(arr)
    if raw.ndim == 3:
        if raw.shape[0] != 3:
            raise FormatError(f"colour image must be 3×H×W, got {raw.shape}")
        _, h, w = raw.shape
        return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(raw.transpose(1, 2, 0)).tobytes()
    if raw.ndim == 2:
        h, w = raw.shape
        return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(raw).tobytes()
    raise FormatError(f"cannot encode array of shape {arr.shape} as PNM")


def decode_pnm(buf: bytes, as_bytes: bool = False) -> np.ndarray:
    """Decode binary P6/P5. Returns 3×H×W or H×W floats in [0, 1] (or raw bytes)."""
    magic = buf[:2]
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"unsupported PNM magic {magic!r}; expected binary P6 or P5")
    (w, h, maxval), offset = _parse_dims(buf)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255 is supported")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise FormatError(f"truncated PNM payload: expected {need} bytes, found {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8)
    raw = raw.reshape(h, w, 3).transpose(2, 0, 1) if channels == 3 else raw.reshape(h, w)
    raw = np.ascontiguousarray(raw)
    return raw if as_bytes else raw.astype(np.float32) / np.float32(255.0)


def _parse_dims(buf: bytes) -> tuple:
    tokens, offset = _read_header_tokens(buf, 4)
    if not all(re.fullmatch(r"\d+", t) for t in tokens[1:]):
        raise FormatError(f"bad PNM header {tokens!r}")
    return tuple(int(t) for t in tokens[1:]), offset


def write_pnm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(image))


def read_pnm(path, as_bytes: bool = False) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read(), as_bytes=as_bytes)
