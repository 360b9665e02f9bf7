"""Video and image stream parsing (luma only).

YUV4MPEG2 input covers the C420 family, C444, and Cmono; only the luma plane
is retained. Parse failures carry the byte offset of the fault. PGM (P5,
8-bit) is used for decoded frame output.
"""

from __future__ import annotations

import os
import re

import numpy as np

from .errors import ParseError
from .sensing import FramePlane

_C420_FAMILY = {b"420", b"420jpeg", b"420paldv", b"420mpeg2"}


def _chroma_bytes(colourspace: bytes, width: int, height: int, offset: int) -> int:
    if colourspace in _C420_FAMILY:
        if width % 2 or height % 2:
            raise ParseError(
                f"C{colourspace.decode()} needs even dimensions, got {width}x{height}", offset
            )
        return (width // 2) * (height // 2) * 2
    if colourspace == b"444":
        return 2 * width * height
    if colourspace == b"mono":
        return 0
    raise ParseError(f"unsupported colourspace C{colourspace.decode(errors='replace')}", offset)


def parse_y4m(blob: bytes) -> tuple[list[FramePlane], dict]:
    """Decode a YUV4MPEG2 byte stream into luma planes plus stream metadata."""
    if not blob.startswith(b"YUV4MPEG2"):
        raise ParseError("missing YUV4MPEG2 signature", 0)
    nl = blob.find(b"\n")
    if nl < 0:
        raise ParseError("unterminated stream header", len(blob))
    width = height = None
    colourspace = b"420jpeg"
    meta: dict = {}
    pos = len(b"YUV4MPEG2")
    for token in blob[len(b"YUV4MPEG2") : nl].split(b" "):
        token_at = pos
        pos += len(token) + 1  # token plus its separating space
        if not token:
            continue
        key, val = token[:1], token[1:]
        if key == b"W":
            if not val.isdigit():
                raise ParseError(f"bad width token {token.decode(errors='replace')}", token_at)
            width = int(val)
        elif key == b"H":
            if not val.isdigit():
                raise ParseError(f"bad height token {token.decode(errors='replace')}", token_at)
            height = int(val)
        elif key == b"C":
            colourspace = val
        elif key in (b"F", b"I", b"A", b"X"):
            meta[key.decode()] = val.decode(errors="replace")
        else:
            raise ParseError(f"unknown header token {token.decode(errors='replace')}", token_at)
    if not width or not height:
        raise ParseError("stream header lacks W or H", 0)
    chroma = _chroma_bytes(colourspace, width, height, 0)
    frame_bytes = width * height + chroma
    meta.update(width=width, height=height, colourspace=colourspace.decode())

    frames: list[FramePlane] = []
    off = nl + 1
    index = 0
    while off < len(blob):
        if not blob.startswith(b"FRAME", off):
            raise ParseError("expected FRAME marker", off)
        fnl = blob.find(b"\n", off)
        if fnl < 0:
            raise ParseError("unterminated FRAME header", off)
        params = blob[off + 5 : fnl]
        if params and not params.startswith(b" "):
            raise ParseError("malformed FRAME parameters", off + 5)
        start = fnl + 1
        if start + frame_bytes > len(blob):
            raise ParseError("truncated frame payload", start)
        luma = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=start)
        frames.append(FramePlane(luma.reshape(height, width).astype(np.float64), index))
        index += 1
        off = start + frame_bytes
    return frames, meta


def read_y4m(path: str) -> tuple[list[FramePlane], dict]:
    with open(path, "rb") as fh:
        return parse_y4m(fh.read())


def write_y4m(path: str, planes: list[FramePlane], rate: str = "25:1") -> None:
    """Write luma planes as a Cmono stream (values rounded and clamped)."""
    if not planes:
        raise ParseError("refusing to write an empty stream")
    h, w = planes[0].values.shape
    with open(path, "wb") as fh:
        fh.write(f"YUV4MPEG2 W{w} H{h} F{rate} Ip A1:1 Cmono\n".encode())
        for plane in planes:
            if plane.values.shape != (h, w):
                raise ParseError(
                    f"frame {plane.frame_index} is {plane.values.shape}, stream is {h}x{w}"
                )
            fh.write(b"FRAME\n")
            fh.write(np.clip(np.round(plane.values), 0, 255).astype(np.uint8).tobytes())


def read_pgm(path: str) -> FramePlane:
    """Read a binary (P5) PGM with maxval up to 255."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise ParseError("not a binary PGM (P5)", 0)
    # header: magic, width, height, maxval separated by whitespace/comments
    tokens = []
    off = 2
    while len(tokens) < 3:
        while off < len(blob) and blob[off : off + 1].isspace():
            off += 1
        if off < len(blob) and blob[off : off + 1] == b"#":
            eol = blob.find(b"\n", off)
            if eol < 0:
                raise ParseError("unterminated comment", off)
            off = eol + 1
            continue
        start = off
        while off < len(blob) and not blob[off : off + 1].isspace():
            off += 1
        if start == off:
            raise ParseError("truncated PGM header", start)
        tokens.append(blob[start:off])
    if not all(re.fullmatch(rb"\d+", t) for t in tokens):
        raise ParseError("non-numeric PGM header field", 2)
    width, height, maxval = (int(t) for t in tokens)
    if maxval <= 0 or maxval > 255:
        raise ParseError(f"unsupported maxval {maxval}", 2)
    off += 1  # single whitespace after maxval
    if off + width * height > len(blob):
        raise ParseError("truncated PGM payload", off)
    data = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=off)
    return FramePlane(data.reshape(height, width).astype(np.float64))


def write_pgm(path: str, plane: FramePlane) -> None:
    h, w = plane.values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.clip(np.round(plane.values), 0, 255).astype(np.uint8).tobytes())


def load_frames(path: str) -> list[FramePlane]:
    """Read frames from a .y4m file or a directory of .pgm files."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".pgm"))
        if not names:
            raise ParseError(f"no .pgm frames found in {path}")
        planes = []
        for i, name in enumerate(names):
            plane = read_pgm(os.path.join(path, name))
            planes.append(FramePlane(plane.values, i))
        return planes
    frames, _ = read_y4m(path)
    return frames
