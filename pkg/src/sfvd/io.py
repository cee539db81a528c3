"""Bit-exact file formats: ``.fvd`` video containers and model checkpoints.

.fvd layout (little-endian)::

    b"FVD1" | u16 version | u32 N | u32 H | u32 W
    | N*H*W float32 frames | N*H*W u8 masks | N u8 annotated flags | u32 CRC32

Checkpoint layout (little-endian)::

    b"SFVD" | u32 header length | JSON header | float32 parameter blob | u32 CRC32

Both CRCs cover every preceding byte. Writes go to a temporary file that is
renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .nets import blob_size, load_blob, to_blob

FVD_MAGIC = b"FVD1"
FVD_VERSION = 1
CKPT_MAGIC = b"SFVD"
CKPT_VERSION = 1
_FVD_HEADER = struct.Struct("<4sHIII")


class FormatError(Exception):
    code = 10


class BadMagicError(FormatError):
    code = 11


class UnsupportedVersionError(FormatError):
    code = 12


class SizeMismatchError(FormatError):
    code = 13


class ChecksumError(FormatError):
    code = 14


class ValueRangeError(FormatError):
    code = 15


def atomic_write(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _crc(data):
    return struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)


def encode_fvd(video) -> bytes:
    frames = np.ascontiguousarray(video.frames, dtype="<f4")
    masks = np.asarray(video.masks)
    flags = np.asarray(video.annotated)
    if frames.ndim != 3 or masks.shape != frames.shape or flags.shape != (frames.shape[0],):
        raise SizeMismatchError("frames, masks and flags disagree in shape")
    if not np.all(np.isfinite(frames)) or frames.min(initial=0) < -1 or frames.max(initial=0) > 1:
        raise ValueRangeError("frame values must lie in [-1, 1]")
    if not np.isin(masks, (0, 1)).all():
        raise ValueRangeError("mask values must be 0 or 1")
    N, H, W = frames.shape
    body = (_FVD_HEADER.pack(FVD_MAGIC, FVD_VERSION, N, H, W) + frames.tobytes()
            + masks.astype(np.uint8).tobytes() + flags.astype(np.uint8).tobytes())
    return body + _crc(body)


def decode_fvd(data: bytes):
    from .synth import LabeledVideo

    if len(data) < _FVD_HEADER.size:
        raise SizeMismatchError("file shorter than the header")
    magic, version, N, H, W = _FVD_HEADER.unpack_from(data)
    if magic != FVD_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FVD_VERSION:
        raise UnsupportedVersionError(f"unsupported .fvd version {version}")
    n = N * H * W
    expected = _FVD_HEADER.size + 4 * n + n + N + 4
    if len(data) != expected:
        raise SizeMismatchError(f"expected {expected} bytes, found {len(data)}")
    if _crc(data[:-4]) != data[-4:]:
        raise ChecksumError("CRC32 mismatch")
    off = _FVD_HEADER.size
    frames = np.frombuffer(data, "<f4", n, off).reshape(N, H, W).astype(np.float32)
    masks = np.frombuffer(data, np.uint8, n, off + 4 * n).reshape(N, H, W).copy()
    flags = np.frombuffer(data, np.uint8, N, off + 5 * n).copy()
    if not np.isin(masks, (0, 1)).all() or not np.isin(flags, (0, 1)).all():
        raise ValueRangeError("mask or flag bytes outside {0, 1}")
    if frames.size and (not np.all(np.isfinite(frames)) or frames.min() < -1 or frames.max() > 1):
        raise ValueRangeError("frame values outside [-1, 1]")
    return LabeledVideo(frames, masks, flags.astype(bool))


def write_fvd(path, video):
    atomic_write(path, encode_fvd(video))


def read_fvd(path):
    with open(path, "rb") as fh:
        return decode_fvd(fh.read())


# -- checkpoints --------------------------------------------------------------------------

def encode_ckpt(model, extra=None) -> bytes:
    header = dict(model.header())
    header["format_version"] = CKPT_VERSION
    header["n_params"] = blob_size(model)
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + to_blob(model).tobytes()
    return body + _crc(body)


def _build_model(header):
    from .denoiser import DenoiserModel
    from .schedule import schedule_from_description
    from .segmenter import SegmenterModel

    widths = tuple(header["arch"]["widths"])
    if header["role"] == "segmenter":
        sched = schedule_from_description(header["schedule"]) if header.get("schedule") else None
        m = SegmenterModel(widths, header["seed"], header["noise_trained"], sched)
        m.steps_trained = header.get("steps_trained", 0)
        return m
    return DenoiserModel(header["role"], schedule_from_description(header["schedule"]), widths, header["seed"])


def decode_ckpt(data: bytes):
    if len(data) < 12:
        raise SizeMismatchError("file shorter than the fixed header")
    if data[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    (hlen,) = struct.unpack_from("<I", data, 4)
    if 8 + hlen + 4 > len(data):
        raise SizeMismatchError("header length exceeds file size")
    try:
        header = json.loads(data[8:8 + hlen])
    except ValueError as e:
        raise FormatError(f"unreadable header: {e}") from None
    if header.get("format_version") != CKPT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {header.get('format_version')}")
    blob_bytes = len(data) - 8 - hlen - 4
    if blob_bytes != 4 * header.get("n_params", -1):
        raise SizeMismatchError(f"parameter blob is {blob_bytes} bytes, header declares {header.get('n_params')} floats")
    if _crc(data[:-4]) != data[-4:]:
        raise ChecksumError("CRC32 mismatch")
    model = _build_model(header)
    if blob_size(model) != header["n_params"]:
        raise SizeMismatchError("architecture does not match the declared parameter count")
    load_blob(model, np.frombuffer(data, "<f4", header["n_params"], 8 + hlen))
    model.eval()
    return model, header


def write_ckpt(path, model, extra=None):
    atomic_write(path, encode_ckpt(model, extra))


def read_ckpt(path):
    """Return the reconstructed model (header available as ``model.ckpt_header``)."""
    with open(path, "rb") as fh:
        model, header = decode_ckpt(fh.read())
    model.ckpt_header = header
    return model
