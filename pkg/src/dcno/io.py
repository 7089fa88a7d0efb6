"""Binary dataset containers, checkpoints and key=value run configuration.

Dataset layout (little-endian)::

    bytes 0-7   magic "DCNODS01"
    u32 x 6     version, samples, H, W, cin, cout
    u8          scalar code (0 = float32, 1 = float64)
    f64 x 2     Lx, Ly
    inputs      [samples][H][W][cin]
    outputs     [samples][H][W][cout]

Checkpoint layout::

    magic "DCNOCKPT", u32 version, u32 config length, UTF-8 config text,
    u64 parameter count, f64 parameters, u8 optimizer flag,
    [u64 step, f64 first moments, f64 second moments]
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import ParameterStore
from .layers import DCNO, ModelConfig, Normalizer, init_parameters

DATASET_MAGIC = b"DCNODS01"
CHECKPOINT_MAGIC = b"DCNOCKPT"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

_SCALARS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<8s6IB2d")


class FormatError(ValueError):
    """Base class for malformed dataset or checkpoint files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class DatasetContainer:
    inputs: np.ndarray   # (n, H, W, cin)
    outputs: np.ndarray  # (n, H, W, cout)
    domain_length: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.outputs.ndim != 4:
            raise ValueError("dataset arrays must be (samples, H, W, channels)")
        if self.inputs.shape[:3] != self.outputs.shape[:3]:
            raise ValueError(f"input/output shapes disagree: {self.inputs.shape} vs {self.outputs.shape}")
        if self.inputs.dtype != self.outputs.dtype:
            raise ValueError("inputs and outputs must share a scalar type")
        self.domain_length = tuple(float(v) for v in self.domain_length)

    @property
    def samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.inputs.shape[1:3]

    @property
    def cin(self) -> int:
        return self.inputs.shape[3]

    @property
    def cout(self) -> int:
        return self.outputs.shape[3]

    def subset(self, start: int, stop: int) -> "DatasetContainer":
        return DatasetContainer(self.inputs[start:stop], self.outputs[start:stop], self.domain_length)

    def payload_bytes(self) -> int:
        h, w = self.resolution
        return self.samples * h * w * (self.cin + self.cout) * self.inputs.dtype.itemsize


def _scalar_code(dtype: np.dtype) -> int:
    for code, dt in _SCALARS.items():
        if np.dtype(dtype) == dt.newbyteorder("="):
            return code
    raise ValueError(f"unsupported scalar type {dtype}")


def encode_dataset(c: DatasetContainer) -> bytes:
    code = _scalar_code(c.inputs.dtype)
    dt = _SCALARS[code]
    h, w = c.resolution
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, c.samples, h, w, c.cin, c.cout, code,
                          *c.domain_length)
    return header + c.inputs.astype(dt).tobytes() + c.outputs.astype(dt).tobytes()


def decode_dataset(blob: bytes) -> DatasetContainer:
    if len(blob) < 8 or blob[:8] != DATASET_MAGIC:
        raise BadMagicError(f"bad magic: expected {DATASET_MAGIC!r}, found {bytes(blob[:8])!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"truncated payload: header needs {_HEADER.size} bytes, file has {len(blob)}")
    _, version, n, h, w, cin, cout, code, lx, ly = _HEADER.unpack_from(blob)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {DATASET_VERSION}")
    if code not in _SCALARS:
        raise FormatError(f"unknown scalar code {code}")
    dt = _SCALARS[code]
    n_in = n * h * w * cin
    n_out = n * h * w * cout
    expected = (n_in + n_out) * dt.itemsize
    actual = len(blob) - _HEADER.size
    if actual < expected:
        raise TruncatedPayloadError(f"truncated payload: expected {expected} bytes, got {actual}")
    if actual > expected:
        raise FormatError(f"trailing bytes: expected {expected} payload bytes, got {actual}")
    data = np.frombuffer(blob, dtype=dt, offset=_HEADER.size)
    inputs = data[:n_in].reshape(n, h, w, cin).astype(dt.newbyteorder("="))
    outputs = data[n_in:].reshape(n, h, w, cout).astype(dt.newbyteorder("="))
    return DatasetContainer(inputs, outputs, (lx, ly))


def write_dataset(path, container: DatasetContainer) -> None:
    _atomic_write(path, encode_dataset(container))


def read_dataset(path) -> DatasetContainer:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


def _atomic_write(path, blob: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# key=value configuration text
# ---------------------------------------------------------------------------

def parse_config_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_config_text(values: Dict[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def read_config_file(path) -> Dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: ParameterStore
    epoch: int = 0
    normalizer: Optional[Normalizer] = None
    optimizer: Optional[Tuple[int, np.ndarray, np.ndarray]] = None  # (step, m, v)
    extra: Dict[str, str] = field(default_factory=dict)

    def model(self) -> DCNO:
        return DCNO(self.cfg, self.params, self.normalizer)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    meta: Dict[str, object] = {"config_hash": ck.cfg.digest(), "epoch": ck.epoch}
    if ck.normalizer is not None:
        meta.update(ck.normalizer.to_mapping())
    meta.update(ck.extra)
    text = (ck.cfg.to_text() + format_config_text(meta)).encode("utf-8")
    flat = ck.params.flat().astype("<f8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(text)), text,
             struct.pack("<Q", flat.size), flat.tobytes()]
    if ck.optimizer is None:
        parts.append(b"\x00")
    else:
        step, m, v = ck.optimizer
        parts += [b"\x01", struct.pack("<Q", int(step)), np.asarray(m, "<f8").tobytes(),
                  np.asarray(v, "<f8").tobytes()]
    return b"".join(parts)


def decode_checkpoint(blob: bytes, expected: Optional[ModelConfig] = None) -> Checkpoint:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic: expected {CHECKPOINT_MAGIC!r}, found {bytes(blob[:8])!r}")
    pos = 8
    try:
        version, tlen = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {CHECKPOINT_VERSION}")
        values = parse_config_text(blob[pos:pos + tlen].decode("utf-8"))
        pos += tlen
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if len(blob) < pos + 8 * count + 1:
            raise TruncatedPayloadError(f"truncated payload: expected {8 * count} parameter bytes")
        flat = np.frombuffer(blob, "<f8", count, pos).astype(float)
        pos += 8 * count
        flag = blob[pos]
        pos += 1
        optimizer = None
        if flag:
            (step,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            m = np.frombuffer(blob, "<f8", count, pos).astype(float)
            v = np.frombuffer(blob, "<f8", count, pos + 8 * count).astype(float)
            optimizer = (int(step), m, v)
    except struct.error as exc:
        raise TruncatedPayloadError(f"truncated payload: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise TruncatedPayloadError(f"truncated payload: {exc}") from exc
    cfg = ModelConfig.from_mapping(values)
    if values.get("config_hash") != cfg.digest():
        raise CheckpointMismatchError("checkpoint/config mismatch: stored hash does not match stored config")
    if expected is not None and expected.digest() != cfg.digest():
        raise CheckpointMismatchError("checkpoint/config mismatch")
    params = init_parameters(cfg, 0)
    if params.size != count:
        raise CheckpointMismatchError(
            f"checkpoint/config mismatch: {count} stored parameters, config needs {params.size}")
    params.unflatten(flat)
    reserved = set(ModelConfig.__dataclass_fields__) | {"config_hash", "epoch"}
    extra = {k: v for k, v in values.items() if k not in reserved and not k.startswith("norm.")}
    return Checkpoint(cfg, params, int(values.get("epoch", 0)), Normalizer.from_mapping(values),
                      optimizer, extra)


def save_checkpoint(path, ck: Checkpoint) -> None:
    _atomic_write(path, encode_checkpoint(ck))


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expected)
