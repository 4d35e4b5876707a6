"""Binary checkpoint container; layout documented in FORMATS.md."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DST, ModelConfig
from .tensor import Parameter

MAGIC = b"DSTCKPT\x00"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(ValueError):
    pass


def config_to_text(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def parse_key_values(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    stage: str = "pretrain"
    update: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: DST, stage: str, update: int = 0) -> "Checkpoint":
        return cls(model.config, {k: p.data.copy() for k, p in model.params.items()}, stage, update)

    def to_model(self, config: ModelConfig | None = None) -> DST:
        """Build a model, checking names and shapes against ``config``.

        ``config`` may differ from the stored one in non-shape fields
        (thresholds, allocation mode).
        """
        config = config or self.config
        ref = DST(config)
        if set(ref.params) != set(self.params):
            missing = set(ref.params) ^ set(self.params)
            raise CheckpointError(f"parameter names disagree: {sorted(missing)[:5]}")
        params = {}
        for name, p in ref.params.items():
            arr = self.params[name]
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
            params[name] = Parameter(arr.astype(p.data.dtype, copy=True), name=name)
        return DST(config, params)

    # -- serialisation --------------------------------------------------------------
    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", VERSION)]
        stage = self.stage.encode("utf-8")
        parts.append(struct.pack("<I", len(stage)) + stage)
        parts.append(struct.pack("<Q", self.update))
        cfg = config_to_text(self.config.to_dict()).encode("utf-8")
        parts.append(struct.pack("<I", len(cfg)) + cfg)
        parts.append(struct.pack("<I", len(self.params)))
        for name, arr in self.params.items():
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            code = _CODES[arr.dtype]
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
            parts.append(struct.pack("<BI", code, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("truncated checkpoint")
            out = view[pos:pos + n]
            pos += n
            return out

        def unpack(fmt):
            return struct.unpack(fmt, take(struct.calcsize(fmt)))

        if bytes(take(len(MAGIC))) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = unpack("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n,) = unpack("<I")
        stage = bytes(take(n)).decode("utf-8")
        (update,) = unpack("<Q")
        (n,) = unpack("<I")
        config = ModelConfig.from_dict(parse_key_values(bytes(take(n)).decode("utf-8")))
        (count,) = unpack("<I")
        params = {}
        for _ in range(count):
            (n,) = unpack("<I")
            name = bytes(take(n)).decode("utf-8")
            code, rank = unpack("<BI")
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            shape = unpack(f"<{rank}Q")
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            params[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        if pos != len(view):
            raise CheckpointError("trailing bytes after last tensor")
        return cls(config, params, stage, update)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
