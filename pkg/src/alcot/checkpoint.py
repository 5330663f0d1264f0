"""Versioned binary checkpoint container.

Layout, all integers little-endian::

    b"ALCK" | version u32 | header_len u32 | header (UTF-8 key-value text)
    n_blobs u32 | per blob:
        name_len u16 | name | dtype u8 | ndim u8 | dims u32 x ndim
        | nbytes u64 | raw little-endian data

The header is the INI text written by :func:`alcot.config.dumps`, so every
ModelConfig field travels with the weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from alcot import config as cfgmod
from alcot.config import AdaptiveLossConfig, ModelConfig, TrainConfig

MAGIC = b"ALCK"
VERSION = 1

_DTYPES = {
    0: ("<f4", torch.float32),
    1: ("<f8", torch.float64),
    2: ("<i8", torch.int64),
    3: ("|b1", torch.bool),
}
_CODES = {tdt: code for code, (_, tdt) in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    loss_config: AdaptiveLossConfig
    train_config: Optional[TrainConfig]
    meta: dict[str, str]
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}

    def build_model(self):
        from alcot.model import LatentLM

        model = LatentLM(self.model_config)
        model.load_state_dict(self.model_state())
        model.eval()
        return model


def save(path: str | Path, model_config: ModelConfig, tensors: dict[str, torch.Tensor],
         loss_config: Optional[AdaptiveLossConfig] = None, train_config: Optional[TrainConfig] = None,
         meta: Optional[dict] = None) -> None:
    if train_config is not None:
        header = cfgmod.dumps(train_config, model_config, loss_config or train_config.loss, meta)
    else:
        header = cfgmod.dumps(None, model_config, loss_config or AdaptiveLossConfig(), meta)
    head = header.encode("utf-8")
    out = bytearray()
    out += MAGIC + struct.pack("<II", VERSION, len(head)) + head
    out += struct.pack("<I", len(tensors))
    for name, tensor in tensors.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        code = _CODES[t.dtype]
        data = t.numpy().astype(_DTYPES[code][0], copy=False).tobytes()
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", code, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        out += struct.pack("<Q", len(data)) + data
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def save_model(path: str | Path, model, loss_config: Optional[AdaptiveLossConfig] = None,
               train_config: Optional[TrainConfig] = None, extra: Optional[dict] = None,
               meta: Optional[dict] = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra or {})
    save(path, model.cfg, tensors, loss_config, train_config, meta)


def load(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
        version, head_len = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 12
        header = raw[off: off + head_len].decode("utf-8")
        off += head_len
        model_cfg, loss_cfg, train_cfg, meta = cfgmod.loads(header)
        (n_blobs,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors: dict[str, torch.Tensor] = {}
        for _ in range(n_blobs):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off: off + name_len].decode("utf-8")
            off += name_len
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", raw, off)
            off += 8
            np_dt, _ = _DTYPES[code]
            arr = np.frombuffer(raw, dtype=np_dt, count=int(np.prod(shape, dtype=np.int64)), offset=off)
            off += nbytes
            tensors[name] = torch.from_numpy(arr.copy().reshape(shape))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(model_cfg, loss_cfg, train_cfg, meta, tensors)


def load_model(path: str | Path):
    return load(path).build_model()
