"""Checkpoint directory layout and the TNSR tensor container.

A checkpoint is a directory holding ``meta.json`` (config, epoch, losses)
and ``params.tnsr``: little-endian, magic "TNSR", version u32=1, tensor
count u32, then per tensor {name length u16, UTF-8 name, rank u8, dims u32
each, float32 payload}. Reloading reproduces evaluation-mode forwards
bit-for-bit because parameters are stored in their native float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError, ConfigurationError, CorruptFileError, FormatError
from ..extractor import TSEModel
from ..upstream import FilesUpstream, ToyUpstream
from .config import RunConfig

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1


def write_tensors(path, tensors: dict) -> None:
    """Serialize an ordered name->array mapping into a TNSR file."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(TNSR_MAGIC)
        fh.write(struct.pack("<II", TNSR_VERSION, len(tensors)))
        for name, array in tensors.items():
            data = np.ascontiguousarray(array, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def read_tensors(path) -> dict:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise CorruptFileError(f"{path}: shorter than the TNSR header")
    if raw[:4] != TNSR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {TNSR_MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != TNSR_VERSION:
        raise FormatError(f"{path}: unsupported TNSR version {version}")
    tensors = {}
    offset = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = raw[offset:offset + 4 * size]
            if len(payload) != 4 * size:
                raise CorruptFileError(f"{path}: truncated payload for tensor '{name}'")
            offset += 4 * size
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    except struct.error as exc:
        raise CorruptFileError(f"{path}: truncated tensor table ({exc})") from exc
    if offset != len(raw):
        raise CorruptFileError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors


@dataclass
class Checkpoint:
    config: RunConfig
    epoch: int
    params: dict  # name -> float32 ndarray
    best_valid_loss: float

    @property
    def has_spk_enc_layer_weights(self) -> bool:
        return "spk_enc.feat_weights.logits" in self.params

    @property
    def has_extractor_layer_weights(self) -> bool:
        return "extractor_weights.logits" in self.params


def make_upstream(config: RunConfig):
    if not config.needs_upstream:
        return None
    up = config.upstream
    if up.kind == "toy":
        return ToyUpstream(seed=up.seed, num_layers=up.num_layers, dim=up.dim)
    return FilesUpstream(up.dir)


def build_model(config: RunConfig, params: dict | None = None) -> TSEModel:
    """Instantiate the TSE model a config describes, optionally loading params."""
    config.validate()
    model = TSEModel(
        encoder_kind=config.encoder_kind,
        mask_kind=config.mask_kind,
        fusion_kind=config.fusion_kind,
        spk_enc_kind=config.spk_enc_kind,
        extractor_kind=config.extractor_kind,
        upstream=make_upstream(config),
        num_upstream_layers=config.upstream.num_layers,
        feat_dim=config.upstream.dim,
        hidden_dim=config.hidden_dim,
        embed_dim=config.embed_dim,
        mhfa_heads=config.mhfa_heads,
        mhfa_compress=config.mhfa_compress,
        frontend_init=config.frontend_init,
    )
    if params is not None:
        state = {}
        expected = model.state_dict()
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise CheckpointError(
                f"checkpoint parameters do not match the model: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for name, array in params.items():
            if tuple(expected[name].shape) != array.shape:
                raise CheckpointError(
                    f"tensor '{name}' has shape {array.shape}, model expects "
                    f"{tuple(expected[name].shape)}")
            state[name] = torch.from_numpy(np.ascontiguousarray(array))
        model.load_state_dict(state)
    return model


def save_checkpoint(out_dir, config: RunConfig, model: TSEModel, epoch: int,
                    best_valid_loss: float) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = {name: tensor.detach().cpu().numpy()
               for name, tensor in model.state_dict().items()}
    write_tensors(out_dir / "params.tnsr", tensors)
    meta = {
        "config": config.to_dict(),
        "epoch": int(epoch),
        "best_valid_loss": float(best_valid_loss),
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return out_dir


def load_checkpoint(ckpt_dir) -> Checkpoint:
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "meta.json"
    params_path = ckpt_dir / "params.tnsr"
    if not meta_path.is_file() or not params_path.is_file():
        raise CheckpointError(f"{ckpt_dir} is not a checkpoint directory "
                              "(needs meta.json and params.tnsr)")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in ("config", "epoch", "best_valid_loss"):
        if key not in meta:
            raise CheckpointError(f"{meta_path}: missing '{key}'")
    try:
        config = RunConfig.from_dict(meta["config"])
    except ConfigurationError as exc:
        raise CheckpointError(f"{meta_path}: bad embedded config ({exc})") from exc
    return Checkpoint(config=config, epoch=int(meta["epoch"]),
                      params=read_tensors(params_path),
                      best_valid_loss=float(meta["best_valid_loss"]))


def model_from_checkpoint(ckpt: Checkpoint) -> TSEModel:
    return build_model(ckpt.config, ckpt.params)
