"""Frozen upstream feature providers and the learnable weighted layer sum.

Two realizations of the (L+1) x T' x D feature stack:

* :class:`ToyUpstream` -- a deterministic random network (strided conv
  downsampler + frozen mixing layers) standing in for a pretrained model.
* :class:`FilesUpstream` -- reads precomputed stacks from LFSC containers,
  allowing real model dumps to be ingested.

Both produce frames aligned with the STFT frontend (T' = ceil(len / 320),
centered framing).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CorruptFileError, FormatError, LengthError, ShapeError
from .frontend import FFT_SIZE, HOP, frame_count

LFSC_MAGIC = b"LFSC"
LFSC_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")  # magic, version, L+1, T', D, hop, source_length


@dataclass
class FeatureStack:
    """(L+1) x T' x D layer-wise features of one utterance."""

    layers: torch.Tensor
    source_length: int
    frame_hop: int = HOP

    def __post_init__(self):
        if self.layers.dim() != 3:
            raise ShapeError(f"feature stack must be 3-D, got {self.layers.dim()}-D")
        if self.layers.shape[0] < 2:
            raise ShapeError("feature stack needs layer 0 plus at least one layer (L >= 1)")
        if not torch.all(torch.isfinite(self.layers)):
            raise ShapeError("feature stack contains non-finite entries")

    @property
    def num_layers(self) -> int:
        """L: number of mixing layers on top of layer 0."""
        return self.layers.shape[0] - 1

    @property
    def num_frames(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]


class LayerWeights(nn.Module):
    """Learnable logits over the L+1 layers; softmax gives convex weights."""

    def __init__(self, num_layers_plus_1: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(num_layers_plus_1))

    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)

    def forward(self, layers: torch.Tensor) -> torch.Tensor:
        return weighted_layer_sum(layers, self.logits)


def weighted_layer_sum(stack, logits) -> torch.Tensor:
    """Softmax-weighted convex combination over the layer axis.

    `stack` may be a FeatureStack or a (..., L+1, T, D) tensor; `logits` a
    LayerWeights module or a 1-D tensor of length L+1.
    """
    layers = stack.layers if isinstance(stack, FeatureStack) else stack
    if isinstance(logits, LayerWeights):
        logits = logits.logits
    if logits.dim() != 1 or logits.shape[0] != layers.shape[-3]:
        raise ShapeError(
            f"got {logits.shape[0] if logits.dim() == 1 else logits.shape} logits "
            f"for {layers.shape[-3]} layers")
    w = torch.softmax(logits.to(layers.dtype), dim=0)
    return torch.einsum("l,...ltd->...td", w, layers)


class ToyUpstream:
    """Deterministic frozen feature extractor.

    Layer 0: centered strided framing (total stride 320) through a fixed
    random linear map to D channels. Each of the L mixing layers applies a
    frame-local linear map, a depthwise temporal context convolution
    (kernel 5), and tanh. Every layer's output is standardized per channel
    over the utterance. All parameters come from `seed` and never train.
    """

    CONTEXT = 5

    def __init__(self, seed: int = 0, num_layers: int = 4, dim: int = 192):
        if num_layers < 1:
            raise ShapeError("toy upstream needs at least one mixing layer")
        self.seed = int(seed)
        self.num_layers = int(num_layers)
        self.dim = int(dim)
        rng = np.random.default_rng([self.seed & 0x7FFFFFFF, 0xFEA7])
        self._w0 = rng.standard_normal((FFT_SIZE, dim)) / np.sqrt(FFT_SIZE)
        self._mix = [rng.standard_normal((dim, dim)) / np.sqrt(dim)
                     for _ in range(num_layers)]
        self._ctx = [rng.standard_normal((dim, self.CONTEXT)) / np.sqrt(self.CONTEXT)
                     for _ in range(num_layers)]
        self._cache: dict[torch.dtype, list[torch.Tensor]] = {}

    def _tensors(self, dtype, device):
        key = (dtype, device)
        if key not in self._cache:
            pack = [torch.as_tensor(self._w0, dtype=dtype, device=device)]
            pack += [torch.as_tensor(m, dtype=dtype, device=device) for m in self._mix]
            pack += [torch.as_tensor(c, dtype=dtype, device=device) for c in self._ctx]
            self._cache[key] = pack
        return self._cache[key]

    def checksum(self) -> str:
        """Digest of all frozen parameters; must not change across training."""
        h = hashlib.sha256()
        h.update(self._w0.tobytes())
        for m in self._mix:
            h.update(m.tobytes())
        for c in self._ctx:
            h.update(c.tobytes())
        return h.hexdigest()

    @staticmethod
    def _standardize(x: torch.Tensor) -> torch.Tensor:
        # Per channel over the utterance's frames; eps guards T' == 1.
        mean = x.mean(dim=-2, keepdim=True)
        std = x.std(dim=-2, keepdim=True, unbiased=False)
        return (x - mean) / (std + 1e-8)

    def __call__(self, wave, dtype=torch.float32) -> FeatureStack | list[FeatureStack]:
        """Compute the frozen stack of one (L,) signal or a (B, L) batch.

        Returns a FeatureStack for a single signal, a list for a batch.
        """
        if isinstance(wave, np.ndarray):
            wave = torch.from_numpy(np.ascontiguousarray(wave))
        single = wave.dim() == 1
        x = wave[None] if single else wave
        length = x.shape[-1]
        if length < FFT_SIZE:
            raise LengthError(f"signal length {length} < window size {FFT_SIZE}")
        x = x.to(dtype)
        params = self._tensors(dtype, x.device)
        w0, mix, ctx = params[0], params[1:1 + self.num_layers], params[1 + self.num_layers:]

        with torch.no_grad():
            t_frames = frame_count(length)
            pad = FFT_SIZE // 2
            padded = F.pad(x[:, None], (pad, pad), mode="reflect")[:, 0]
            frames = padded.unfold(-1, FFT_SIZE, HOP)[:, :t_frames]  # (B, T, 1024)
            layers = [self._standardize(frames @ w0)]
            h = layers[0]
            for a, c in zip(mix, ctx):
                u = h @ a
                # depthwise temporal context conv, same-padded
                u = F.conv1d(u.transpose(1, 2), c[:, None, :],
                             padding=self.CONTEXT // 2, groups=self.dim).transpose(1, 2)
                h = self._standardize(torch.tanh(u))
                layers.append(h)
            stack = torch.stack(layers, dim=1)  # (B, L+1, T, D)

        if single:
            return FeatureStack(layers=stack[0], source_length=length)
        return [FeatureStack(layers=stack[b], source_length=length) for b in range(x.shape[0])]

    def batch_layers(self, wave: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        """(B, L) waveforms -> (B, L+1, T, D) tensor for the training loop."""
        single = wave.dim() == 1
        out = self(wave, dtype=dtype)
        if single:
            return out.layers[None]
        return torch.stack([fs.layers for fs in out], dim=0)


def store_features(path, stack: FeatureStack) -> None:
    """Write a FeatureStack to the LFSC container (float32, little-endian,
    layer-major / frame-major / channel-minor)."""
    path = Path(path)
    layers = stack.layers.detach().cpu().numpy().astype("<f4", copy=False)
    n_layers, t_frames, dim = layers.shape
    header = _HEADER.pack(LFSC_MAGIC, LFSC_VERSION, n_layers, t_frames, dim,
                          stack.frame_hop, stack.source_length)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(layers).tobytes())


def load_features(path) -> FeatureStack:
    """Read an LFSC container; bit-exact inverse of :func:`store_features`."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CorruptFileError(f"{path}: shorter than the LFSC header")
    magic, version, n_layers, t_frames, dim, hop, source_length = _HEADER.unpack_from(raw)
    if magic != LFSC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {LFSC_MAGIC!r}")
    if version != LFSC_VERSION:
        raise FormatError(f"{path}: unsupported LFSC version {version}")
    expected = n_layers * t_frames * dim * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise CorruptFileError(
            f"{path}: header declares {expected} payload bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(n_layers, t_frames, dim)
    return FeatureStack(layers=torch.from_numpy(values.copy()),
                        source_length=int(source_length), frame_hop=int(hop))


class FilesUpstream:
    """Feature provider backed by per-utterance LFSC dumps.

    Files are addressed as ``<id>__<role>.lfsc`` (role: mixture/enrollment).
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FormatError(f"feature directory {self.directory} does not exist")

    def path_for(self, sample_id: str, role: str) -> Path:
        return self.directory / f"{sample_id}__{role}.lfsc"

    def load(self, sample_id: str, role: str) -> FeatureStack:
        p = self.path_for(sample_id, role)
        if not p.is_file():
            raise FormatError(f"missing feature dump {p}")
        return load_features(p)
