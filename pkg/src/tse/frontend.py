"""Encoder/decoder frontends and mask application.

Two interchangeable analysis/synthesis pairs share the same frame rate:

* STFT/iSTFT: Hann window 1024, hop 320, centered framing with reflection
  padding, weighted overlap-add synthesis with window-square normalization.
* A learnable Conv1d/ConvTranspose1d filterbank (512 filters, kernel 1024,
  stride 320, ReLU features).

All torch paths are differentiable and dtype-preserving (float32 training,
float64 for gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio_io import AudioSignal
from .errors import LengthError, RangeError, ShapeError

FFT_SIZE = 1024
HOP = 320
N_BINS = FFT_SIZE // 2 + 1  # 513
N_FILTERS = 512

MASK_KINDS = ("magnitude", "complex", "encoder")


def frame_count(length: int) -> int:
    """Frames produced by centered analysis at hop 320: ceil(length / 320)."""
    return -(-int(length) // HOP)


def conv_frame_count(length: int) -> int:
    """Frames produced by the valid (uncentered) learnable encoder."""
    return (int(length) - FFT_SIZE) // HOP + 1


def _window(dtype, device=None) -> torch.Tensor:
    return torch.hann_window(FFT_SIZE, periodic=True, dtype=dtype, device=device)


def stft(wave: torch.Tensor) -> torch.Tensor:
    """Centered STFT of (..., L) waveforms -> (..., T, 513) complex frames."""
    if wave.shape[-1] < FFT_SIZE:
        raise LengthError(f"signal length {wave.shape[-1]} < window size {FFT_SIZE}")
    squeeze = wave.dim() == 1
    x = wave[None] if squeeze else wave
    batch, length = x.shape
    t_frames = frame_count(length)
    pad = FFT_SIZE // 2
    x = F.pad(x[:, None], (pad, pad), mode="reflect")[:, 0]
    frames = x.unfold(-1, FFT_SIZE, HOP)[:, :t_frames]  # (B, T, 1024)
    frames = frames * _window(wave.dtype, wave.device)
    spec = torch.fft.rfft(frames, n=FFT_SIZE, dim=-1)
    return spec[0] if squeeze else spec


def istft(spec: torch.Tensor, length: int) -> torch.Tensor:
    """Weighted overlap-add inverse of :func:`stft`, trimmed/padded to `length`."""
    if spec.shape[-1] != N_BINS:
        raise ShapeError(f"expected {N_BINS} bins, got {spec.shape[-1]}")
    squeeze = spec.dim() == 2
    z = spec[None] if squeeze else spec
    batch, t_frames, _ = z.shape
    if t_frames < 1:
        raise LengthError("spectrogram has no frames")
    if length > t_frames * HOP + FFT_SIZE:
        raise LengthError(
            f"requested length {length} exceeds {t_frames} frames * {HOP} + {FFT_SIZE}")

    win = _window(z.real.dtype, z.device)
    frames = torch.fft.irfft(z, n=FFT_SIZE, dim=-1) * win  # (B, T, 1024)
    buf_len = (t_frames - 1) * HOP + FFT_SIZE
    # fold() performs the overlap-add of frames and of the squared window.
    y = F.fold(frames.transpose(1, 2), output_size=(1, buf_len),
               kernel_size=(1, FFT_SIZE), stride=(1, HOP))[:, 0, 0]
    wsq = F.fold((win * win).expand(1, t_frames, FFT_SIZE).transpose(1, 2),
                 output_size=(1, buf_len), kernel_size=(1, FFT_SIZE), stride=(1, HOP))[:, 0, 0]
    y = y / wsq.clamp_min(torch.finfo(y.dtype).tiny)

    pad = FFT_SIZE // 2
    out = y[:, pad:pad + length]
    if out.shape[-1] < length:
        out = F.pad(out, (0, length - out.shape[-1]))
    return out[0] if squeeze else out


@dataclass
class Spectrogram:
    """T x 513 complex STFT frames at hop 320."""

    frames: torch.Tensor
    original_length: int
    hop: int = HOP

    def __post_init__(self):
        if self.frames.dim() != 2 or self.frames.shape[-1] != N_BINS:
            raise ShapeError(f"spectrogram frames must be (T, {N_BINS})")
        if not self.frames.is_complex():
            raise ShapeError("spectrogram frames must be complex")
        if not torch.all(torch.isfinite(self.frames.real)) or \
                not torch.all(torch.isfinite(self.frames.imag)):
            raise RangeError("spectrogram contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class EncodedFeatures:
    """T x 512 nonnegative learnable-filterbank features at hop 320."""

    frames: torch.Tensor
    original_length: int
    hop: int = HOP

    def __post_init__(self):
        if self.frames.dim() != 2 or self.frames.shape[-1] != N_FILTERS:
            raise ShapeError(f"encoded frames must be (T, {N_FILTERS})")
        if not torch.all(torch.isfinite(self.frames)):
            raise RangeError("encoded features contain non-finite entries")
        if torch.any(self.frames < 0):
            raise RangeError("encoded features must be nonnegative (post-ReLU)")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class MaskTensor:
    """Per-frame multiplicative mask in one of the three feature domains."""

    kind: str
    values: torch.Tensor

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ShapeError(f"unknown mask kind '{self.kind}'")
        expected = {"magnitude": N_BINS, "complex": N_BINS, "encoder": N_FILTERS}[self.kind]
        if self.values.dim() != 2 or self.values.shape[-1] != expected:
            raise ShapeError(f"{self.kind} mask must be (T, {expected})")
        if self.kind == "complex":
            if not self.values.is_complex():
                raise ShapeError("complex mask must hold complex values")
            finite = torch.isfinite(self.values.real) & torch.isfinite(self.values.imag)
        else:
            if self.values.is_complex():
                raise ShapeError(f"{self.kind} mask must hold real values")
            finite = torch.isfinite(self.values)
            if torch.any(self.values < 0):
                raise RangeError(f"{self.kind} mask must be nonnegative")
        if not torch.all(finite):
            raise RangeError("mask contains non-finite entries")


def _to_tensor(signal: AudioSignal) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(signal.samples))


def stft_encode(signal: AudioSignal) -> Spectrogram:
    return Spectrogram(frames=stft(_to_tensor(signal)), original_length=len(signal))


def istft_decode(spec: Spectrogram, length: int) -> AudioSignal:
    wave = istft(spec.frames, length)
    return AudioSignal(wave.detach().cpu().numpy().astype(np.float64))


def _paired_fourier_bank(dtype=torch.float32):
    """Filter pairs +/- (Hann-windowed cos/sin atoms) and their dual-frame
    synthesis bank.

    relu(a) - relu(-a) == a, so the +/- pairing makes the untrained
    encode -> ReLU -> ones-mask -> decode path a linear near-identity on the
    covered band (256 atoms: cos bins 0..127, sin bins 1..128).
    """
    n = np.arange(FFT_SIZE)
    win = 0.5 * (1.0 - np.cos(2 * np.pi * n / FFT_SIZE))  # periodic Hann
    atoms, gains = [], []
    for j in range(128):
        atoms.append(np.cos(2 * np.pi * j * n / FFT_SIZE))
        gains.append(1024.0 if j == 0 else 512.0)
    for j in range(1, 129):
        atoms.append(np.sin(2 * np.pi * j * n / FFT_SIZE))
        gains.append(512.0)
    ola_gain = (win * win).sum() / HOP  # constant interior window-square sum
    enc = np.empty((N_FILTERS, FFT_SIZE))
    dec = np.empty((N_FILTERS, FFT_SIZE))
    for a, (atom, norm) in enumerate(zip(atoms, gains)):
        enc[2 * a] = win * atom
        enc[2 * a + 1] = -win * atom
        dec[2 * a] = win * atom / (norm * ola_gain)
        dec[2 * a + 1] = -win * atom / (norm * ola_gain)
    return torch.as_tensor(enc, dtype=dtype), torch.as_tensor(dec, dtype=dtype)


class ConvEncoder(nn.Module):
    """Learnable analysis filterbank: Conv1d(1 -> 512, k=1024, stride=320) + ReLU."""

    def __init__(self, init: str = "uniform", dtype=torch.float32):
        super().__init__()
        self.conv = nn.Conv1d(1, N_FILTERS, FFT_SIZE, stride=HOP, bias=False, dtype=dtype)
        if init == "uniform":
            bound = 1.0 / np.sqrt(FFT_SIZE)
            nn.init.uniform_(self.conv.weight, -bound, bound)
        elif init == "paired_fourier":
            enc, _ = _paired_fourier_bank(dtype)
            with torch.no_grad():
                self.conv.weight.copy_(enc[:, None, :])
        else:
            raise ShapeError(f"unknown frontend init '{init}'")

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        """(..., L) -> (..., T, 512) with T = (L - 1024) // 320 + 1."""
        if wave.shape[-1] < FFT_SIZE:
            raise LengthError(f"signal length {wave.shape[-1]} < kernel size {FFT_SIZE}")
        squeeze = wave.dim() == 1
        x = wave[None] if squeeze else wave
        feats = F.relu(self.conv(x[:, None])).transpose(1, 2)
        return feats[0] if squeeze else feats


class DeconvDecoder(nn.Module):
    """Learnable synthesis filterbank: ConvTranspose1d(512 -> 1, k=1024, stride=320)."""

    def __init__(self, init: str = "uniform", dtype=torch.float32):
        super().__init__()
        self.deconv = nn.ConvTranspose1d(N_FILTERS, 1, FFT_SIZE, stride=HOP,
                                         bias=False, dtype=dtype)
        if init == "uniform":
            bound = 1.0 / np.sqrt(FFT_SIZE)
            nn.init.uniform_(self.deconv.weight, -bound, bound)
        elif init == "paired_fourier":
            _, dec = _paired_fourier_bank(dtype)
            with torch.no_grad():
                self.deconv.weight.copy_(dec[:, None, :])
        else:
            raise ShapeError(f"unknown frontend init '{init}'")

    def forward(self, feats: torch.Tensor, length: int) -> torch.Tensor:
        """(..., T, 512) -> (..., length), zero-padded or trimmed at the end."""
        squeeze = feats.dim() == 2
        x = feats[None] if squeeze else feats
        if x.shape[-1] != N_FILTERS:
            raise ShapeError(f"expected {N_FILTERS} feature channels, got {x.shape[-1]}")
        y = self.deconv(x.transpose(1, 2))[:, 0]
        if y.shape[-1] < length:
            y = F.pad(y, (0, length - y.shape[-1]))
        y = y[:, :length]
        return y[0] if squeeze else y


def conv_encode(signal: AudioSignal, encoder: ConvEncoder) -> EncodedFeatures:
    feats = encoder(_to_tensor(signal).to(encoder.conv.weight.dtype))
    return EncodedFeatures(frames=feats, original_length=len(signal))


def deconv_decode(features: EncodedFeatures, decoder: DeconvDecoder, length: int) -> AudioSignal:
    wave = decoder(features.frames.to(decoder.deconv.weight.dtype), length)
    return AudioSignal(wave.detach().cpu().numpy().astype(np.float64))


def apply_mask(domain_features, mask: MaskTensor):
    """Hadamard mask application in the matching feature domain.

    magnitude: real nonnegative mask on complex frames (mixture phase kept);
    complex: complex elementwise product; encoder: real elementwise product.
    """
    if isinstance(domain_features, Spectrogram):
        if mask.kind not in ("magnitude", "complex"):
            raise ShapeError(f"mask kind '{mask.kind}' cannot apply to a spectrogram")
        if mask.values.shape != domain_features.frames.shape:
            raise ShapeError(
                f"mask shape {tuple(mask.values.shape)} != spectrogram "
                f"{tuple(domain_features.frames.shape)}")
        # Real nonnegative masks scale magnitude and keep phase; complex masks
        # multiply out directly.
        masked = domain_features.frames * mask.values
        return Spectrogram(frames=masked, original_length=domain_features.original_length)
    if isinstance(domain_features, EncodedFeatures):
        if mask.kind != "encoder":
            raise ShapeError(f"mask kind '{mask.kind}' cannot apply to encoder features")
        if mask.values.shape != domain_features.frames.shape:
            raise ShapeError(
                f"mask shape {tuple(mask.values.shape)} != features "
                f"{tuple(domain_features.frames.shape)}")
        return EncodedFeatures(frames=domain_features.frames * mask.values,
                               original_length=domain_features.original_length)
    raise ShapeError(f"cannot mask object of type {type(domain_features).__name__}")
