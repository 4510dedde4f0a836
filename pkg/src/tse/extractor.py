"""Mask estimation (MixNet -> fusion -> MaskNet) and the composed TSE model.

The extractor consumes per-frame features of the mixture (SSL weighted sum
or STFT magnitudes), conditions them on the speaker embedding through one of
four fusion rules, and emits a multiplicative mask in the configured domain.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .audio_io import AudioSignal
from .errors import ConfigurationError, EmptyInputError, ShapeError
from .frontend import (
    N_BINS,
    N_FILTERS,
    ConvEncoder,
    DeconvDecoder,
    MaskTensor,
    stft,
    istft,
)
from .speaker_encoder import EMBED_DIM, MHFA, StftBlstmSpeakerEncoder
from .upstream import LayerWeights, weighted_layer_sum

FUSION_KINDS = ("addition", "multiplication", "concatenation", "film")


class FusionLayer(nn.Module):
    """Combine MixNet output with a broadcast speaker embedding.

    Only the maps the chosen rule needs are instantiated; every rule keeps
    the frame width unchanged (concatenation reduces back down).
    """

    def __init__(self, kind: str, embed_dim: int = EMBED_DIM, width: int = 1024):
        super().__init__()
        if kind not in FUSION_KINDS:
            raise ConfigurationError(f"unknown fusion kind '{kind}'")
        self.kind = kind
        self.width = width
        if kind in ("addition", "multiplication"):
            self.embed_proj = nn.Linear(embed_dim, width)
        elif kind == "concatenation":
            self.embed_proj = nn.Linear(embed_dim, width)
            self.concat_reduce = nn.Linear(2 * width, width)
        else:  # film
            self.film_scale = nn.Linear(embed_dim, width)
            self.film_shift = nn.Linear(embed_dim, width)

    def forward(self, z_mix: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        """(B, T, W) x (B, E) -> (B, T, W)."""
        if z_mix.shape[-1] != self.width:
            raise ShapeError(f"fusion expects width {self.width}, got {z_mix.shape[-1]}")
        if self.kind == "addition":
            return z_mix + self.embed_proj(embedding)[:, None, :]
        if self.kind == "multiplication":
            return z_mix * self.embed_proj(embedding)[:, None, :]
        if self.kind == "concatenation":
            e = self.embed_proj(embedding)[:, None, :].expand_as(z_mix)
            return self.concat_reduce(torch.cat([z_mix, e], dim=-1))
        return z_mix * self.film_scale(embedding)[:, None, :] \
            + self.film_shift(embedding)[:, None, :]


def fuse(z_mix: torch.Tensor, embedding: torch.Tensor, fusion: FusionLayer) -> torch.Tensor:
    """Single-utterance fusion: (T, W) x (E,) -> (T, W)."""
    return fusion(z_mix[None], embedding[None])[0]


class Extractor(nn.Module):
    """MixNet (1 BLSTM) -> fusion -> MaskNet (2 BLSTM) -> mask head.

    The head emits ReLU masks for magnitude/encoder kinds and an unconstrained
    (real, imag) pair for the complex kind. At init the head is biased toward
    the identity mask (ones) so an untrained model passes the mixture through.
    """

    def __init__(self, input_dim: int, mask_kind: str,
                 fusion_kind: str = "multiplication", hidden_dim: int = 512,
                 embed_dim: int = EMBED_DIM, mask_bins: int | None = None):
        super().__init__()
        if mask_kind not in ("magnitude", "complex", "encoder"):
            raise ConfigurationError(f"unknown mask kind '{mask_kind}'")
        self.mask_kind = mask_kind
        if mask_bins is None:
            mask_bins = N_FILTERS if mask_kind == "encoder" else N_BINS
        self.mask_bins = mask_bins
        width = 2 * hidden_dim
        self.mixnet = nn.LSTM(input_dim, hidden_dim, num_layers=1,
                              bidirectional=True, batch_first=True)
        self.fusion = FusionLayer(fusion_kind, embed_dim=embed_dim, width=width)
        self.masknet = nn.LSTM(width, hidden_dim, num_layers=2,
                               bidirectional=True, batch_first=True)
        out_dim = 2 * mask_bins if mask_kind == "complex" else mask_bins
        self.head = nn.Linear(width, out_dim)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            if mask_kind == "complex":
                self.head.bias[:mask_bins].fill_(1.0)
                self.head.bias[mask_bins:].fill_(0.0)
            else:
                self.head.bias.fill_(1.0)

    def forward(self, features: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        """(B, T, D_in) x (B, E) -> mask (B, T, bins); complex-valued for the
        complex kind, nonnegative real otherwise."""
        if features.shape[1] == 0:
            raise EmptyInputError("extractor received zero frames")
        z_mix, _ = self.mixnet(features)
        z_f = self.fusion(z_mix, embedding)
        hidden, _ = self.masknet(z_f)
        raw = self.head(hidden)
        if self.mask_kind == "complex":
            return torch.complex(raw[..., :self.mask_bins], raw[..., self.mask_bins:])
        return torch.relu(raw)


def estimate_mask(features: torch.Tensor, embedding: torch.Tensor,
                  extractor: Extractor) -> MaskTensor:
    """Single-utterance mask: (T, D_in) x (E,) -> MaskTensor of the extractor's kind."""
    if features.dim() != 2:
        raise ShapeError("estimate_mask expects unbatched (T, D) features")
    values = extractor(features[None], embedding[None])[0]
    return MaskTensor(kind=extractor.mask_kind, values=values)


class TSEModel(nn.Module):
    """The composed pipeline: frozen upstream -> SpkEnc + Extractor -> masked
    encoder features -> decoder.

    The upstream provider is deliberately NOT a submodule: its parameters are
    frozen and never appear in ``parameters()`` or ``state_dict()``.
    """

    def __init__(self, *, encoder_kind: str, mask_kind: str, fusion_kind: str,
                 spk_enc_kind: str, extractor_kind: str, upstream,
                 num_upstream_layers: int, feat_dim: int,
                 hidden_dim: int = 512, embed_dim: int = EMBED_DIM,
                 mhfa_heads: int = 4, mhfa_compress: int = 128,
                 frontend_init: str = "paired_fourier"):
        super().__init__()
        if encoder_kind not in ("stft", "learnable"):
            raise ConfigurationError(f"unknown encoder kind '{encoder_kind}'")
        if spk_enc_kind not in ("mhfa", "stft_blstm"):
            raise ConfigurationError(f"unknown speaker encoder kind '{spk_enc_kind}'")
        if extractor_kind not in ("ssl", "stft"):
            raise ConfigurationError(f"unknown extractor input kind '{extractor_kind}'")
        self.encoder_kind = encoder_kind
        self.mask_kind = mask_kind
        self.spk_enc_kind = spk_enc_kind
        self.extractor_kind = extractor_kind
        # Plain attribute: the provider is not an nn.Module, so it never
        # enters parameters() or state_dict().
        self.upstream = upstream

        if encoder_kind == "learnable":
            self.encoder = ConvEncoder(init=frontend_init)
            self.decoder = DeconvDecoder(init=frontend_init)
        else:
            self.encoder = None
            self.decoder = None

        if spk_enc_kind == "mhfa":
            self.spk_enc = MHFA(num_upstream_layers + 1, feat_dim,
                                compress_dim=mhfa_compress, num_heads=mhfa_heads,
                                embed_dim=embed_dim)
        else:
            self.spk_enc = StftBlstmSpeakerEncoder(N_BINS, hidden_dim, embed_dim)

        if extractor_kind == "ssl":
            self.extractor_weights = LayerWeights(num_upstream_layers + 1)
            ext_input = feat_dim
        else:
            self.extractor_weights = None
            ext_input = N_BINS
        self.extractor = Extractor(ext_input, mask_kind, fusion_kind,
                                   hidden_dim=hidden_dim, embed_dim=embed_dim)

    @property
    def needs_mixture_stack(self) -> bool:
        return self.extractor_kind == "ssl"

    @property
    def needs_enrollment_stack(self) -> bool:
        return self.spk_enc_kind == "mhfa"

    def _stacks(self, mix_wave, enr_wave, mix_layers, enr_layers):
        dtype = next(self.parameters()).dtype
        can_compute = hasattr(self.upstream, "batch_layers")
        if self.needs_mixture_stack and mix_layers is None:
            if not can_compute:
                raise ConfigurationError(
                    "this upstream cannot compute features; pass precomputed mixture stacks")
            mix_layers = self.upstream.batch_layers(mix_wave, dtype=dtype)
        if self.needs_enrollment_stack and enr_layers is None:
            if not can_compute:
                raise ConfigurationError(
                    "this upstream cannot compute features; pass precomputed enrollment stacks")
            enr_layers = self.upstream.batch_layers(enr_wave, dtype=dtype)
        return mix_layers, enr_layers

    def compute_mask(self, mix_wave: torch.Tensor, enr_wave: torch.Tensor,
                     mix_layers=None, enr_layers=None):
        """Run upstreams, SpkEnc, and the extractor; returns (mask, encoded).

        mask: (B, T, bins) (complex for the complex kind); encoded: the
        mixture in the masking domain, truncated to matching frame counts.
        """
        mix_layers, enr_layers = self._stacks(mix_wave, enr_wave, mix_layers, enr_layers)

        if self.spk_enc_kind == "mhfa":
            embedding = self.spk_enc(enr_layers)
        else:
            embedding = self.spk_enc(stft(enr_wave).abs())

        if self.extractor_kind == "ssl":
            features = weighted_layer_sum(mix_layers, self.extractor_weights.logits)
        else:
            features = stft(mix_wave).abs()

        mask = self.extractor(features, embedding)
        if self.encoder_kind == "stft":
            encoded = stft(mix_wave)
        else:
            encoded = self.encoder(mix_wave)
        t_common = min(mask.shape[1], encoded.shape[1])
        return mask[:, :t_common], encoded[:, :t_common]

    def forward(self, mix_wave: torch.Tensor, enr_wave: torch.Tensor,
                mix_layers=None, enr_layers=None, mask_override=None) -> torch.Tensor:
        """(B, L) mixture + (B, Le) enrollment -> (B, L) estimate."""
        mask, encoded = self.compute_mask(mix_wave, enr_wave, mix_layers, enr_layers)
        if mask_override == "ones":
            mask = torch.ones_like(mask)
        elif mask_override is not None:
            raise ConfigurationError(f"unknown mask override '{mask_override}'")
        masked = encoded * mask
        length = mix_wave.shape[-1]
        if self.encoder_kind == "stft":
            return istft(masked, length)
        return self.decoder(masked, length)


def tse_forward(model: TSEModel, mixture: AudioSignal, enrollment: AudioSignal,
                mix_stack=None, enr_stack=None, mask_override=None) -> AudioSignal:
    """Evaluation-mode extraction of one utterance; output length == mixture length."""
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            mix = torch.from_numpy(np.ascontiguousarray(mixture.samples)).to(dtype)[None]
            enr = torch.from_numpy(np.ascontiguousarray(enrollment.samples)).to(dtype)[None]
            mix_layers = mix_stack.layers[None].to(dtype) if mix_stack is not None else None
            enr_layers = enr_stack.layers[None].to(dtype) if enr_stack is not None else None
            est = model(mix, enr, mix_layers=mix_layers, enr_layers=enr_layers,
                        mask_override=mask_override)[0]
    finally:
        if was_training:
            model.train()
    return AudioSignal(est.cpu().numpy().astype(np.float64))
