"""Speaker encoders and the additive-margin softmax objective.

:class:`MHFA` pools the frozen feature stack with multi-head factorized
attention: one set of layer weights forms keys (attention), a second forms
values (content); compressed keys drive per-head softmax over time, heads
pool the compressed values, and a linear projection emits the embedding.

:class:`StftBlstmSpeakerEncoder` is the spectral baseline: a 3-layer BLSTM
over STFT magnitudes with average pooling.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import EmptyInputError, NormalizationError, ShapeError
from .upstream import FeatureStack, LayerWeights, weighted_layer_sum

EMBED_DIM = 256


class MHFA(nn.Module):
    """Multi-head factorized attentive pooling over a layer-wise feature stack.

    Args:
        num_layers_plus_1: stack depth (L+1).
        feat_dim: upstream channel count D.
        compress_dim: key/value compression width (128).
        num_heads: attention heads (4 for TSE, 32 for the SV benchmark).
        embed_dim: output embedding size.
    """

    def __init__(self, num_layers_plus_1: int, feat_dim: int,
                 compress_dim: int = 128, num_heads: int = 4,
                 embed_dim: int = EMBED_DIM):
        super().__init__()
        self.att_weights = LayerWeights(num_layers_plus_1)
        self.feat_weights = LayerWeights(num_layers_plus_1)
        self.key_compress = nn.Linear(feat_dim, compress_dim)
        self.value_compress = nn.Linear(feat_dim, compress_dim)
        # Per-head bias would shift every frame equally and vanish in the
        # time softmax, so the head map carries none.
        self.head_map = nn.Linear(compress_dim, num_heads, bias=False)
        self.out_proj = nn.Linear(num_heads * compress_dim, embed_dim)
        self.num_heads = num_heads
        self.compress_dim = compress_dim
        self.embed_dim = embed_dim

    @staticmethod
    def parameter_count(num_layers_plus_1, feat_dim, compress_dim, num_heads, embed_dim):
        """Closed-form parameter count; tests guard against accidental extras."""
        return (2 * num_layers_plus_1
                + 2 * (feat_dim * compress_dim + compress_dim)
                + compress_dim * num_heads
                + num_heads * compress_dim * embed_dim + embed_dim)

    def forward(self, stack) -> torch.Tensor:
        """FeatureStack or (..., L+1, T, D) tensor -> (..., E) embedding."""
        layers = stack.layers if isinstance(stack, FeatureStack) else stack
        if layers.shape[-2] == 0:
            raise EmptyInputError("cannot pool an empty time axis")
        if layers.shape[-3] != self.att_weights.logits.shape[0]:
            raise ShapeError(
                f"stack has {layers.shape[-3]} layers, MHFA expects "
                f"{self.att_weights.logits.shape[0]}")
        keys = weighted_layer_sum(layers, self.att_weights.logits)      # (..., T, D)
        values = weighted_layer_sum(layers, self.feat_weights.logits)
        keys_c = self.key_compress(keys)                                # (..., T, dc)
        values_c = self.value_compress(values)
        att = torch.softmax(self.head_map(keys_c), dim=-2)              # (..., T, H)
        pooled = torch.einsum("...th,...td->...hd", att, values_c)      # (..., H, dc)
        return self.out_proj(pooled.flatten(-2))


def mhfa_embed(stack: FeatureStack, mhfa: MHFA) -> torch.Tensor:
    """Single-utterance embedding (the module contract surface)."""
    return mhfa(stack)


class StftBlstmSpeakerEncoder(nn.Module):
    """3-layer BLSTM over STFT magnitudes, time-averaged, projected to E."""

    def __init__(self, num_bins: int = 513, hidden_dim: int = 512,
                 embed_dim: int = EMBED_DIM, num_blstm_layers: int = 3):
        super().__init__()
        self.blstm = nn.LSTM(num_bins, hidden_dim, num_layers=num_blstm_layers,
                             bidirectional=True, batch_first=True)
        self.proj = nn.Linear(2 * hidden_dim, embed_dim)
        self.num_bins = num_bins

    def forward(self, magnitudes: torch.Tensor) -> torch.Tensor:
        """(..., T, F) magnitudes -> (..., E) embedding."""
        if magnitudes.shape[-1] != self.num_bins:
            raise ShapeError(f"expected {self.num_bins} bins, got {magnitudes.shape[-1]}")
        if magnitudes.shape[-2] == 0:
            raise EmptyInputError("cannot pool an empty time axis")
        squeeze = magnitudes.dim() == 2
        x = magnitudes[None] if squeeze else magnitudes
        out, _ = self.blstm(x)
        emb = self.proj(out.mean(dim=1))
        return emb[0] if squeeze else emb


def am_softmax_loss(embedding: torch.Tensor, class_weights: torch.Tensor,
                    label: int, scale: float = 30.0, margin: float = 0.4) -> torch.Tensor:
    """Additive-margin softmax cross-entropy over scaled cosine similarities.

    Embedding and class rows are length-normalized; the true class logit is
    scale * (cos - margin), all others scale * cos.
    """
    if embedding.dim() != 1 or class_weights.dim() != 2 \
            or class_weights.shape[1] != embedding.shape[0]:
        raise ShapeError(
            f"class weights {tuple(class_weights.shape)} do not match embedding "
            f"of size {embedding.shape[0]}")
    if not 0 <= label < class_weights.shape[0]:
        raise ShapeError(f"label {label} out of range for {class_weights.shape[0]} classes")
    e_norm = torch.linalg.vector_norm(embedding)
    w_norms = torch.linalg.vector_norm(class_weights, dim=1)
    tiny = torch.finfo(embedding.dtype).tiny
    if e_norm.item() <= tiny:
        raise NormalizationError("zero-norm embedding cannot be length-normalized")
    if torch.any(w_norms <= tiny):
        raise NormalizationError("zero-norm class weight row cannot be length-normalized")
    cosines = (class_weights @ embedding) / (w_norms * e_norm)
    logits = scale * cosines
    logits = logits.clone()
    logits[label] = scale * (cosines[label] - margin)
    return torch.logsumexp(logits, dim=0) - logits[label]
