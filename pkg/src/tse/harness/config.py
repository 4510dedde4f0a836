"""Run configuration: one experiment description per benchmark table row.

The JSON config file mirrors RunConfig exactly; unknown keys are rejected so
typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import ConfigurationError

ENCODER_KINDS = ("stft", "learnable")
MASK_KINDS = ("magnitude", "complex", "encoder")
FUSION_KINDS = ("addition", "multiplication", "concatenation", "film")
LOSS_KINDS = ("mse", "si_sdr")
SPK_ENC_KINDS = ("mhfa", "stft_blstm")
EXTRACTOR_KINDS = ("ssl", "stft")
FRONTEND_INITS = ("paired_fourier", "uniform")


@dataclass
class UpstreamConfig:
    kind: str = "toy"  # toy | files
    seed: int = 0
    num_layers: int = 4
    dim: int = 192
    dir: str | None = None  # files kind only

    def validate(self):
        if self.kind not in ("toy", "files"):
            raise ConfigurationError(f"unknown upstream kind '{self.kind}'")
        if self.kind == "files" and not self.dir:
            raise ConfigurationError("files upstream requires 'dir'")
        if self.kind == "toy" and self.num_layers < 1:
            raise ConfigurationError("toy upstream needs num_layers >= 1")


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    grad_clip: float = 5.0
    batch_size: int = 8
    epochs: int = 200
    crop_s: float = 3.0

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.crop_s <= 0:
            raise ConfigurationError("optimizer settings must be positive")


@dataclass
class RunConfig:
    encoder_kind: str = "stft"
    mask_kind: str = "magnitude"
    fusion_kind: str = "multiplication"
    loss_kind: str = "si_sdr"
    spk_enc_kind: str = "mhfa"
    extractor_kind: str = "ssl"
    upstream: UpstreamConfig = field(default_factory=UpstreamConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    hidden_dim: int = 512
    embed_dim: int = 256
    mhfa_heads: int = 4
    mhfa_compress: int = 128
    frontend_init: str = "paired_fourier"

    def validate(self):
        for name, value, allowed in (
            ("encoder_kind", self.encoder_kind, ENCODER_KINDS),
            ("mask_kind", self.mask_kind, MASK_KINDS),
            ("fusion_kind", self.fusion_kind, FUSION_KINDS),
            ("loss_kind", self.loss_kind, LOSS_KINDS),
            ("spk_enc_kind", self.spk_enc_kind, SPK_ENC_KINDS),
            ("extractor_kind", self.extractor_kind, EXTRACTOR_KINDS),
            ("frontend_init", self.frontend_init, FRONTEND_INITS),
        ):
            if value not in allowed:
                raise ConfigurationError(f"{name}='{value}' not in {allowed}")
        # Mask domain and encoder must agree: spectral masks need the STFT
        # frontend, the encoder-domain mask needs the learnable one.
        if self.mask_kind == "encoder" and self.encoder_kind != "learnable":
            raise ConfigurationError("encoder-domain mask requires the learnable encoder")
        if self.mask_kind in ("magnitude", "complex") and self.encoder_kind != "stft":
            raise ConfigurationError(f"{self.mask_kind} mask requires the stft encoder")
        if self.loss_kind == "mse" and self.mask_kind != "magnitude":
            raise ConfigurationError("spectral MSE training requires the magnitude mask")
        if self.needs_upstream and self.upstream is None:
            raise ConfigurationError("this configuration requires an upstream")
        self.upstream.validate()
        self.optimizer.validate()

    @property
    def needs_upstream(self) -> bool:
        return self.spk_enc_kind == "mhfa" or self.extractor_kind == "ssl"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "upstream" in data and isinstance(data["upstream"], dict):
            up_unknown = set(data["upstream"]) - set(UpstreamConfig.__dataclass_fields__)
            if up_unknown:
                raise ConfigurationError(f"unknown upstream keys: {sorted(up_unknown)}")
            data["upstream"] = UpstreamConfig(**data["upstream"])
        if "optimizer" in data and isinstance(data["optimizer"], dict):
            opt_unknown = set(data["optimizer"]) - set(OptimizerConfig.__dataclass_fields__)
            if opt_unknown:
                raise ConfigurationError(f"unknown optimizer keys: {sorted(opt_unknown)}")
            data["optimizer"] = OptimizerConfig(**data["optimizer"])
        config = cls(**data)
        config.validate()
        return config

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


# Column combinations of the seven benchmark systems:
# (encoder/decoder, extractor input, speaker encoder, mask type, objective).
TABLE2_SYSTEMS = {
    1: dict(encoder_kind="stft", extractor_kind="stft", spk_enc_kind="stft_blstm",
            mask_kind="magnitude", loss_kind="mse"),
    2: dict(encoder_kind="stft", extractor_kind="stft", spk_enc_kind="mhfa",
            mask_kind="magnitude", loss_kind="mse"),
    3: dict(encoder_kind="stft", extractor_kind="ssl", spk_enc_kind="stft_blstm",
            mask_kind="magnitude", loss_kind="mse"),
    4: dict(encoder_kind="stft", extractor_kind="ssl", spk_enc_kind="mhfa",
            mask_kind="magnitude", loss_kind="mse"),
    5: dict(encoder_kind="stft", extractor_kind="ssl", spk_enc_kind="mhfa",
            mask_kind="magnitude", loss_kind="si_sdr"),
    6: dict(encoder_kind="stft", extractor_kind="ssl", spk_enc_kind="mhfa",
            mask_kind="complex", loss_kind="si_sdr"),
    7: dict(encoder_kind="learnable", extractor_kind="ssl", spk_enc_kind="mhfa",
            mask_kind="encoder", loss_kind="si_sdr"),
}


def table2_preset(system_id: int, **overrides) -> RunConfig:
    """RunConfig for one of the seven benchmark systems.

    Overrides may shrink dims or epochs for desk-scale runs but the five
    kind columns always come from the system id.
    """
    if system_id not in TABLE2_SYSTEMS:
        raise ConfigurationError(f"unknown system id {system_id}; expected 1..7")
    fields = dict(TABLE2_SYSTEMS[system_id])
    clash = set(fields) & set(overrides)
    if clash:
        raise ConfigurationError(f"cannot override preset columns: {sorted(clash)}")
    fields.update(overrides)
    config = RunConfig(**fields)
    config.validate()
    return config


@dataclass
class SVConfig:
    """Configuration of the toy speaker-verification benchmark."""

    upstream: UpstreamConfig = field(default_factory=UpstreamConfig)
    mhfa_heads: int = 32
    mhfa_compress: int = 128
    embed_dim: int = 256
    lr: float = 1e-3
    epochs: int = 30
    scale: float = 30.0
    margin: float = 0.4
    seed: int = 0

    def validate(self):
        self.upstream.validate()
        if self.upstream.kind != "toy":
            raise ConfigurationError("the SV benchmark runs on the toy upstream")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigurationError("SV optimizer settings must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "SVConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown SV config keys: {sorted(unknown)}")
        if "upstream" in data and isinstance(data["upstream"], dict):
            data["upstream"] = UpstreamConfig(**data["upstream"])
        config = cls(**data)
        config.validate()
        return config

    @classmethod
    def from_json(cls, path) -> "SVConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)
