"""Joint training of all downstream modules (upstream stays frozen).

Deterministic given the config seed when run single-threaded: batch order,
crop offsets, and parameter init all derive from it. Each epoch appends one
JSON line {epoch, wall_clock_s, train_loss, valid_neg_si_sdr} to
``curve.jsonl``; the best-validation checkpoint lands in ``best/`` and the
most recent one in ``last/``.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch

from ..audio_io import load_manifest, read_wav
from ..errors import ConfigurationError, TrainingDivergedError
from ..frontend import FFT_SIZE, stft
from ..metrics import si_sdr_loss, spectral_mse
from ..upstream import FilesUpstream
from .checkpoint import Checkpoint, build_model, load_checkpoint, save_checkpoint
from .config import RunConfig


class _Sample:
    __slots__ = ("id", "mixture", "target", "enrollment")

    def __init__(self, entry):
        self.id = entry.id
        self.mixture = read_wav(entry.mixture_path).samples.astype(np.float32)
        self.target = read_wav(entry.target_path).samples.astype(np.float32)
        self.enrollment = read_wav(entry.enrollment_path).samples.astype(np.float32)


def _load_split(manifest_path) -> list[_Sample]:
    return [_Sample(e) for e in load_manifest(manifest_path)]


def _batch_crops(samples, indices, crop, rng):
    """Equal-length random crops; mixture and target share offsets."""
    mix_len = min(min(len(samples[i].mixture), crop) for i in indices)
    enr_len = min(min(len(samples[i].enrollment), crop) for i in indices)
    mixes, targets, enrolls = [], [], []
    for i in indices:
        s = samples[i]
        off = int(rng.integers(0, len(s.mixture) - mix_len + 1))
        mixes.append(s.mixture[off:off + mix_len])
        targets.append(s.target[off:off + mix_len])
        eoff = int(rng.integers(0, len(s.enrollment) - enr_len + 1))
        enrolls.append(s.enrollment[eoff:eoff + enr_len])
    return (torch.from_numpy(np.stack(mixes)),
            torch.from_numpy(np.stack(targets)),
            torch.from_numpy(np.stack(enrolls)))


def _training_loss(model, config, mix, target, enr, mix_layers=None, enr_layers=None):
    if config.loss_kind == "si_sdr":
        est = model(mix, enr, mix_layers=mix_layers, enr_layers=enr_layers)
        return si_sdr_loss(est, target).mean()
    # Spectral MSE: compare masked mixture magnitudes against the target's.
    mask, encoded = model.compute_mask(mix, enr, mix_layers=mix_layers,
                                       enr_layers=enr_layers)
    est_mag = (encoded * mask).abs()
    ref_mag = stft(target).abs()[:, :est_mag.shape[1]]
    return spectral_mse(est_mag, ref_mag)


def _stacks_for(model, sample_id, upstream, dtype):
    mix = upstream.load(sample_id, "mixture").layers[None].to(dtype) \
        if model.needs_mixture_stack else None
    enr = upstream.load(sample_id, "enrollment").layers[None].to(dtype) \
        if model.needs_enrollment_stack else None
    return mix, enr


def _validate(model, config, samples, files_upstream) -> float:
    """Mean negative SI-SDR over the validation split (full utterances)."""
    model.eval()
    total = 0.0
    with torch.no_grad():
        for s in samples:
            mix = torch.from_numpy(s.mixture)[None]
            tgt = torch.from_numpy(s.target)[None]
            enr = torch.from_numpy(s.enrollment)[None]
            if files_upstream is not None:
                mix_layers, enr_layers = _stacks_for(model, s.id, files_upstream,
                                                     torch.float32)
            else:
                mix_layers = enr_layers = None
            est = model(mix, enr, mix_layers=mix_layers, enr_layers=enr_layers)
            total += si_sdr_loss(est, tgt).item()
    model.train()
    return total / len(samples)


def train(config: RunConfig, train_manifest, valid_manifest, out_dir,
          resume=None, clock=time.monotonic, log=None) -> Checkpoint:
    """Run the full optimization and return the best-validation checkpoint."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_samples = _load_split(train_manifest)
    valid_samples = _load_split(valid_manifest)
    if not train_samples or not valid_samples:
        raise ConfigurationError("training and validation manifests must be nonempty")
    min_len = min(min(len(s.mixture) for s in train_samples + valid_samples),
                  min(len(s.enrollment) for s in train_samples + valid_samples))
    if min_len < FFT_SIZE:
        raise ConfigurationError(f"samples shorter than one analysis window ({FFT_SIZE})")

    torch.manual_seed(config.seed)
    model = build_model(config)
    start_epoch = 1
    best_valid = float("inf")
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config.to_dict() != config.to_dict():
            raise ConfigurationError("resume checkpoint was trained with a different config")
        model = build_model(config, ckpt.params)
        start_epoch = ckpt.epoch + 1
        best_valid = ckpt.best_valid_loss
    model.train()

    files_upstream = model.upstream if isinstance(model.upstream, FilesUpstream) else None
    optimizer = torch.optim.Adam(model.parameters(), lr=config.optimizer.lr)
    crop = int(round(config.optimizer.crop_s * 16000))
    curve_path = out_dir / "curve.jsonl"
    t0 = clock()

    for epoch in range(start_epoch, config.optimizer.epochs + 1):
        rng = np.random.default_rng([config.seed & 0x7FFFFFFF, 0xBA7C, epoch])
        order = rng.permutation(len(train_samples))
        epoch_loss = 0.0
        n_batches = 0
        if files_upstream is None:
            batches = [order[i:i + config.optimizer.batch_size]
                       for i in range(0, len(order), config.optimizer.batch_size)]
            for b, indices in enumerate(batches):
                mix, tgt, enr = _batch_crops(train_samples, indices, crop, rng)
                optimizer.zero_grad()
                loss = _training_loss(model, config, mix, tgt, enr)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {b}",
                        epoch=epoch, batch_index=b)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.optimizer.grad_clip)
                optimizer.step()
                epoch_loss += loss.item()
                n_batches += 1
        else:
            # Feature files are whole-utterance dumps: no random crops, and
            # gradients accumulate across batch_size single samples.
            for b in range(0, len(order), config.optimizer.batch_size):
                group = order[b:b + config.optimizer.batch_size]
                optimizer.zero_grad()
                group_loss = 0.0
                for i in group:
                    s = train_samples[i]
                    mix_layers, enr_layers = _stacks_for(model, s.id, files_upstream,
                                                         torch.float32)
                    loss = _training_loss(
                        model, config,
                        torch.from_numpy(s.mixture)[None],
                        torch.from_numpy(s.target)[None],
                        torch.from_numpy(s.enrollment)[None],
                        mix_layers=mix_layers, enr_layers=enr_layers) / len(group)
                    if not torch.isfinite(loss):
                        raise TrainingDivergedError(
                            f"non-finite loss at epoch {epoch}, batch {b}",
                            epoch=epoch, batch_index=b)
                    loss.backward()
                    group_loss += loss.item()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.optimizer.grad_clip)
                optimizer.step()
                epoch_loss += group_loss
                n_batches += 1

        train_loss = epoch_loss / max(n_batches, 1)
        valid_neg_si_sdr = _validate(model, config, valid_samples, files_upstream)
        record = {"epoch": epoch, "wall_clock_s": clock() - t0,
                  "train_loss": train_loss, "valid_neg_si_sdr": valid_neg_si_sdr}
        with open(curve_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        if log is not None:
            log(record)

        save_checkpoint(out_dir / "last", config, model, epoch, min(best_valid, valid_neg_si_sdr))
        if valid_neg_si_sdr < best_valid:
            best_valid = valid_neg_si_sdr
            save_checkpoint(out_dir / "best", config, model, epoch, best_valid)

    return load_checkpoint(out_dir / "best")
