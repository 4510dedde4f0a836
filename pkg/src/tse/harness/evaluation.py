"""Evaluation reports, layer-weight export, and feature precomputation."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from ..audio_io import load_manifest, read_wav
from ..errors import CheckpointError, ConfigurationError, ShapeError
from ..extractor import tse_forward
from ..metrics import MetricReport, SampleMetrics, si_sdr, stoi
from ..upstream import FilesUpstream, ToyUpstream, store_features
from .checkpoint import Checkpoint, model_from_checkpoint

ORACLE_MODES = ("none", "target", "mixture")


def evaluate(ckpt: Checkpoint, manifest_path, report_path=None,
             oracle_mode: str = "none") -> MetricReport:
    """Score every manifest sample with the checkpointed model (or an oracle
    substitution) and write the JSON report."""
    if oracle_mode not in ORACLE_MODES:
        raise ConfigurationError(f"oracle_mode '{oracle_mode}' not in {ORACLE_MODES}")
    entries = load_manifest(manifest_path)
    model = model_from_checkpoint(ckpt)
    model.eval()
    files_upstream = model.upstream if isinstance(model.upstream, FilesUpstream) else None

    report = MetricReport()
    for entry in entries:
        mixture = read_wav(entry.mixture_path)
        target = read_wav(entry.target_path)
        enrollment = read_wav(entry.enrollment_path)
        if oracle_mode == "target":
            estimate = target.samples
        elif oracle_mode == "mixture":
            estimate = mixture.samples
        else:
            mix_stack = enr_stack = None
            if files_upstream is not None:
                if model.needs_mixture_stack:
                    mix_stack = files_upstream.load(entry.id, "mixture")
                if model.needs_enrollment_stack:
                    enr_stack = files_upstream.load(entry.id, "enrollment")
            try:
                estimate = tse_forward(model, mixture, enrollment,
                                       mix_stack=mix_stack, enr_stack=enr_stack).samples
            except ShapeError as exc:
                raise ConfigurationError(
                    f"{entry.id}: checkpoint dimensions do not match this data ({exc})"
                ) from exc
        n = min(len(estimate), len(target), len(mixture))
        est, ref, mix = estimate[:n], target.samples[:n], mixture.samples[:n]
        sdr_mix = si_sdr(mix, ref)
        sdr_est = si_sdr(est, ref)
        report.per_sample.append(SampleMetrics(
            id=entry.id,
            si_sdr_mix=sdr_mix,
            si_sdr_est=sdr_est,
            si_sdri=sdr_est - sdr_mix,
            stoi=stoi(est, ref),
        ))
    if report_path is not None:
        report.save(report_path)
    return report


def export_layer_weights(ckpt: Checkpoint, out_csv) -> None:
    """Write the softmax-normalized layer weights of both modules as CSV.

    Rows: spk_enc (the MHFA feature/value weight set) and extractor. A
    configuration without one of the weight sets cannot be exported.
    """
    missing = []
    if not ckpt.has_spk_enc_layer_weights:
        missing.append("spk_enc")
    if not ckpt.has_extractor_layer_weights:
        missing.append("extractor")
    if missing:
        raise CheckpointError(
            f"checkpoint lacks layer weights for: {', '.join(missing)} "
            "(stft-based modules carry none)")
    spk = ckpt.params["spk_enc.feat_weights.logits"]
    ext = ckpt.params["extractor_weights.logits"]
    if spk.shape != ext.shape:
        raise CheckpointError("spk_enc and extractor layer weights disagree on depth")

    def softmax(v):
        e = np.exp(v - np.max(v))
        return e / e.sum()

    out_csv = Path(out_csv)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["module"] + [f"layer_{i}" for i in range(len(spk))])
        writer.writerow(["spk_enc"] + [repr(float(x)) for x in softmax(spk)])
        writer.writerow(["extractor"] + [repr(float(x)) for x in softmax(ext)])


def precompute_features(manifest_path, out_dir, seed: int = 0,
                        num_layers: int = 4, dim: int = 192) -> int:
    """Dump toy-upstream LFSC feature files for every manifest sample.

    Writes <id>__mixture.lfsc and <id>__enrollment.lfsc; returns the number
    of files written.
    """
    entries = load_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    upstream = ToyUpstream(seed=seed, num_layers=num_layers, dim=dim)
    count = 0
    for entry in entries:
        for role, path in (("mixture", entry.mixture_path),
                           ("enrollment", entry.enrollment_path)):
            wave = read_wav(path).samples.astype(np.float32)
            stack = upstream(torch.from_numpy(wave))
            store_features(out_dir / f"{entry.id}__{role}.lfsc", stack)
            count += 1
    return count
