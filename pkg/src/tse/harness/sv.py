"""Toy speaker-verification benchmark: MHFA embeddings trained with
additive-margin softmax on synthetic speakers, scored by cosine similarity.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ..audio_io import load_sv_dataset, load_trials, read_wav
from ..errors import ValidationError
from ..speaker_encoder import MHFA, am_softmax_loss
from ..upstream import ToyUpstream
from .config import SVConfig


def _embed_all(mhfa, stacks) -> dict:
    mhfa.eval()
    with torch.no_grad():
        embeddings = {uid: mhfa(stack) for uid, stack in stacks.items()}
    mhfa.train()
    return embeddings


def sv_benchmark(config: SVConfig, data_dir, trials_path, report_path=None,
                 train_model: bool = True, log=None) -> float:
    """Train the speaker classifier, score the trial list, return EER (%).

    ``train_model=False`` (or epochs == 0) scores with a randomly
    initialized MHFA, which should sit at chance.
    """
    config.validate()
    data_dir = Path(data_dir)
    utterances = load_sv_dataset(data_dir / "sv_utterances.jsonl")
    trials = load_trials(trials_path)

    by_id = {u.id: u for u in utterances}
    train_ids = [u.id for u in utterances if u.split == "train"]
    for trial in trials:
        for uid in (trial.enroll, trial.test):
            if uid not in by_id:
                raise ValidationError(f"trial references unknown utterance '{uid}'")
            if by_id[uid].split == "train":
                raise ValidationError(
                    f"trial references training utterance '{uid}'; trials must be held out")

    torch.manual_seed(config.seed)
    upstream = ToyUpstream(seed=config.upstream.seed,
                           num_layers=config.upstream.num_layers,
                           dim=config.upstream.dim)
    mhfa = MHFA(config.upstream.num_layers + 1, config.upstream.dim,
                compress_dim=config.mhfa_compress, num_heads=config.mhfa_heads,
                embed_dim=config.embed_dim)

    # The upstream is frozen, so every utterance's stack is computed once.
    stacks = {}
    for utt in utterances:
        wave = read_wav(utt.path).samples.astype(np.float32)
        stacks[utt.id] = upstream(torch.from_numpy(wave))

    speakers = sorted({u.speaker for u in utterances})
    spk_index = {spk: i for i, spk in enumerate(speakers)}
    class_weights = nn.Parameter(torch.empty(len(speakers), config.embed_dim))
    nn.init.xavier_uniform_(class_weights)

    if train_model and config.epochs > 0:
        optimizer = torch.optim.Adam(list(mhfa.parameters()) + [class_weights],
                                     lr=config.lr)
        rng = np.random.default_rng([config.seed & 0x7FFFFFFF, 0x57AC])
        batch = 16
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_ids))
            epoch_loss = 0.0
            for start in range(0, len(order), batch):
                group = order[start:start + batch]
                optimizer.zero_grad()
                loss = torch.stack([
                    am_softmax_loss(mhfa(stacks[train_ids[i]]), class_weights,
                                    spk_index[by_id[train_ids[i]].speaker],
                                    scale=config.scale, margin=config.margin)
                    for i in group]).mean()
                loss.backward()
                optimizer.step()
                epoch_loss += loss.item() * len(group)
            if log is not None:
                log({"epoch": epoch, "train_loss": epoch_loss / len(order)})

    trial_ids = {t.enroll for t in trials} | {t.test for t in trials}
    embeddings = _embed_all(mhfa, {uid: stacks[uid] for uid in trial_ids})

    def cosine(a, b):
        return float(torch.dot(a, b) / (torch.linalg.vector_norm(a)
                                        * torch.linalg.vector_norm(b) + 1e-12))

    target_scores = [cosine(embeddings[t.enroll], embeddings[t.test])
                     for t in trials if t.label == "target"]
    nontarget_scores = [cosine(embeddings[t.enroll], embeddings[t.test])
                        for t in trials if t.label == "nontarget"]
    from ..metrics import eer as compute_eer
    eer_pct = compute_eer(target_scores, nontarget_scores)

    if report_path is not None:
        Path(report_path).write_text(json.dumps({
            "eer_pct": eer_pct,
            "num_target_trials": len(target_scores),
            "num_nontarget_trials": len(nontarget_scores),
            "num_speakers": len(speakers),
            "trained": bool(train_model and config.epochs > 0),
        }, indent=2), encoding="utf-8")
    return eer_pct
