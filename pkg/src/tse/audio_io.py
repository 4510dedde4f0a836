"""Waveform I/O, min-mode mixture simulation, procedural synthetic speakers,
and dataset manifests.

All audio is mono 16 kHz. WAV files are 16-bit PCM; in-memory signals are
float64 in [-1, 1].
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import iirpeak, lfilter

from .errors import (
    ConfigurationError,
    CorruptFileError,
    DegenerateInputError,
    FormatError,
    RangeError,
    ValidationError,
)

SAMPLE_RATE = 16000

# Fields every manifest line must carry, in the order they are written.
MANIFEST_FIELDS = ("id", "mixture", "target", "enrollment", "speaker",
                   "interference_speaker", "snr_db")


@dataclass
class AudioSignal:
    """Mono waveform at 16 kHz, samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FormatError(f"expected mono 1-D samples, got ndim={self.samples.ndim}")
        if self.sample_rate != SAMPLE_RATE:
            raise FormatError(f"sample_rate={self.sample_rate}, expected {SAMPLE_RATE}")
        if len(self.samples) < 1:
            raise FormatError("signal must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise FormatError("signal contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class SpeakerProfile:
    """Low-dimensional identity of a synthetic speaker."""

    speaker_id: str
    f0_hz: float
    formant_centers_hz: list[float]
    seed: int

    def __post_init__(self):
        if not 80.0 <= self.f0_hz <= 300.0:
            raise RangeError(f"f0_hz={self.f0_hz} outside [80, 300]")
        centers = list(self.formant_centers_hz)
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise RangeError("formant centers must be strictly increasing")
        if centers and centers[-1] >= SAMPLE_RATE / 2:
            raise RangeError("formant centers must stay below Nyquist")


@dataclass
class MixResult:
    """Output of :func:`mix_min`: the mixture plus its stored components.

    ``mixture == target + interference`` holds exactly (both components carry
    any joint anti-clipping rescale, recorded in ``rescale``).
    """

    mixture: AudioSignal
    target: AudioSignal
    interference: AudioSignal
    snr_db: float
    rescale: float = 1.0


@dataclass
class ManifestEntry:
    """One dataset sample; paths already resolved against the manifest dir."""

    id: str
    mixture_path: Path
    target_path: Path
    enrollment_path: Path
    speaker: str
    interference_speaker: str
    snr_db: float


def read_wav(path) -> AudioSignal:
    """Read a RIFF/WAVE file (16-bit PCM, mono, 16 kHz) into [-1, 1) floats.

    Raises FormatError for any unsupported property and CorruptFileError when
    the payload is shorter than the header promises.
    """
    path = Path(path)
    try:
        reader = wave.open(str(path), "rb")
    except wave.Error as exc:
        raise FormatError(f"{path}: not a readable WAV file ({exc})") from exc
    except EOFError as exc:
        raise CorruptFileError(f"{path}: truncated WAV header") from exc
    with reader:
        if reader.getnchannels() != 1:
            raise FormatError(f"{path}: channels={reader.getnchannels()}, expected mono")
        if reader.getsampwidth() != 2:
            raise FormatError(
                f"{path}: sample_width_bytes={reader.getsampwidth()}, expected 16-bit PCM")
        if reader.getframerate() != SAMPLE_RATE:
            raise FormatError(f"{path}: sample_rate={reader.getframerate()}, expected {SAMPLE_RATE}")
        if reader.getcomptype() != "NONE":
            raise FormatError(f"{path}: compression={reader.getcomptype()}, expected none")
        n_frames = reader.getnframes()
        if n_frames < 1:
            raise FormatError(f"{path}: frames=0, expected at least one sample")
        raw = reader.readframes(n_frames)
    if len(raw) < 2 * n_frames:
        raise CorruptFileError(
            f"{path}: header declares {n_frames} frames, payload holds {len(raw) // 2}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples)


def write_wav(signal: AudioSignal, path) -> None:
    """Write 16-bit PCM mono 16 kHz. Samples outside [-1, 1] raise RangeError."""
    x = signal.samples
    peak = float(np.max(np.abs(x))) if len(x) else 0.0
    if peak > 1.0:
        raise RangeError(f"sample magnitude {peak:.6g} exceeds 1.0; refusing to clip")
    # Scale 32768 keeps q/32768 -> q round trips bit-exact; +1.0 maps onto 32767.
    q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    try:
        with wave.open(str(path), "wb") as writer:
            writer.setnchannels(1)
            writer.setsampwidth(2)
            writer.setframerate(SAMPLE_RATE)
            writer.writeframes(q.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def mix_min(target: AudioSignal, interference: AudioSignal, snr_db: float) -> MixResult:
    """Min-mode two-speaker mixing at an exact energy SNR.

    Both sources are truncated to the shorter length, the interference is
    rescaled so 10*log10(E_target / E_interference) == snr_db over that span,
    and if the mixture would clip (|mixture| > 0.99) every component is
    rescaled by one common factor so mixture == target + interference stays
    exact.
    """
    n = min(len(target), len(interference))
    t = target.samples[:n].copy()
    i = interference.samples[:n].copy()
    e_t = float(np.dot(t, t))
    e_i = float(np.dot(i, i))
    if e_t <= 0.0 or e_i <= 0.0:
        raise DegenerateInputError("mix_min requires nonsilent target and interference")
    gain = np.sqrt(e_t / (e_i * 10.0 ** (snr_db / 10.0)))
    i *= gain
    mixture = t + i
    rescale = 1.0
    peak = float(np.max(np.abs(mixture)))
    if peak > 0.99:
        rescale = 0.99 / peak
        mixture *= rescale
        t *= rescale
        i *= rescale
    return MixResult(
        mixture=AudioSignal(mixture),
        target=AudioSignal(t),
        interference=AudioSignal(i),
        snr_db=float(snr_db),
        rescale=rescale,
    )


def _formant_filter(x: np.ndarray, centers_hz, rng_unused=None) -> np.ndarray:
    """Cascade of resonant peaks at the profile's formant centers."""
    y = x
    for fc in centers_hz:
        bandwidth = 80.0 + 0.1 * fc
        b, a = iirpeak(fc / (SAMPLE_RATE / 2), fc / bandwidth)
        y = lfilter(b, a, y)
    return y


def synth_utterance(profile: SpeakerProfile, duration_s: float, utterance_seed: int) -> AudioSignal:
    """Deterministic voiced utterance: bandlimited harmonic excitation at the
    profile's f0 with slow random pitch/amplitude modulation, shaped by the
    profile's formant resonances, peak-normalized to 0.9.
    """
    if duration_s < 0.5:
        raise RangeError(f"duration_s={duration_s} below the 0.5 s minimum")
    rng = np.random.default_rng([profile.seed & 0x7FFFFFFF, int(utterance_seed) & 0x7FFFFFFF])
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE

    vib_rate = rng.uniform(2.0, 5.0)
    vib_depth = rng.uniform(0.01, 0.04)
    vib_phase = rng.uniform(0.0, 2 * np.pi)
    drift = rng.uniform(-0.02, 0.02)
    f0_t = profile.f0_hz * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + vib_phase)
                            + drift * t / max(duration_s, 1e-9))
    phase = 2 * np.pi * np.cumsum(f0_t) / SAMPLE_RATE

    # Bandlimited sawtooth-like source: harmonics 1/k up to 0.45 * fs.
    n_harm = max(1, int(0.45 * SAMPLE_RATE / profile.f0_hz))
    excitation = np.zeros(n)
    for k in range(1, n_harm + 1):
        excitation += np.sin(k * phase) / k
    excitation += 0.03 * rng.standard_normal(n)  # aspiration floor

    am_rate = rng.uniform(1.5, 4.0)
    am_phase = rng.uniform(0.0, 2 * np.pi)
    envelope = 0.7 + 0.3 * np.sin(2 * np.pi * am_rate * t + am_phase)
    fade = min(int(0.02 * SAMPLE_RATE), n // 4)
    if fade > 0:
        ramp = np.linspace(0.0, 1.0, fade)
        envelope[:fade] *= ramp
        envelope[-fade:] *= ramp[::-1]

    y = _formant_filter(excitation * envelope, profile.formant_centers_hz)
    peak = float(np.max(np.abs(y)))
    if peak > 0.0:
        y = 0.9 * y / peak
    return AudioSignal(y)


def make_speaker_profiles(num_speakers: int, seed: int) -> list[SpeakerProfile]:
    """Deterministic bank of well-separated synthetic speakers.

    f0 values are spread log-uniformly over [100, 270] Hz with small jitter;
    each speaker gets three formants drawn from disjoint bands.
    """
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x5EED])
    if num_speakers < 1:
        raise ConfigurationError("num_speakers must be >= 1")
    base = np.geomspace(100.0, 270.0, num_speakers)
    profiles = []
    for k in range(num_speakers):
        f0 = float(base[k] * rng.uniform(0.98, 1.02))
        formants = [
            float(rng.uniform(350.0, 800.0)),
            float(rng.uniform(1000.0, 1800.0)),
            float(rng.uniform(2200.0, 3200.0)),
        ]
        profiles.append(SpeakerProfile(
            speaker_id=f"spk{k:02d}",
            f0_hz=f0,
            formant_centers_hz=formants,
            seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return profiles


_SPLIT_NS = {"train": 1, "valid": 2, "test": 3, "sv": 4}


def _utterance_seed(split: str, index: int, role: int) -> int:
    # Collision-free across splits/samples/roles so test utterances are unseen.
    return (_SPLIT_NS[split] << 26) | (index << 2) | role


def build_dataset(num_speakers: int, counts: dict, snr_range, duration_s: float,
                  seed: int, out_dir) -> dict:
    """Simulate a two-speaker TSE corpus and write per-split JSONL manifests.

    counts maps split name ('train'/'valid'/'test') to the number of mixtures.
    Every sample gets a fresh enrollment utterance of the target speaker,
    distinct from the mixed utterance. Returns {split: manifest_path}.
    """
    if num_speakers < 4:
        raise ConfigurationError(
            f"num_speakers={num_speakers} infeasible; at least 4 speakers required")
    lo, hi = float(snr_range[0]), float(snr_range[1])
    if hi < lo:
        raise ConfigurationError(f"snr range [{lo}, {hi}] is inverted")
    if duration_s < 0.5:
        raise ConfigurationError(f"duration_s={duration_s} below the 0.5 s minimum")
    unknown = set(counts) - set(_SPLIT_NS)
    if unknown:
        raise ConfigurationError(f"unknown split names: {sorted(unknown)}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    profiles = make_speaker_profiles(num_speakers, seed)
    with open(out_dir / "speakers.json", "w", encoding="utf-8") as fh:
        json.dump([{"speaker_id": p.speaker_id, "f0_hz": p.f0_hz,
                    "formant_centers_hz": p.formant_centers_hz, "seed": p.seed}
                   for p in profiles], fh, indent=2)

    dur_lo = max(0.5, duration_s / 2.0)
    manifests = {}
    for split in ("train", "valid", "test"):
        count = int(counts.get(split, 0))
        wav_dir = out_dir / "wav" / split
        wav_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for i in range(count):
            rng = np.random.default_rng([seed & 0x7FFFFFFF, _SPLIT_NS[split], i])
            tgt_idx = int(rng.integers(0, num_speakers))
            int_idx = int((tgt_idx + 1 + rng.integers(0, num_speakers - 1)) % num_speakers)
            tgt, itf = profiles[tgt_idx], profiles[int_idx]
            dur_t = float(rng.uniform(dur_lo, duration_s))
            dur_i = float(rng.uniform(dur_lo, duration_s))
            snr = float(rng.uniform(lo, hi))

            target = synth_utterance(tgt, dur_t, _utterance_seed(split, i, 0))
            interference = synth_utterance(itf, dur_i, _utterance_seed(split, i, 1))
            enrollment = synth_utterance(tgt, duration_s, _utterance_seed(split, i, 2))
            mixed = mix_min(target, interference, snr)

            sid = f"{split}-{i:05d}"
            rel = {
                "mixture": f"wav/{split}/{sid}__mix.wav",
                "target": f"wav/{split}/{sid}__target.wav",
                "enrollment": f"wav/{split}/{sid}__enroll.wav",
            }
            write_wav(mixed.mixture, out_dir / rel["mixture"])
            write_wav(mixed.target, out_dir / rel["target"])
            write_wav(enrollment, out_dir / rel["enrollment"])
            lines.append(json.dumps({
                "id": sid,
                "mixture": rel["mixture"],
                "target": rel["target"],
                "enrollment": rel["enrollment"],
                "speaker": tgt.speaker_id,
                "interference_speaker": itf.speaker_id,
                "snr_db": snr,
            }))
        manifest_path = out_dir / f"{split}.jsonl"
        manifest_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        manifests[split] = manifest_path
    return manifests


def load_manifest(path) -> list[ManifestEntry]:
    """Parse and validate a JSONL manifest; errors carry the 1-based line number."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for key in MANIFEST_FIELDS:
                if key not in record:
                    raise ValidationError(f"{path}:{lineno}: missing field '{key}'")
            resolved = {}
            for key in ("mixture", "target", "enrollment"):
                p = base / record[key]
                if not p.is_file():
                    raise ValidationError(f"{path}:{lineno}: missing referenced file {p}")
                resolved[key] = p
            entries.append(ManifestEntry(
                id=str(record["id"]),
                mixture_path=resolved["mixture"],
                target_path=resolved["target"],
                enrollment_path=resolved["enrollment"],
                speaker=str(record["speaker"]),
                interference_speaker=str(record["interference_speaker"]),
                snr_db=float(record["snr_db"]),
            ))
    return entries


@dataclass
class SvUtterance:
    id: str
    path: Path
    speaker: str
    split: str  # train | eval


@dataclass
class SvTrial:
    enroll: str  # utterance id
    test: str
    label: str  # target | nontarget


def build_sv_dataset(num_speakers: int, utts_per_speaker: int, eval_utts: int,
                     duration_s: float, seed: int, out_dir,
                     trials_per_class: int = 200) -> dict:
    """Synthesize a speaker-verification corpus with held-out trial pairs.

    Per speaker, the last ``eval_utts`` utterances form the eval split; trials
    pair eval utterances only (balanced target/nontarget). Returns paths of
    the utterance manifest and the trial list.
    """
    if num_speakers < 8:
        raise ConfigurationError("SV benchmark needs at least 8 speakers")
    if utts_per_speaker < 10:
        raise ConfigurationError("SV benchmark needs at least 10 utterances per speaker")
    if not 0 < eval_utts < utts_per_speaker:
        raise ConfigurationError("eval_utts must leave at least one training utterance")

    out_dir = Path(out_dir)
    profiles = make_speaker_profiles(num_speakers, seed)
    utterances = []
    for s_idx, prof in enumerate(profiles):
        spk_dir = out_dir / "wav" / prof.speaker_id
        spk_dir.mkdir(parents=True, exist_ok=True)
        for u in range(utts_per_speaker):
            useed = _utterance_seed("sv", s_idx * utts_per_speaker + u, 3)
            sig = synth_utterance(prof, duration_s, useed)
            rel = f"wav/{prof.speaker_id}/u{u:03d}.wav"
            write_wav(sig, out_dir / rel)
            utterances.append(SvUtterance(
                id=f"{prof.speaker_id}-u{u:03d}", path=Path(rel),
                speaker=prof.speaker_id,
                split="eval" if u >= utts_per_speaker - eval_utts else "train"))

    manifest_path = out_dir / "sv_utterances.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            fh.write(json.dumps({"id": utt.id, "path": str(utt.path),
                                 "speaker": utt.speaker, "split": utt.split}) + "\n")

    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x7121])
    eval_by_spk = {}
    for utt in utterances:
        if utt.split == "eval":
            eval_by_spk.setdefault(utt.speaker, []).append(utt.id)
    speakers = sorted(eval_by_spk)
    targets, nontargets = [], []
    while len(targets) < trials_per_class:
        spk = speakers[int(rng.integers(0, len(speakers)))]
        a, b = rng.choice(len(eval_by_spk[spk]), size=2, replace=False)
        targets.append(SvTrial(eval_by_spk[spk][a], eval_by_spk[spk][b], "target"))
    while len(nontargets) < trials_per_class:
        sa, sb = rng.choice(len(speakers), size=2, replace=False)
        ua = eval_by_spk[speakers[sa]][int(rng.integers(0, eval_utts))]
        ub = eval_by_spk[speakers[sb]][int(rng.integers(0, eval_utts))]
        nontargets.append(SvTrial(ua, ub, "nontarget"))
    trials_path = out_dir / "trials.jsonl"
    with open(trials_path, "w", encoding="utf-8") as fh:
        for tr in targets + nontargets:
            fh.write(json.dumps({"enroll": tr.enroll, "test": tr.test, "label": tr.label}) + "\n")
    return {"utterances": manifest_path, "trials": trials_path}


def load_sv_dataset(manifest_path) -> list[SvUtterance]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    utterances = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{manifest_path}:{lineno}: invalid JSON ({exc})") from exc
            for key in ("id", "path", "speaker", "split"):
                if key not in rec:
                    raise ValidationError(f"{manifest_path}:{lineno}: missing field '{key}'")
            if rec["split"] not in ("train", "eval"):
                raise ValidationError(f"{manifest_path}:{lineno}: bad split '{rec['split']}'")
            p = base / rec["path"]
            if not p.is_file():
                raise ValidationError(f"{manifest_path}:{lineno}: missing referenced file {p}")
            utterances.append(SvUtterance(id=str(rec["id"]), path=p,
                                          speaker=str(rec["speaker"]), split=str(rec["split"])))
    return utterances


def load_trials(path) -> list[SvTrial]:
    path = Path(path)
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for key in ("enroll", "test", "label"):
                if key not in rec:
                    raise ValidationError(f"{path}:{lineno}: missing field '{key}'")
            if rec["label"] not in ("target", "nontarget"):
                raise ValidationError(f"{path}:{lineno}: bad label '{rec['label']}'")
            trials.append(SvTrial(str(rec["enroll"]), str(rec["test"]), str(rec["label"])))
    if not trials:
        raise ValidationError(f"{path}: empty trial list")
    return trials
