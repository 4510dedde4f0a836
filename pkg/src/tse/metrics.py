"""Training objectives and evaluation metrics.

SI-SDR (and its negative, the training loss), spectral-domain MSE, SI-SDR
improvement, classic STOI, the below-1-dB failure rate, and EER for trial
scoring. The torch paths are differentiable; numpy entry points return
float64 scalars for reports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import resample_poly

from .audio_io import AudioSignal
from .errors import DegenerateInputError, LengthError, ShapeError, ValidationError

SI_SDR_CAP_DB = 100.0
_EPS_REL = 1e-12  # relative floor on the error power inside the log


def _as_array(signal) -> np.ndarray:
    if isinstance(signal, AudioSignal):
        return signal.samples
    if isinstance(signal, torch.Tensor):
        return signal.detach().cpu().numpy().astype(np.float64)
    return np.asarray(signal, dtype=np.float64)


def si_sdr_loss(estimate: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Negative SI-SDR, differentiable, batched over leading dims.

    Both signals are mean-subtracted; the target projection uses the optimal
    scale; the error power carries a relative 1e-12 floor and the value is
    capped at +100 dB.
    """
    if estimate.shape != reference.shape:
        raise ShapeError(f"estimate {tuple(estimate.shape)} != reference "
                         f"{tuple(reference.shape)}")
    est = estimate - estimate.mean(dim=-1, keepdim=True)
    ref = reference - reference.mean(dim=-1, keepdim=True)
    ref_power = (ref * ref).sum(dim=-1, keepdim=True)
    if torch.any(ref_power == 0):
        raise DegenerateInputError("silent reference signal in SI-SDR")
    alpha = (est * ref).sum(dim=-1, keepdim=True) / ref_power
    target = alpha * ref
    target_power = (target * target).sum(dim=-1)
    error_power = ((target - est) ** 2).sum(dim=-1)
    ratio = target_power / (error_power + _EPS_REL * target_power
                            + torch.finfo(est.dtype).tiny)
    value = 10.0 * torch.log10(ratio)
    return -torch.clamp(value, max=SI_SDR_CAP_DB)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB (float64), capped at +100."""
    est = _as_array(estimate)
    ref = _as_array(reference)
    loss = si_sdr_loss(torch.from_numpy(est), torch.from_numpy(ref))
    return float(-loss.item())


def si_sdri(estimate, reference, mixture) -> float:
    """SI-SDR improvement over the unprocessed mixture, trimmed to the
    shortest common length."""
    est = _as_array(estimate)
    ref = _as_array(reference)
    mix = _as_array(mixture)
    n = min(len(est), len(ref), len(mix))
    return si_sdr(est[:n], ref[:n]) - si_sdr(mix[:n], ref[:n])


def spectral_mse(est_mag, ref_mag):
    """Mean over all T*F entries of the squared magnitude difference.

    Tensor inputs stay tensors (differentiable); array inputs return float.
    """
    if isinstance(est_mag, torch.Tensor) or isinstance(ref_mag, torch.Tensor):
        if est_mag.shape != ref_mag.shape:
            raise ShapeError(f"{tuple(est_mag.shape)} != {tuple(ref_mag.shape)}")
        diff = est_mag - ref_mag
        return (diff * diff).mean()
    a = np.asarray(est_mag, dtype=np.float64)
    b = np.asarray(ref_mag, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} != {b.shape}")
    return float(np.mean((a - b) ** 2))


def failure_rate(si_sdri_values) -> float:
    """Percentage of samples whose SI-SDRi falls strictly below 1 dB."""
    values = list(si_sdri_values)
    if not values:
        raise DegenerateInputError("failure_rate of an empty list")
    failures = sum(1 for v in values if v < 1.0)
    return 100.0 * failures / len(values)


def eer(target_scores, nontarget_scores) -> float:
    """Equal error rate (percent) from raw trial scores.

    Thresholds sweep the midpoints between consecutive distinct scores
    (plus sentinels); FRR(t) = P(target < t), FAR(t) = P(nontarget >= t).
    Where no threshold makes them equal, the crossing is linearly
    interpolated between the two adjacent operating points, which keeps the
    result invariant under strictly increasing score transforms.
    """
    tgt = np.asarray(list(target_scores), dtype=np.float64)
    non = np.asarray(list(nontarget_scores), dtype=np.float64)
    if tgt.size == 0 or non.size == 0:
        raise DegenerateInputError("eer requires nonempty target and nontarget scores")
    pooled = np.unique(np.concatenate([tgt, non]))
    mids = (pooled[:-1] + pooled[1:]) / 2.0 if pooled.size > 1 else np.empty(0)
    thresholds = np.concatenate([[pooled[0] - 1.0], mids, [pooled[-1] + 1.0]])
    frr = np.array([np.mean(tgt < t) for t in thresholds])
    far = np.array([np.mean(non >= t) for t in thresholds])
    for i in range(len(thresholds)):
        if frr[i] >= far[i]:
            if frr[i] == far[i] or i == 0:
                return 100.0 * float(frr[i])
            d1 = far[i - 1] - frr[i - 1]  # > 0
            d2 = frr[i] - far[i]          # > 0
            lam = d1 / (d1 + d2)
            return 100.0 * float(frr[i - 1] + lam * (frr[i] - frr[i - 1]))
    raise AssertionError("EER crossing not found")  # unreachable: sentinels bracket it


# ---------------------------------------------------------------------------
# STOI (classic procedure)
# ---------------------------------------------------------------------------

_STOI_FS = 10000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_NFFT = 512
_STOI_NBANDS = 15
_STOI_MINFREQ = 150.0
_STOI_SEG = 30          # 384 ms at the 10 kHz frame rate
_STOI_DYN_RANGE = 40.0
_STOI_BETA = -15.0


def _stoi_window() -> np.ndarray:
    # Symmetric Hann without the zero endpoints, as in the published procedure.
    return np.hanning(_STOI_FRAME + 2)[1:-1]


def _third_octave_matrix() -> np.ndarray:
    freqs = np.arange(_STOI_NFFT // 2 + 1) * _STOI_FS / _STOI_NFFT
    centers = _STOI_MINFREQ * 2.0 ** (np.arange(_STOI_NBANDS) / 3.0)
    obm = np.zeros((_STOI_NBANDS, freqs.size))
    for j, cf in enumerate(centers):
        lo = np.argmin((freqs - cf / 2 ** (1 / 6)) ** 2)
        hi = np.argmin((freqs - cf * 2 ** (1 / 6)) ** 2)
        obm[j, lo:hi] = 1.0
    return obm


def _frames(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    n = (len(x) - _STOI_FRAME) // _STOI_HOP + 1
    idx = np.arange(_STOI_FRAME)[None, :] + _STOI_HOP * np.arange(n)[:, None]
    return x[idx] * window


def _remove_silent_frames(x: np.ndarray, y: np.ndarray, window: np.ndarray):
    xf = _frames(x, window)
    yf = _frames(y, window)
    energies = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(np.float64).eps)
    keep = energies > energies.max() - _STOI_DYN_RANGE
    xf, yf = xf[keep], yf[keep]
    # Hann at 50% overlap sums to one, so overlap-adding the windowed frames
    # reconstructs the retained signal.
    out_len = (len(xf) - 1) * _STOI_HOP + _STOI_FRAME
    xs = np.zeros(out_len)
    ys = np.zeros(out_len)
    for i in range(len(xf)):
        s = i * _STOI_HOP
        xs[s:s + _STOI_FRAME] += xf[i]
        ys[s:s + _STOI_FRAME] += yf[i]
    return xs, ys


def stoi(estimate, reference) -> float:
    """Short-time objective intelligibility of `estimate` against the clean
    `reference` (classic variant: 10 kHz, 15 one-third-octave bands from
    150 Hz, 384 ms segments, -15 dB clipped normalized correlation)."""
    est = _as_array(estimate)
    ref = _as_array(reference)
    if est.shape != ref.shape:
        raise ShapeError(f"estimate length {len(est)} != reference length {len(ref)}")
    if len(ref) < 8000:  # 0.5 s at 16 kHz
        raise LengthError(f"STOI needs at least 0.5 s of audio, got {len(ref)} samples")

    x = resample_poly(ref, _STOI_FS, 16000)
    y = resample_poly(est, _STOI_FS, 16000)
    window = _stoi_window()
    x, y = _remove_silent_frames(x, y, window)
    if (len(x) - _STOI_FRAME) // _STOI_HOP + 1 < _STOI_SEG:
        raise LengthError("too few active frames for a 384 ms STOI segment")

    xf = _frames(x, window)
    yf = _frames(y, window)
    x_spec = np.abs(np.fft.rfft(xf, n=_STOI_NFFT, axis=1)) ** 2
    y_spec = np.abs(np.fft.rfft(yf, n=_STOI_NFFT, axis=1)) ** 2
    obm = _third_octave_matrix()
    x_bands = np.sqrt(x_spec @ obm.T)  # (frames, bands)
    y_bands = np.sqrt(y_spec @ obm.T)

    eps = np.finfo(np.float64).eps
    clip = 10.0 ** (-_STOI_BETA / 20.0)
    n_frames = x_bands.shape[0]
    correlations = []
    for m in range(_STOI_SEG, n_frames + 1):
        xs = x_bands[m - _STOI_SEG:m].T  # (bands, 30)
        ys = y_bands[m - _STOI_SEG:m].T
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) \
            / (np.linalg.norm(ys, axis=1, keepdims=True) + eps)
        ys_clipped = np.minimum(alpha * ys, xs * (1 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys_clipped - ys_clipped.mean(axis=1, keepdims=True)
        num = (xc * yc).sum(axis=1)
        den = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + eps
        correlations.append(num / den)
    return float(np.mean(correlations))


# ---------------------------------------------------------------------------
# Metric reports
# ---------------------------------------------------------------------------

@dataclass
class SampleMetrics:
    id: str
    si_sdr_mix: float
    si_sdr_est: float
    si_sdri: float
    stoi: float


@dataclass
class MetricReport:
    """Per-sample metrics plus aggregates recomputable from them."""

    per_sample: list[SampleMetrics] = field(default_factory=list)

    @property
    def mean_si_sdri(self) -> float:
        return float(np.mean([s.si_sdri for s in self.per_sample]))

    @property
    def mean_stoi(self) -> float:
        return float(np.mean([s.stoi for s in self.per_sample]))

    @property
    def failure_rate_pct(self) -> float:
        return failure_rate([s.si_sdri for s in self.per_sample])

    def aggregates(self) -> dict:
        return {
            "mean_si_sdri": self.mean_si_sdri,
            "mean_stoi": self.mean_stoi,
            "failure_rate_pct": self.failure_rate_pct,
        }

    def to_dict(self) -> dict:
        return {
            "per_sample": [{"id": s.id, "si_sdr_mix": s.si_sdr_mix,
                            "si_sdr_est": s.si_sdr_est, "si_sdri": s.si_sdri,
                            "stoi": s.stoi} for s in self.per_sample],
            "aggregates": self.aggregates(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricReport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        report = cls(per_sample=[SampleMetrics(**s) for s in data["per_sample"]])
        stored = data.get("aggregates", {})
        fresh = report.aggregates()
        for key, value in stored.items():
            if key in fresh and not np.isclose(value, fresh[key], atol=1e-9):
                raise ValidationError(f"aggregate '{key}' inconsistent with per-sample values")
        return report
