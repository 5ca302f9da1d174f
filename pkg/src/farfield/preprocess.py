"""Session normalization, block-wise WPE dereverberation and channel ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from farfield.audio import MultichannelAudio
from farfield.errors import DataError, NumericalError
from farfield.stft import SpectralTensor, StftParams, stft

_EPS = 1e-30


@dataclass(frozen=True)
class ClipNormConfig:
    """Clip at a percentile of |x|, then rescale to target_peak.

    The defaults clip only rare extreme samples (claps, knocks) while
    leaving speech peaks intact.
    """

    percentile: float = 0.998
    target_peak: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.percentile <= 1.0:
            raise DataError("percentile must be in (0, 1]")
        if not 0.0 < self.target_peak <= 1.0:
            raise DataError("target_peak must be in (0, 1]")


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 2
    iterations: int = 3
    block_length: float = 120.0  # seconds

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1 or self.iterations < 1:
            raise DataError("taps, delay and iterations must be >= 1")
        if self.block_length <= 0:
            raise DataError("block_length must be positive")


@dataclass(frozen=True)
class ChannelRanking:
    scores: np.ndarray  # per channel
    order: np.ndarray  # channel indices, best first

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        order = np.asarray(self.order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(len(scores))):
            raise DataError("order must be a permutation of channel indices")
        if not np.all(np.isfinite(scores)):
            raise DataError("scores must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "order", order)


def clip_normalize(audio: MultichannelAudio, cfg: ClipNormConfig = ClipNormConfig()) -> MultichannelAudio:
    """Per channel: clip to the |x| percentile, then scale the peak to target_peak."""
    out = np.empty_like(audio.samples)
    for c in range(audio.num_channels):
        x = audio.samples[c]
        if not np.any(x):
            out[c] = x
            continue
        threshold = np.quantile(np.abs(x), cfg.percentile)
        if threshold <= 0.0:
            # almost-silent channel dominated by zeros; just rescale the peak
            clipped = x
        else:
            clipped = np.clip(x, -threshold, threshold)
        peak = np.max(np.abs(clipped))
        out[c] = clipped * (cfg.target_peak / peak) if peak > 0 else clipped
    return MultichannelAudio(out, audio.sample_rate)


# ---------------------------------------------------------------------------
# WPE


def _wpe_block(values: np.ndarray, taps: int, delay: int, iterations: int) -> np.ndarray:
    """Iterative multichannel WPE on one block; values is (F, C, T)."""
    n_bins, n_ch, n_frames = values.shape
    if n_frames < taps + delay:
        return values.copy()
    # stacked delayed observations, (F, C*K, T)
    stacked = np.zeros((n_bins, n_ch * taps, n_frames), dtype=values.dtype)
    for k in range(taps):
        d = delay + k
        stacked[:, k * n_ch : (k + 1) * n_ch, d:] = values[:, :, : n_frames - d]
    dereverb = values
    for _ in range(iterations):
        power = np.maximum(np.mean(np.abs(dereverb) ** 2, axis=1), 1e-10)  # (F, T)
        weighted = stacked / power[:, None, :]
        corr = weighted @ stacked.conj().transpose(0, 2, 1)  # (F, CK, CK)
        cross = weighted @ values.conj().transpose(0, 2, 1)  # (F, CK, C)
        load = 1e-10 * np.trace(corr, axis1=1, axis2=2).real / (n_ch * taps)
        corr += (np.maximum(load, 1e-300)[:, None, None]) * np.eye(n_ch * taps)
        try:
            filters = np.linalg.solve(corr, cross)  # (F, CK, C)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("WPE correlation matrix singular after loading") from exc
        prediction = filters.conj().transpose(0, 2, 1) @ stacked
        dereverb = values - prediction
    return dereverb


def wpe_dereverberate(tensor: SpectralTensor, cfg: WpeConfig = WpeConfig()) -> SpectralTensor:
    """Block-wise delayed linear prediction; removes late reverberation per bin."""
    values = tensor.values.transpose(2, 0, 1)  # (F, C, T)
    n_frames = values.shape[2]
    block_frames = max(
        cfg.taps + cfg.delay,
        int(round(cfg.block_length * tensor.sample_rate / tensor.frame_shift)),
    )
    out = np.empty_like(values)
    for start in range(0, n_frames, block_frames):
        stop = min(start + block_frames, n_frames)
        out[:, :, start:stop] = _wpe_block(
            values[:, :, start:stop], cfg.taps, cfg.delay, cfg.iterations
        )
    return SpectralTensor(
        values=out.transpose(1, 2, 0),
        frame_shift=tensor.frame_shift,
        frame_length=tensor.frame_length,
        sample_rate=tensor.sample_rate,
        num_samples=tensor.num_samples,
    )


# ---------------------------------------------------------------------------
# envelope-variance channel ranking


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(num_bands: int, num_bins: int, sample_rate: int,
                   fmin: float = 20.0, fmax: float = 7600.0) -> np.ndarray:
    """Triangular mel filters, (bands, bins)."""
    fmax = min(fmax, sample_rate / 2.0)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), num_bands + 2))
    freqs = np.linspace(0.0, sample_rate / 2.0, num_bins)
    bank = np.zeros((num_bands, num_bins))
    for b in range(num_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - freqs) / max(hi - mid, 1e-12)
        bank[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def envelope_variance_rank(audio: MultichannelAudio, num_bands: int = 40) -> ChannelRanking:
    """Rank channels by subband log-envelope variance (higher = cleaner).

    Reverberation and noise smear temporal envelopes, lowering the variance
    of the log-compressed subband energies. Silent channels score 0 and
    rank last.
    """
    if audio.num_channels < 1:
        raise DataError("need at least one channel")
    params = StftParams(frame_length=512, frame_shift=256, window="hann", padding="center")
    spec = stft(audio, params)
    power = np.abs(spec.values) ** 2  # (C, T, F)
    bank = mel_filterbank(num_bands, spec.num_bins, audio.sample_rate)
    envelopes = np.log(power @ bank.T + _EPS)  # (C, T, B)
    envelopes -= envelopes.mean(axis=1, keepdims=True)
    band_var = envelopes.var(axis=1)  # (C, B)
    silent = ~np.any(audio.samples, axis=1)
    band_var[silent] = 0.0
    band_max = band_var.max(axis=0)  # (B,)
    normalized = np.divide(
        band_var, band_max[None, :], out=np.zeros_like(band_var), where=band_max > 0
    )
    scores = normalized.mean(axis=1)
    scores[silent] = 0.0
    order = np.argsort(-scores, kind="stable")
    return ChannelRanking(scores=scores, order=order)


def select_top_channels(ranking: ChannelRanking, fraction: float) -> list:
    """Keep the ceil(fraction * C) best channels, original indices preserved."""
    if not 0.0 < fraction <= 1.0:
        raise DataError("fraction must be in (0, 1]")
    count = math.ceil(fraction * len(ranking.scores))
    return sorted(int(c) for c in ranking.order[:count])
