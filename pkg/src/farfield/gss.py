"""Guided source separation: activity-guided cACGMM masks and MVDR beamforming."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from farfield.audio import MultichannelAudio
from farfield.errors import DataError, NumericalError
from farfield.preprocess import WpeConfig, wpe_dereverberate
from farfield.segments import SoftActivity, Turn
from farfield.stft import SpectralTensor, StftParams, istft, stft

_QUAD_FLOOR = 1e-10


@dataclass(frozen=True)
class GssConfig:
    iterations: int = 5
    context_margin: float = 0.5
    chunk_frames: int | None = None
    add_noise_source: bool = True
    noise_floor: float = 0.01
    wpe_enabled: bool = True
    freeze_priors: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise DataError("iterations must be >= 1")
        if self.chunk_frames is not None and self.chunk_frames < 2:
            raise DataError("chunk_frames must be >= 2")


@dataclass(frozen=True)
class CacgmmState:
    """Per-source spatial shape matrices and time-varying priors."""

    shape_matrices: np.ndarray  # (sources, bins, channels, channels)
    priors: np.ndarray  # (sources, frames)


@dataclass(frozen=True)
class MaskTensor:
    """Posterior source masks, (sources, frames, bins); rows sum to one per (t, f)."""

    gammas: np.ndarray
    ll_history: np.ndarray | None = None  # (bins, evaluations)

    def __post_init__(self):
        object.__setattr__(self, "gammas", np.asarray(self.gammas, dtype=np.float64))

    @property
    def num_sources(self) -> int:
        return self.gammas.shape[0]


def resample_activities(activities: SoftActivity, tensor: SpectralTensor) -> np.ndarray:
    """Nearest-frame resampling of activity rows onto the STFT frame grid."""
    frame_times = np.arange(tensor.num_frames) * tensor.frame_step_seconds
    idx = np.clip(
        np.floor(frame_times / activities.frame_step + 0.5).astype(int),
        0,
        activities.num_frames - 1,
    )
    return activities.probs[:, idx]


def build_priors(speaker_probs: np.ndarray, cfg: GssConfig) -> np.ndarray:
    """Stack speaker activities (+ residual noise source) into normalized priors."""
    if cfg.add_noise_source:
        residual = np.maximum(1.0 - speaker_probs.sum(axis=0), cfg.noise_floor)
        priors = np.vstack([speaker_probs, residual[None, :]])
    else:
        priors = speaker_probs.copy()
    sums = priors.sum(axis=0)
    uniform = np.full(priors.shape[0], 1.0 / priors.shape[0])
    priors = np.where(sums > 0, priors / np.maximum(sums, 1e-300), uniform[:, None])
    return priors


def _em_sweeps(z, valid, priors, iterations):
    """Run cACGMM EM; z is (F, T, C), valid (F, T), priors (S, T)."""
    n_bins, n_frames, n_ch = z.shape
    n_src = priors.shape[0]
    shape_mats = np.broadcast_to(
        np.eye(n_ch, dtype=np.complex128), (n_src, n_bins, n_ch, n_ch)
    ).copy()
    log_priors = np.log(np.maximum(priors, 1e-300))  # (S, T)
    ll_history = np.empty((n_bins, iterations + 1))
    valid_count = np.maximum(valid.sum(axis=1), 1)  # per bin
    gammas = None

    def e_step(mats):
        loaded = mats + 1e-12 * np.eye(n_ch)
        inv = np.linalg.inv(loaded)
        sign, logdet = np.linalg.slogdet(loaded)
        if np.any(sign.real <= 0):
            raise NumericalError("cACGMM shape matrix lost positive definiteness")
        # quadratic form z^H B^-1 z, (S, F, T)
        quad = np.maximum(
            np.einsum("ftc,sfcd,ftd->sft", z.conj(), inv, z).real, _QUAD_FLOOR
        )
        log_density = -logdet[:, :, None] - n_ch * np.log(quad)
        log_joint = log_priors[:, None, :] + log_density  # (S, F, T)
        shift = log_joint.max(axis=0, keepdims=True)
        log_norm = shift[0] + np.log(np.exp(log_joint - shift).sum(axis=0))  # (F, T)
        post = np.exp(log_joint - log_norm[None])
        # zero-energy cells fall back to the prior
        post = np.where(valid[None, :, :], post, priors[:, None, :])
        ll = np.where(valid, log_norm, 0.0).sum(axis=1) / valid_count
        return post, quad, ll

    for it in range(iterations):
        gammas, quad, ll_history[:, it] = e_step(shape_mats)
        weights = gammas * valid[None, :, :] / quad  # (S, F, T)
        mass = np.maximum((gammas * valid[None, :, :]).sum(axis=2), 1e-300)
        numer = np.einsum("sft,ftc,ftd->sfcd", weights, z, z.conj())
        shape_mats = n_ch * numer / mass[:, :, None, None]
        shape_mats = 0.5 * (shape_mats + shape_mats.conj().transpose(0, 1, 3, 2))
        trace = np.einsum("sfcc->sf", shape_mats).real
        shape_mats *= (n_ch / np.maximum(trace, 1e-300))[:, :, None, None]
        shape_mats += 1e-10 * np.eye(n_ch)

    gammas, _, ll_history[:, iterations] = e_step(shape_mats)
    return gammas, shape_mats, ll_history


def cacgmm_em(
    tensor: SpectralTensor, activities: SoftActivity, cfg: GssConfig = GssConfig()
) -> MaskTensor:
    """Estimate per-source time-frequency masks guided by speaker activities.

    Priors come from the activities (plus a residual noise source) and stay
    frozen across EM sweeps; only the spatial shape matrices are re-estimated.
    """
    if tensor.num_channels < 2:
        raise DataError("cACGMM needs at least 2 channels")
    x = tensor.values.transpose(2, 1, 0)  # (F, T, C)
    norms = np.linalg.norm(x, axis=2)
    valid = norms > 0  # (F, T): zero-energy cells pass the prior through
    z = x / np.maximum(norms, 1e-300)[:, :, None]
    z = np.where(valid[:, :, None], z, 1.0 / np.sqrt(tensor.num_channels))
    speaker_probs = resample_activities(activities, tensor)
    priors = build_priors(speaker_probs, cfg)
    gammas, _, ll = _em_sweeps(z, valid, priors, cfg.iterations)
    # (S, F, T) -> (S, T, F)
    return MaskTensor(gammas=gammas.transpose(0, 2, 1), ll_history=ll)


def chunked_cacgmm(
    tensor: SpectralTensor, activities: SoftActivity, cfg: GssConfig
) -> MaskTensor:
    """Run the EM independently on fixed-length chunks and concatenate masks.

    Activity guidance pins source identity, so no permutation handling is
    needed across chunk boundaries.
    """
    if cfg.chunk_frames is None:
        raise DataError("chunk_frames must be set for chunked processing")
    n_frames = tensor.num_frames
    size = cfg.chunk_frames
    if n_frames <= size:
        return cacgmm_em(tensor, activities, cfg)
    starts = list(range(0, n_frames, size))
    # merge a too-short trailing chunk into the previous one
    if n_frames - starts[-1] < 2:
        starts.pop()
    speaker_probs = resample_activities(activities, tensor)
    pieces, lls = [], []
    for i, start in enumerate(starts):
        stop = starts[i + 1] if i + 1 < len(starts) else n_frames
        sub = SpectralTensor(
            values=tensor.values[:, start:stop],
            frame_shift=tensor.frame_shift,
            frame_length=tensor.frame_length,
            sample_rate=tensor.sample_rate,
        )
        sub_act = SoftActivity(
            activities.session_id,
            speaker_probs[:, start:stop],
            tensor.frame_step_seconds,
            activities.source_tag,
        )
        mask = cacgmm_em(sub, sub_act, cfg)
        pieces.append(mask.gammas)
        lls.append(mask.ll_history)
    return MaskTensor(gammas=np.concatenate(pieces, axis=1), ll_history=np.hstack(lls))


def apply_vad_mask(activities: SoftActivity, vad: np.ndarray) -> SoftActivity:
    """Multiply activities elementwise by a binary per-speaker VAD mask."""
    vad = np.asarray(vad, dtype=np.float64)
    if vad.shape != activities.probs.shape:
        raise DataError(
            f"VAD mask shape {vad.shape} does not match activities {activities.probs.shape}"
        )
    return replace(activities, probs=activities.probs * vad)


def mvdr_beamform(
    tensor: SpectralTensor, masks: MaskTensor, target: int, ref_channel: int | None = None
) -> SpectralTensor:
    """Rank-1 Souden MVDR from mask-weighted spatial covariances.

    The reference channel, unless given, maximizes a per-channel output
    SNR proxy summed over bins.
    """
    if not 0 <= target < masks.num_sources:
        raise DataError(f"target source {target} out of range")
    x = tensor.values.transpose(2, 1, 0)  # (F, T, C)
    gamma = masks.gammas[target].T  # (F, T)
    n_ch = tensor.num_channels

    def psd(weights):
        mass = np.maximum(weights.sum(axis=1), 1e-300)
        mat = np.einsum("ft,ftc,ftd->fcd", weights, x, x.conj()) / mass[:, None, None]
        return 0.5 * (mat + mat.conj().transpose(0, 2, 1))

    phi_target = psd(gamma)
    phi_noise = psd(1.0 - gamma)
    load = 1e-8 * np.einsum("fcc->f", phi_noise).real / n_ch
    phi_noise = phi_noise + np.maximum(load, 1e-300)[:, None, None] * np.eye(n_ch)
    try:
        ratio = np.linalg.solve(phi_noise, phi_target)  # (F, C, C)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("noise covariance singular after diagonal loading") from exc
    trace = np.maximum(np.einsum("fcc->f", ratio).real, 1e-300)
    w_all = ratio / trace[:, None, None]  # column r is the beamformer for ref r

    if ref_channel is None:
        snr = np.empty(n_ch)
        for r in range(n_ch):
            w = w_all[:, :, r]
            sig = np.einsum("fc,fcd,fd->f", w.conj(), phi_target, w).real
            noi = np.maximum(np.einsum("fc,fcd,fd->f", w.conj(), phi_noise, w).real, 1e-300)
            snr[r] = float(np.sum(sig / noi))
        ref_channel = int(np.argmax(snr))
    w = w_all[:, :, ref_channel]  # (F, C)
    out = np.einsum("fc,ftc->tf", w.conj(), x)
    return SpectralTensor(
        values=out[None],
        frame_shift=tensor.frame_shift,
        frame_length=tensor.frame_length,
        sample_rate=tensor.sample_rate,
        num_samples=tensor.num_samples,
    )


def extract_speaker_segment(
    audio: MultichannelAudio,
    turn: Turn,
    target: int,
    activities: SoftActivity,
    cfg: GssConfig = GssConfig(),
    stft_params: StftParams = StftParams(),
) -> MultichannelAudio:
    """Extract one speaker's turn: context extension, WPE, guided masks, MVDR.

    target indexes the speaker's row in the session-level activities.
    """
    session_end = audio.duration
    if not (0.0 <= turn.start < turn.end <= session_end + 1e-9):
        raise DataError("turn must lie within the session")
    ext_start = max(0.0, turn.start - cfg.context_margin)
    ext_end = min(session_end, turn.end + cfg.context_margin)
    window = audio.slice_time(ext_start, ext_end)
    tensor = stft(window, stft_params)
    if cfg.wpe_enabled:
        tensor = wpe_dereverberate(
            tensor, WpeConfig(taps=10, delay=2, iterations=1, block_length=1e9)
        )
    # activities for the window, on the window's own frame grid
    frame_times = ext_start + np.arange(tensor.num_frames) * tensor.frame_step_seconds
    idx = np.clip(
        np.floor(frame_times / activities.frame_step + 0.5).astype(int),
        0,
        activities.num_frames - 1,
    )
    window_act = SoftActivity(
        activities.session_id,
        activities.probs[:, idx],
        tensor.frame_step_seconds,
        activities.source_tag,
    )
    if cfg.chunk_frames is not None:
        masks = chunked_cacgmm(tensor, window_act, cfg)
    else:
        masks = cacgmm_em(tensor, window_act, cfg)
    beamformed = mvdr_beamform(tensor, masks, target)
    wave = istft(beamformed, stft_params)
    offset = turn.start - ext_start
    return wave.slice_time(offset, offset + turn.duration)
