"""Multichannel far-field speech toolkit.

Classical pipeline for distant multi-microphone recordings: channel
pre-processing and ranking, clustering-based speaker diarization and
counting, hypothesis fusion, guided source separation with MVDR
beamforming, synthetic room/mixture simulation and scoring.
"""

from farfield.audio import MultichannelAudio, read_wav, write_wav
from farfield.stft import SpectralTensor, StftParams, istft, stft

__version__ = "0.1.0"

__all__ = [
    "MultichannelAudio",
    "SpectralTensor",
    "StftParams",
    "read_wav",
    "write_wav",
    "stft",
    "istft",
]
