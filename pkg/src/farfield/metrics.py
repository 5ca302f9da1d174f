"""Diarization and separation scoring: DER, speaker-count accuracy, SI-SDR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from farfield.errors import DataError
from farfield.segments import Segmentation

SI_SDR_CAP_DB = 60.0


@dataclass(frozen=True)
class DerBreakdown:
    missed: float
    false_alarm: float
    confusion: float
    total_ref: float

    @property
    def der(self) -> float:
        return (self.missed + self.false_alarm + self.confusion) / self.total_ref


def _regions(ref: Segmentation, hyp: Segmentation, collar: float):
    """Timeline partition with collar exclusion zones around reference boundaries."""
    points = set()
    for t in ref.turns:
        points.update((t.start, t.end))
        if collar > 0:
            points.update((t.start - collar, t.start + collar, t.end - collar, t.end + collar))
    for t in hyp.turns:
        points.update((t.start, t.end))
    points = sorted(p for p in points if p >= 0.0)
    exclusions = []
    if collar > 0:
        for t in ref.turns:
            exclusions.append((t.start - collar, t.start + collar))
            exclusions.append((t.end - collar, t.end + collar))
    for left, right in zip(points[:-1], points[1:]):
        if right - left <= 1e-12:
            continue
        mid = 0.5 * (left + right)
        if any(lo < mid < hi for lo, hi in exclusions):
            continue
        yield left, right, mid


def _active_at(seg: Segmentation, mid: float) -> set:
    return {t.speaker for t in seg.turns if t.start <= mid < t.end}


def optimal_speaker_mapping(ref: Segmentation, hyp: Segmentation, collar: float = 0.0) -> dict:
    """Hypothesis-to-reference label mapping maximizing correctly attributed time."""
    ref_spk, hyp_spk = ref.speakers, hyp.speakers
    matrix = np.zeros((len(hyp_spk), len(ref_spk)))
    ih = {s: i for i, s in enumerate(hyp_spk)}
    ir = {s: i for i, s in enumerate(ref_spk)}
    for left, right, mid in _regions(ref, hyp, collar):
        dur = right - left
        for h in _active_at(hyp, mid):
            for r in _active_at(ref, mid):
                matrix[ih[h], ir[r]] += dur
    rows, cols = linear_sum_assignment(-matrix)
    return {hyp_spk[r]: ref_spk[c] for r, c in zip(rows, cols) if matrix[r, c] > 0}


def compute_der(ref: Segmentation, hyp: Segmentation, collar: float = 0.0) -> DerBreakdown:
    """Overlap-aware diarization error rate with optimal label mapping."""
    if collar < 0:
        raise DataError("collar must be >= 0")
    if not ref.turns:
        raise DataError("empty reference: DER undefined")
    mapping = optimal_speaker_mapping(ref, hyp, collar)
    missed = false_alarm = confusion = total_ref = 0.0
    for left, right, mid in _regions(ref, hyp, collar):
        dur = right - left
        ref_active = _active_at(ref, mid)
        hyp_active = {mapping.get(s, f"__unmapped__{s}") for s in _active_at(hyp, mid)}
        n_ref, n_hyp = len(ref_active), len(hyp_active)
        n_correct = len(ref_active & hyp_active)
        total_ref += dur * n_ref
        missed += dur * max(0, n_ref - n_hyp)
        false_alarm += dur * max(0, n_hyp - n_ref)
        confusion += dur * (min(n_ref, n_hyp) - n_correct)
    if total_ref <= 0:
        raise DataError("reference speech entirely inside collars: DER undefined")
    return DerBreakdown(missed=missed, false_alarm=false_alarm,
                        confusion=confusion, total_ref=total_ref)


def speaker_count_accuracy(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise DataError("need at least one (ref, hyp) count pair")
    return sum(1 for r, h in pairs if r == h) / len(pairs)


def si_sdr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Scale-invariant SDR in dB, capped at 60 dB for (near-)exact matches."""
    estimate = np.asarray(estimate, dtype=np.float64).ravel()
    reference = np.asarray(reference, dtype=np.float64).ravel()
    if estimate.shape != reference.shape:
        raise DataError("estimate and reference must have equal lengths")
    ref_energy = float(np.dot(reference, reference))
    if ref_energy == 0.0:
        raise DataError("zero reference signal")
    scale = float(np.dot(estimate, reference)) / ref_energy
    target = scale * reference
    residual = estimate - target
    num = float(np.dot(target, target))
    den = float(np.dot(residual, residual))
    if den <= num * 10.0 ** (-SI_SDR_CAP_DB / 10.0):
        return SI_SDR_CAP_DB
    if num <= den * 10.0 ** (-SI_SDR_CAP_DB / 10.0):
        return -SI_SDR_CAP_DB
    return 10.0 * np.log10(num / den)
