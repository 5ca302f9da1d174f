"""Fusing diarization hypotheses: hard label voting and soft-activity averaging."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from farfield.errors import DataError
from farfield.segments import Segmentation, SoftActivity, Turn, segmentation_to_activity


@dataclass(frozen=True)
class FusionInput:
    hypotheses: tuple
    weights: tuple = ()

    def __post_init__(self):
        hypotheses = tuple(self.hypotheses)
        if not hypotheses:
            raise DataError("need at least one hypothesis")
        weights = tuple(self.weights) if self.weights else (1.0,) * len(hypotheses)
        if len(weights) != len(hypotheses):
            raise DataError("one weight per hypothesis required")
        if any(w <= 0 for w in weights):
            raise DataError("weights must be positive")
        sessions = {h.session_id for h in hypotheses}
        if len(sessions) > 1:
            raise DataError(f"hypotheses span multiple sessions: {sorted(sessions)}")
        object.__setattr__(self, "hypotheses", hypotheses)
        object.__setattr__(self, "weights", weights)


def overlap_duration_matrix(a: Segmentation, b: Segmentation):
    """Total co-active duration for every (speaker of a, speaker of b) pair."""
    spk_a, spk_b = a.speakers, b.speakers
    matrix = np.zeros((len(spk_a), len(spk_b)))
    ia = {s: i for i, s in enumerate(spk_a)}
    ib = {s: i for i, s in enumerate(spk_b)}
    for ta in a.turns:
        for tb in b.turns:
            overlap = min(ta.end, tb.end) - max(ta.start, tb.start)
            if overlap > 0:
                matrix[ia[ta.speaker], ib[tb.speaker]] += overlap
    return matrix, spk_a, spk_b


def map_labels_to_anchor(hyp: Segmentation, anchor: Segmentation, tag: str) -> Segmentation:
    """Relabel hyp speakers into the anchor's label space.

    Max-weight matching on pairwise co-active duration; pairs with zero
    overlap stay unmapped and keep a unique label.
    """
    matrix, spk_h, spk_a = overlap_duration_matrix(hyp, anchor)
    rows, cols = linear_sum_assignment(-matrix)
    mapping = {}
    for r, c in zip(rows, cols):
        if matrix[r, c] > 0:
            mapping[spk_h[r]] = spk_a[c]
    for s in spk_h:
        mapping.setdefault(s, f"{tag}:{s}")
    return hyp.relabeled(mapping)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def doverlap_fuse(fusion_input: FusionInput) -> Segmentation:
    """Rank-weighted label mapping and region voting over diarization hypotheses."""
    hyps = list(fusion_input.hypotheses)
    weights = list(fusion_input.weights)
    if len(hyps) == 1:
        return hyps[0]

    anchor_idx = int(np.argmax(weights))
    anchor = hyps[anchor_idx]
    mapped = []
    for i, hyp in enumerate(hyps):
        if i == anchor_idx:
            mapped.append(hyp)
        else:
            mapped.append(map_labels_to_anchor(hyp, anchor, tag=f"h{i}"))

    boundaries = sorted({t.start for h in mapped for t in h.turns}
                        | {t.end for h in mapped for t in h.turns})
    total_weight = sum(weights)
    region_sets = []
    for left, right in zip(boundaries[:-1], boundaries[1:]):
        mid = 0.5 * (left + right)
        active_sets = [
            {t.speaker for t in h.turns if t.start <= mid < t.end} for h in mapped
        ]
        count = _round_half_up(
            sum(w * len(a) for w, a in zip(weights, active_sets)) / total_weight
        )
        accrued: dict = {}
        for w, active in zip(weights, active_sets):
            for s in active:
                accrued[s] = accrued.get(s, 0.0) + w
        winners = sorted(accrued, key=lambda s: (-accrued[s], s))[:count]
        region_sets.append((left, right, frozenset(winners)))

    turns = []
    open_spans: dict = {}
    previous_end = None
    for left, right, speakers in region_sets:
        if previous_end is not None and left > previous_end + 1e-12:
            for s, start in open_spans.items():
                turns.append(Turn(s, start, previous_end))
            open_spans = {}
        for s in list(open_spans):
            if s not in speakers:
                turns.append(Turn(s, open_spans.pop(s), left))
        for s in speakers:
            open_spans.setdefault(s, left)
        previous_end = right
    for s, start in open_spans.items():
        turns.append(Turn(s, start, previous_end))
    return Segmentation(
        hyps[0].session_id, tuple(sorted(turns, key=lambda t: (t.start, t.speaker)))
    )


def _pearson_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlations between rows; constant rows correlate 0."""
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    corr = a @ b.T
    denom = np.outer(na, nb)
    return np.divide(corr, denom, out=np.zeros_like(corr), where=denom > 0)


def best_permutation(a: SoftActivity, b: SoftActivity) -> np.ndarray:
    """Speaker permutation pi maximizing sum_s corr(a_s, b_pi(s))."""
    if a.num_frames != b.num_frames:
        raise DataError("activities must have equal frame counts")
    pa, pb = a.probs, b.probs
    n = max(a.num_speakers, b.num_speakers)
    if a.num_speakers < n:
        pa = np.vstack([pa, np.zeros((n - a.num_speakers, a.num_frames))])
    if b.num_speakers < n:
        pb = np.vstack([pb, np.zeros((n - b.num_speakers, b.num_frames))])
    corr = _pearson_matrix(pa, pb)
    rows, cols = linear_sum_assignment(-corr)
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return perm


def soft_fuse(activities, reference: Segmentation, threshold: float = 0.5) -> SoftActivity:
    """Average speaker-permuted activities whose speaker count matches the reference.

    Falls back to the reference's own binary activity when every candidate
    is filtered out.
    """
    activities = list(activities)
    if not activities:
        raise DataError("need at least one soft activity")
    ref_count = reference.num_speakers
    survivors = [a for a in activities if a.active_speaker_count(threshold) == ref_count]
    step = survivors[0].frame_step if survivors else activities[0].frame_step
    if not survivors:
        warnings.warn(
            "all soft activities filtered out by speaker count; "
            "falling back to the reference's binary activity",
            stacklevel=2,
        )
        return segmentation_to_activity(reference, step)

    n_frames = max(a.num_frames for a in survivors)
    ref_act = segmentation_to_activity(reference, step, num_frames=n_frames)
    accumulated = np.zeros((max(ref_count, 1), n_frames))
    for act in survivors:
        probs = act.probs
        if act.num_frames < n_frames:
            probs = np.pad(probs, ((0, 0), (0, n_frames - act.num_frames)))
        padded = SoftActivity(act.session_id, probs, step, act.source_tag)
        perm = best_permutation(ref_act, padded)
        aligned = np.zeros((max(ref_count, 1), n_frames))
        for s in range(ref_count):
            src = perm[s]
            if src < padded.num_speakers:
                aligned[s] = padded.probs[src]
        accumulated += aligned
    return SoftActivity(
        reference.session_id, accumulated / len(survivors), step, source_tag="soft-fusion"
    )


def greedy_select_for_fusion(candidates, reference, score_fn, max_keep=None):
    """Forward selection: add the hypothesis that most reduces score_fn(fused, ref).

    score_fn takes (Segmentation, Segmentation) and returns a cost (e.g. DER).
    Returns the list of selected candidate indices in selection order.
    """
    remaining = list(range(len(candidates)))
    selected: list = []
    best_cost = np.inf
    while remaining and (max_keep is None or len(selected) < max_keep):
        costs = []
        for idx in remaining:
            trial = selected + [idx]
            fused = doverlap_fuse(FusionInput(tuple(candidates[i] for i in trial)))
            costs.append(score_fn(fused, reference))
        i_best = int(np.argmin(costs))
        if costs[i_best] >= best_cost:
            break
        best_cost = costs[i_best]
        selected.append(remaining.pop(i_best))
    return selected
