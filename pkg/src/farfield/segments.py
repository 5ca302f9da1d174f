"""Speaker-labeled segmentations, soft activity matrices, and their file formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from farfield.errors import DataError


@dataclass(frozen=True)
class Turn:
    speaker: str
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise DataError(f"turn start {self.start} must precede end {self.end}")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Segmentation:
    """Speaker turns for one session; turns may overlap across speakers."""

    session_id: str
    turns: tuple = field(default_factory=tuple)

    def __post_init__(self):
        turns = tuple(
            t if isinstance(t, Turn) else Turn(*t) for t in self.turns
        )
        object.__setattr__(self, "turns", turns)

    @property
    def speakers(self) -> list:
        return sorted({t.speaker for t in self.turns})

    @property
    def num_speakers(self) -> int:
        return len({t.speaker for t in self.turns})

    def total_speech(self) -> float:
        return sum(t.duration for t in self.turns)

    def extent(self) -> float:
        return max((t.end for t in self.turns), default=0.0)

    def sorted_turns(self) -> list:
        return sorted(self.turns, key=lambda t: (t.start, t.end, t.speaker))

    def relabeled(self, mapping: dict) -> "Segmentation":
        return Segmentation(
            self.session_id,
            tuple(Turn(mapping.get(t.speaker, t.speaker), t.start, t.end) for t in self.turns),
        )

    def merged_per_speaker(self, gap: float = 0.0) -> "Segmentation":
        """Merge same-speaker turns that touch or are separated by <= gap."""
        merged = []
        for spk in self.speakers:
            spans = sorted((t.start, t.end) for t in self.turns if t.speaker == spk)
            cur_s, cur_e = spans[0]
            for s, e in spans[1:]:
                if s <= cur_e + gap:
                    cur_e = max(cur_e, e)
                else:
                    merged.append(Turn(spk, cur_s, cur_e))
                    cur_s, cur_e = s, e
            merged.append(Turn(spk, cur_s, cur_e))
        return Segmentation(self.session_id, tuple(merged))


@dataclass(frozen=True)
class SoftActivity:
    """Per-speaker, per-frame speech probabilities in [0, 1]."""

    session_id: str
    probs: np.ndarray  # (speakers, frames)
    frame_step: float
    source_tag: str = ""

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise DataError("probs must be (speakers, frames)")
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
            raise DataError("activity probabilities must lie in [0, 1]")
        if self.frame_step <= 0:
            raise DataError("frame_step must be positive")
        object.__setattr__(self, "probs", probs)

    @property
    def num_speakers(self) -> int:
        return self.probs.shape[0]

    @property
    def num_frames(self) -> int:
        return self.probs.shape[1]

    def active_speaker_count(self, threshold: float = 0.5) -> int:
        """Number of speakers with at least one frame at or above threshold."""
        if self.probs.size == 0:
            return 0
        return int(np.sum((self.probs >= threshold).any(axis=1)))


# ---------------------------------------------------------------------------
# boundary utilities


def erode_bounds(seg: Segmentation, margin: float) -> Segmentation:
    """Shrink every turn inward by margin; turns of length <= 2*margin are dropped."""
    if margin < 0:
        raise DataError("margin must be >= 0")
    kept = [
        Turn(t.speaker, t.start + margin, t.end - margin)
        for t in seg.turns
        if t.duration > 2.0 * margin
    ]
    return Segmentation(seg.session_id, tuple(kept))


def extend_segments(seg: Segmentation, margin: float, session_end: float) -> Segmentation:
    """Widen every turn by margin on both sides, clamped to [0, session_end]."""
    if margin < 0:
        raise DataError("margin must be >= 0")
    turns = [
        Turn(t.speaker, max(0.0, t.start - margin), min(session_end, t.end + margin))
        for t in seg.turns
    ]
    return Segmentation(seg.session_id, tuple(turns))


def binarize(activity: SoftActivity, threshold: float = 0.5) -> Segmentation:
    """Threshold a soft activity into turns, one per run of active frames."""
    if not 0.0 < threshold < 1.0:
        raise DataError("threshold must be in (0, 1)")
    turns = []
    step = activity.frame_step
    for s in range(activity.num_speakers):
        active = activity.probs[s] >= threshold
        # run boundaries via diff of padded boolean
        edges = np.flatnonzero(np.diff(np.concatenate(([0], active.view(np.int8), [0]))))
        for i in range(0, len(edges), 2):
            turns.append(Turn(f"spk{s:02d}", edges[i] * step, edges[i + 1] * step))
    return Segmentation(activity.session_id, tuple(turns))


def segmentation_to_activity(
    seg: Segmentation,
    frame_step: float,
    num_frames: int | None = None,
    speakers: list | None = None,
) -> SoftActivity:
    """Rasterize a segmentation into a binary activity matrix."""
    speakers = speakers if speakers is not None else seg.speakers
    if num_frames is None:
        num_frames = int(np.ceil(seg.extent() / frame_step))
    probs = np.zeros((len(speakers), num_frames))
    index = {spk: i for i, spk in enumerate(speakers)}
    for t in seg.turns:
        if t.speaker not in index:
            continue
        i0 = int(np.floor(t.start / frame_step + 0.5))
        i1 = int(np.floor(t.end / frame_step + 0.5))
        probs[index[t.speaker], max(0, i0) : min(num_frames, max(i1, i0 + 1))] = 1.0
    return SoftActivity(seg.session_id, probs, frame_step, source_tag="binarized")


# ---------------------------------------------------------------------------
# RTTM I/O


def write_rttm(path, segs) -> None:
    if isinstance(segs, Segmentation):
        segs = [segs]
    with open(path, "w") as fh:
        for seg in segs:
            for t in seg.sorted_turns():
                fh.write(
                    f"SPEAKER {seg.session_id} 1 {t.start:.3f} {t.duration:.3f} "
                    f"<NA> <NA> {t.speaker} <NA> <NA>\n"
                )


def read_rttm(path) -> dict:
    """Read an RTTM file into {session_id: Segmentation}."""
    by_session = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith(";"):
                continue
            fields = line.split()
            if fields[0] != "SPEAKER" or len(fields) < 8:
                raise DataError(f"{path}:{lineno}: malformed RTTM line")
            session, onset, dur, speaker = fields[1], float(fields[3]), float(fields[4]), fields[7]
            by_session.setdefault(session, []).append(Turn(speaker, onset, onset + dur))
    return {sid: Segmentation(sid, tuple(turns)) for sid, turns in by_session.items()}


# ---------------------------------------------------------------------------
# binary SoftActivity format: "ACT1" header + f32 row-major matrix

_ACT_MAGIC = b"ACT1"


def write_activity(path, activity: SoftActivity) -> None:
    with open(path, "wb") as fh:
        fh.write(_ACT_MAGIC)
        fh.write(struct.pack("<IId", activity.num_speakers, activity.num_frames, activity.frame_step))
        fh.write(activity.probs.astype("<f4").tobytes(order="C"))


def read_activity(path, session_id: str = "", source_tag: str = "") -> SoftActivity:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _ACT_MAGIC:
            raise DataError(f"{path}: not a soft-activity file (bad magic {magic!r})")
        n_spk, n_frames, step = struct.unpack("<IId", fh.read(16))
        payload = fh.read(4 * n_spk * n_frames)
        if len(payload) != 4 * n_spk * n_frames:
            raise DataError(f"{path}: truncated soft-activity payload")
        probs = np.frombuffer(payload, dtype="<f4").reshape(n_spk, n_frames).astype(np.float64)
    return SoftActivity(session_id or str(path), probs, step, source_tag=source_tag or str(path))
