"""
Label timelines
Segment and frame representations of bona fide / spoof-method labels

Label file format (UTF-8, one segment per line, grouped by utterance):

    <utt_id> <start_sec> <end_sec> <label>

Times are plain decimals with at least two digits after the point.

Anything after ``#`` is a comment. The same line format is reused for the
speech/non-speech mask files and the concat-boundary files.
"""

import math
import re
from bisect import bisect_right
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from spoofdiar.errors import LabelParseError, TimelineValidationError, VocabularyError

logger = structlog.get_logger(__name__)

BONA = "bona"
CONCAT = "concat"
SPEECH = "speech"
NONSPEECH = "nonspeech"
DEFAULT_RESOLUTION = 0.02

# Boundary comparisons on parsed decimal times
_TIME_TOL = 1e-9
_TIME_FORMAT = re.compile(r"[0-9]+\.[0-9]{2,}")


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered class names; index 0 is always bona fide"""

    classes: Tuple[str, ...]
    concat_label: Optional[str] = None

    def __post_init__(self):
        classes = tuple(self.classes)
        object.__setattr__(self, "classes", classes)
        if len(classes) < 2:
            raise VocabularyError(f"need at least 2 classes, got {len(classes)}")
        if classes[0] != BONA:
            raise VocabularyError(f"class 0 must be '{BONA}', got '{classes[0]}'")
        if len(set(classes)) != len(classes):
            raise VocabularyError(f"duplicate class names in {classes}")
        if self.concat_label is not None and self.concat_label in classes:
            raise VocabularyError(f"concat label '{self.concat_label}' collides with a class")

    @classmethod
    def standard(cls, n_classes: int, with_concat: bool = True) -> "LabelVocabulary":
        """bona, A1 .. A{n_classes-1}, plus the optional concat marker"""
        classes = (BONA,) + tuple(f"A{i}" for i in range(1, n_classes))
        return cls(classes, CONCAT if with_concat else None)

    @property
    def L(self) -> int:
        return len(self.classes)

    @property
    def methods(self) -> Tuple[str, ...]:
        return self.classes[1:]

    @property
    def labels(self) -> Tuple[str, ...]:
        """Every label a label file may carry"""
        if self.concat_label is None:
            return self.classes
        return self.classes + (self.concat_label,)

    @property
    def concat_index(self) -> Optional[int]:
        return None if self.concat_label is None else self.L

    def index(self, name: str) -> int:
        if name in self.classes:
            return self.classes.index(name)
        if self.concat_label is not None and name == self.concat_label:
            return self.L
        raise VocabularyError(f"unknown label '{name}'")

    def name(self, index: int) -> str:
        if 0 <= index < self.L:
            return self.classes[index]
        if self.concat_label is not None and index == self.L:
            return self.concat_label
        raise VocabularyError(f"label index {index} out of range for {self.L} classes")

    def subset(self, n_classes: int) -> "LabelVocabulary":
        """Vocabulary restricted to the first n_classes classes"""
        if not 2 <= n_classes <= self.L:
            raise VocabularyError(f"cannot take {n_classes} of {self.L} classes")
        return LabelVocabulary(self.classes[:n_classes], self.concat_label)


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    label: str

    def __post_init__(self):
        if self.start < 0:
            raise TimelineValidationError(f"segment starts before 0: {self.start}")
        if not self.end > self.start:
            raise TimelineValidationError(f"segment end {self.end} <= start {self.start}")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Timeline:
    """Ordered, gap-free, non-overlapping segments of one utterance"""

    utt_id: str
    segments: Tuple[Segment, ...]

    def __post_init__(self):
        segments = tuple(self.segments)
        object.__setattr__(self, "segments", segments)
        if not segments:
            raise TimelineValidationError(f"{self.utt_id}: timeline has no segments")
        if abs(segments[0].start) > _TIME_TOL:
            raise TimelineValidationError(
                f"{self.utt_id}: first segment starts at {segments[0].start}, expected 0")
        for prev, cur in zip(segments, segments[1:]):
            if cur.start > prev.end + _TIME_TOL:
                raise TimelineValidationError(
                    f"{self.utt_id}: gap between {prev.end} and {cur.start}")
            if cur.start < prev.end - _TIME_TOL:
                raise TimelineValidationError(
                    f"{self.utt_id}: overlap at {cur.start} (previous segment ends {prev.end})")

    @property
    def duration(self) -> float:
        return self.segments[-1].end


@dataclass(eq=False)
class FrameLabels:
    """Per-frame class indices at a fixed resolution, with an optional speech mask"""

    utt_id: str
    labels: np.ndarray
    resolution: float = DEFAULT_RESOLUTION
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.labels.shape:
                raise TimelineValidationError(
                    f"{self.utt_id}: mask length {self.mask.size} != {self.labels.size} frames")

    @property
    def T(self) -> int:
        return int(self.labels.size)

    def speech_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.T, dtype=bool)
        return self.mask


@dataclass
class _Record:
    line_no: int
    utt_id: str
    start: float
    end: float
    label: str


def _read_records(text: str) -> List[List[_Record]]:
    """Split label-file text into per-utterance record groups"""
    groups: List[List[_Record]] = []
    seen = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise LabelParseError(f"expected 4 fields, got {len(fields)}", line_no)
        utt_id, start_txt, end_txt, label = fields
        for text_value in (start_txt, end_txt):
            if not _TIME_FORMAT.fullmatch(text_value):
                raise LabelParseError(f"bad time '{text_value}': expected a decimal with at least "
                                      f"2 places", line_no)
        start, end = float(start_txt), float(end_txt)
        if end <= start:
            raise LabelParseError(f"invalid interval [{start_txt}, {end_txt}]", line_no)

        if groups and groups[-1][0].utt_id == utt_id:
            groups[-1].append(_Record(line_no, utt_id, start, end, label))
            continue
        if utt_id in seen:
            raise LabelParseError(f"lines of utterance '{utt_id}' are not grouped", line_no)
        seen.add(utt_id)
        groups.append([_Record(line_no, utt_id, start, end, label)])
    return groups


def parse_segments(text: str, vocab: LabelVocabulary) -> List[Timeline]:
    """Parse label-file content into validated timelines, one per utterance"""
    timelines = []
    for group in _read_records(text):
        segments = []
        for rec in group:
            if rec.label not in vocab.labels:
                raise VocabularyError(f"line {rec.line_no}: unknown label '{rec.label}'")
            segments.append(Segment(rec.start, rec.end, rec.label))
        timelines.append(Timeline(group[0].utt_id, tuple(segments)))
    return timelines


def serialize_timelines(timelines: Iterable[Timeline], decimals: int = 2) -> str:
    """Canonical label-file text for a sequence of timelines"""
    decimals = max(2, decimals)
    lines = []
    for timeline in timelines:
        for seg in timeline.segments:
            lines.append(f"{timeline.utt_id} {seg.start:.{decimals}f} {seg.end:.{decimals}f} {seg.label}")
    return "\n".join(lines) + ("\n" if lines else "")


def n_frames(duration: float, resolution: float) -> int:
    return int(math.ceil(duration / resolution - _TIME_TOL))


def timeline_to_frames(timeline: Timeline, vocab: LabelVocabulary,
                       resolution: float = DEFAULT_RESOLUTION) -> FrameLabels:
    """Label frame i with the segment covering its midpoint (i + 0.5) * resolution

    A midpoint falling exactly on a boundary belongs to the segment starting there.
    """
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    starts = [seg.start for seg in timeline.segments]
    indices = [vocab.index(seg.label) for seg in timeline.segments]
    T = n_frames(timeline.duration, resolution)
    labels = np.empty(T, dtype=np.int64)
    for i in range(T):
        midpoint = (i + 0.5) * resolution
        pos = bisect_right(starts, midpoint + _TIME_TOL) - 1
        labels[i] = indices[min(max(pos, 0), len(indices) - 1)]
    return FrameLabels(timeline.utt_id, labels, resolution)


def _runs(values: Sequence) -> List[Tuple[int, int, object]]:
    """Maximal runs of equal values as (start, stop, value)"""
    runs = []
    start = 0
    for i in range(1, len(values) + 1):
        if i == len(values) or values[i] != values[start]:
            runs.append((start, i, values[start]))
            start = i
    return runs


def _frame_time(k: int, resolution: float) -> float:
    return round(k * resolution, 9)


def frames_to_timeline(frames: FrameLabels, vocab: LabelVocabulary) -> Timeline:
    """Merge runs of equal labels into segments with boundaries at k * resolution"""
    if frames.T == 0:
        raise TimelineValidationError(f"{frames.utt_id}: no frames")
    segments = [
        Segment(_frame_time(start, frames.resolution), _frame_time(stop, frames.resolution),
                vocab.name(int(value)))
        for start, stop, value in _runs(frames.labels.tolist())
    ]
    return Timeline(frames.utt_id, tuple(segments))


def names_to_timeline(utt_id: str, names: Sequence[str], resolution: float) -> Timeline:
    """Timeline from per-frame label names (hypotheses, masks)"""
    if not names:
        raise TimelineValidationError(f"{utt_id}: no frames")
    segments = [
        Segment(_frame_time(start, resolution), _frame_time(stop, resolution), value)
        for start, stop, value in _runs(list(names))
    ]
    return Timeline(utt_id, tuple(segments))


def timeline_frame_names(timeline: Timeline, resolution: float) -> List[str]:
    """Per-frame label names using the midpoint rule, no vocabulary needed"""
    starts = [seg.start for seg in timeline.segments]
    names = []
    for i in range(n_frames(timeline.duration, resolution)):
        pos = bisect_right(starts, (i + 0.5) * resolution + _TIME_TOL) - 1
        names.append(timeline.segments[min(max(pos, 0), len(starts) - 1)].label)
    return names


def parse_flag_file(text: str, true_label: str, false_label: str,
                    resolution: float = DEFAULT_RESOLUTION) -> Dict[str, np.ndarray]:
    """Parse a two-valued side file (speech mask, concat marks) into boolean frame arrays"""
    flags = {}
    for group in _read_records(text):
        for rec in group:
            if rec.label not in (true_label, false_label):
                raise VocabularyError(
                    f"line {rec.line_no}: expected '{true_label}' or '{false_label}', got '{rec.label}'")
        timeline = Timeline(group[0].utt_id, tuple(Segment(r.start, r.end, r.label) for r in group))
        names = timeline_frame_names(timeline, resolution)
        flags[timeline.utt_id] = np.array([name == true_label for name in names], dtype=bool)
    return flags


def serialize_flags(flags: Dict[str, np.ndarray], true_label: str, false_label: str,
                    resolution: float = DEFAULT_RESOLUTION) -> str:
    timelines = [
        names_to_timeline(utt_id, [true_label if v else false_label for v in values], resolution)
        for utt_id, values in flags.items()
    ]
    return serialize_timelines(timelines, decimals=_decimals_for(resolution))


def parse_mask(text: str, resolution: float = DEFAULT_RESOLUTION) -> Dict[str, np.ndarray]:
    return parse_flag_file(text, SPEECH, NONSPEECH, resolution)


def _decimals_for(resolution: float) -> int:
    """Smallest decimal count (at least 2) that represents k * resolution exactly"""
    for decimals in range(2, 10):
        if abs(round(resolution, decimals) - resolution) < _TIME_TOL:
            return decimals
    return 9


def frames_to_text(frames: Iterable[FrameLabels], vocab: LabelVocabulary) -> str:
    frames = list(frames)
    decimals = _decimals_for(frames[0].resolution) if frames else 2
    return serialize_timelines((frames_to_timeline(f, vocab) for f in frames), decimals)
