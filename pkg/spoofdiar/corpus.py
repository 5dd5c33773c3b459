"""
Synthetic partial-spoof corpus
Feature-level stand-in for a frozen speech front-end: class-conditional
Gaussian frames arranged as alternating bona fide / spoof segments

On-disk layout of a corpus directory:

    corpus.json                 spec echo and vocabulary
    manifest.tsv                utt_id, n_frames, partition
    feats/<utt_id>.feat         16-byte header (magic, T, d_feat) + float32 LE rows
    <partition>.lab             reference labels (label-file format)
    <partition>.mask            speech / nonspeech
    <partition>.concat          concat / plain (frames at bona/spoof joins)
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from spoofdiar.errors import CorpusSpecError
from spoofdiar.timeline import (
    CONCAT,
    DEFAULT_RESOLUTION,
    NONSPEECH,
    SPEECH,
    FrameLabels,
    LabelVocabulary,
    frames_to_text,
    parse_flag_file,
    parse_segments,
    serialize_flags,
    timeline_to_frames,
)

logger = structlog.get_logger(__name__)

PARTITIONS = ("train", "dev", "eval")
FEAT_MAGIC = b"SDFEAT01"
_FEAT_HEADER = struct.Struct("<8sII")
PLAIN = "plain"


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 200
    n_dev: int = 50
    n_eval: int = 50
    n_classes: int = 5
    d_feat: int = 32
    frames_per_utt: Tuple[int, int] = (50, 150)
    segment_len: Tuple[int, int] = (8, 40)
    class_separation: float = 2.0
    noise_std: float = 1.0
    unseen_eval_methods: int = 1
    bona_fraction: float = 0.55
    silence_frames: int = 3
    mark_concat: bool = True
    resolution: float = DEFAULT_RESOLUTION
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frames_per_utt", tuple(int(v) for v in self.frames_per_utt))
        object.__setattr__(self, "segment_len", tuple(int(v) for v in self.segment_len))
        self.validate()

    def validate(self) -> None:
        for name in ("n_train", "n_dev", "n_eval", "d_feat"):
            if getattr(self, name) <= 0:
                raise CorpusSpecError("must be > 0", name)
        if self.n_classes < 2:
            raise CorpusSpecError("need bona plus at least one spoof method", "n_classes")
        if not 0 < self.bona_fraction < 1:
            raise CorpusSpecError("must lie strictly between 0 and 1", "bona_fraction")
        if not 0 <= self.unseen_eval_methods < self.n_classes - 1:
            raise CorpusSpecError("must leave at least one seen spoof method", "unseen_eval_methods")
        if self.d_feat < self.n_classes:
            raise CorpusSpecError("must be >= n_classes for orthogonal class means", "d_feat")
        lo, hi = self.frames_per_utt
        if not 0 < lo <= hi:
            raise CorpusSpecError(f"bad range {self.frames_per_utt}", "frames_per_utt")
        seg_lo, seg_hi = self.segment_len
        if not 0 < seg_lo <= seg_hi:
            raise CorpusSpecError(f"bad range {self.segment_len}", "segment_len")
        if 2 * seg_lo > lo:
            raise CorpusSpecError(
                f"two segments of {seg_lo} frames do not fit in {lo}-frame utterances", "segment_len")
        if self.noise_std < 0:
            raise CorpusSpecError("must be >= 0", "noise_std")
        if self.silence_frames < 0:
            raise CorpusSpecError("must be >= 0", "silence_frames")
        if self.resolution <= 0:
            raise CorpusSpecError("must be > 0", "resolution")
        for T in range(lo, hi + 1):
            plan_segments(T, self)

    @property
    def vocabulary(self) -> LabelVocabulary:
        return LabelVocabulary.standard(self.n_classes, with_concat=True)

    @property
    def n_seen_classes(self) -> int:
        return self.n_classes - self.unseen_eval_methods

    def seen_methods(self) -> List[int]:
        return list(range(1, self.n_seen_classes))

    def eval_methods(self) -> List[int]:
        return list(range(1, self.n_classes))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "CorpusSpec":
        return cls(**data)


@dataclass(eq=False)
class FeatUtterance:
    utt_id: str
    features: np.ndarray
    frame_labels: FrameLabels
    speech_mask: np.ndarray
    concat_mask: np.ndarray

    @property
    def T(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Corpus:
    spec: CorpusSpec
    partitions: Dict[str, List[FeatUtterance]] = field(default_factory=dict)

    @property
    def vocab(self) -> LabelVocabulary:
        return self.spec.vocabulary

    @property
    def train_vocab(self) -> LabelVocabulary:
        """Classes with training data: bona plus the seen methods"""
        return self.vocab.subset(self.spec.n_seen_classes)


def class_means(spec: CorpusSpec) -> np.ndarray:
    """Orthonormal class directions scaled by class_separation, shape (n_classes, d_feat)"""
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    gaussian = rng.standard_normal((spec.d_feat, spec.n_classes))
    q, _ = np.linalg.qr(gaussian)
    return spec.class_separation * q.T


def _segment_count_range(n: int, seg_lo: int, seg_hi: int) -> Tuple[int, int]:
    """Smallest and largest number of segments that split n frames within [seg_lo, seg_hi]"""
    return -(-n // seg_hi), n // seg_lo


def _count_pairs(n_bona: int, n_spoof: int, seg_lo: int, seg_hi: int) -> List[Tuple[int, int]]:
    """(bona, spoof) segment counts that alternate and respect the length bounds"""
    b_lo, b_hi = _segment_count_range(n_bona, seg_lo, seg_hi)
    s_lo, s_hi = _segment_count_range(n_spoof, seg_lo, seg_hi)
    return [(b, s) for s in range(max(s_lo, 1), s_hi + 1)
            for b in (s - 1, s, s + 1) if max(b_lo, 1) <= b <= b_hi]


def plan_segments(T: int, spec: "CorpusSpec") -> Tuple[int, List[Tuple[int, int]]]:
    """Bona frame count nearest the target fraction that admits a valid split, with its count pairs"""
    seg_lo, seg_hi = spec.segment_len
    target = int(np.clip(round(T * spec.bona_fraction), seg_lo, T - seg_lo))
    for n_bona in sorted(range(seg_lo, T - seg_lo + 1), key=lambda n: (abs(n - target), n)):
        pairs = _count_pairs(n_bona, T - n_bona, seg_lo, seg_hi)
        if pairs:
            return n_bona, pairs
    raise CorpusSpecError(f"{T}-frame utterances cannot be split into alternating segments of "
                          f"{seg_lo}..{seg_hi} frames", "segment_len")


def _split_frames(total: int, parts: int, min_len: int, max_len: int,
                  rng: np.random.Generator) -> List[int]:
    extra = total - parts * min_len
    room = max_len - min_len
    lengths = []
    for remaining in range(parts, 0, -1):
        low = max(0, extra - (remaining - 1) * room)
        take = int(rng.integers(low, min(room, extra) + 1))
        lengths.append(min_len + take)
        extra -= take
    return rng.permutation(lengths).tolist()


def generate_utterance(spec: CorpusSpec, rng: np.random.Generator, utt_id: str = "utt",
                       methods: Optional[Sequence[int]] = None,
                       force_method: Optional[int] = None,
                       means: Optional[np.ndarray] = None) -> FeatUtterance:
    """One utterance of alternating bona fide and spoof segments"""
    methods = list(methods) if methods is not None else spec.seen_methods()
    means = class_means(spec) if means is None else means
    seg_lo, seg_hi = spec.segment_len

    T = int(rng.integers(spec.frames_per_utt[0], spec.frames_per_utt[1] + 1))
    n_bona, pairs = plan_segments(T, spec)
    n_spoof = T - n_bona

    wanted = n_spoof / (0.5 * (seg_lo + seg_hi))
    nearest = min(abs(s - wanted) for _, s in pairs)
    choices = [pair for pair in pairs if abs(pair[1] - wanted) == nearest]
    n_bona_segs, n_spoof_segs = choices[int(rng.integers(len(choices)))]
    if n_bona_segs == n_spoof_segs:
        bona_first = bool(rng.random() < 0.5)
    else:
        bona_first = n_bona_segs > n_spoof_segs

    bona_lens = _split_frames(n_bona, n_bona_segs, seg_lo, seg_hi, rng)
    spoof_lens = _split_frames(n_spoof, n_spoof_segs, seg_lo, seg_hi, rng)
    spoof_classes = [int(rng.choice(methods)) for _ in range(n_spoof_segs)]
    if force_method is not None:
        spoof_classes[0] = force_method

    runs: List[Tuple[int, int]] = []
    bona_iter = iter(bona_lens)
    spoof_iter = iter(zip(spoof_lens, spoof_classes))
    take_bona = bona_first
    for _ in range(n_bona_segs + n_spoof_segs):
        if take_bona:
            runs.append((0, next(bona_iter)))
        else:
            length, cls = next(spoof_iter)
            runs.append((cls, length))
        take_bona = not take_bona
    labels = np.concatenate([np.full(length, cls, dtype=np.int64) for cls, length in runs])

    noise = rng.standard_normal((T, spec.d_feat))
    features = means[labels] + spec.noise_std * noise

    concat_mask = np.zeros(T, dtype=bool)
    if spec.mark_concat:
        boundaries = np.flatnonzero(labels[1:] != labels[:-1]) + 1
        concat_mask[boundaries - 1] = True
        concat_mask[boundaries] = True

    speech_mask = np.ones(T, dtype=bool)
    if spec.silence_frames > 0:
        lead = int(rng.integers(0, spec.silence_frames + 1))
        trail = int(rng.integers(0, spec.silence_frames + 1))
        speech_mask[:lead] = False
        if trail:
            speech_mask[T - trail:] = False
        features[~speech_mask] = spec.noise_std * noise[~speech_mask]

    frame_labels = FrameLabels(utt_id, labels, spec.resolution, speech_mask)
    return FeatUtterance(utt_id, features.astype(np.float32), frame_labels, speech_mask, concat_mask)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """train/dev over the seen methods; eval also covers the unseen ones"""
    means = class_means(spec)
    counts = {"train": spec.n_train, "dev": spec.n_dev, "eval": spec.n_eval}
    unseen = list(range(spec.n_seen_classes, spec.n_classes))
    corpus = Corpus(spec)

    for part_index, partition in enumerate(PARTITIONS):
        methods = spec.eval_methods() if partition == "eval" else spec.seen_methods()
        utterances = []
        for i in range(counts[partition]):
            rng = np.random.default_rng([spec.seed, part_index, i])
            force = unseen[i] if partition == "eval" and i < len(unseen) else None
            utterances.append(generate_utterance(
                spec, rng, f"{partition}_{i:05d}", methods, force, means))
        corpus.partitions[partition] = utterances

    for partition, utterances in corpus.partitions.items():
        logger.info("partition_generated", partition=partition, n_utts=len(utterances),
                    bona_fraction=round(bona_fraction(utterances), 4))
    return corpus


def bona_fraction(utterances: Sequence[FeatUtterance]) -> float:
    frames = np.concatenate([u.frame_labels.labels for u in utterances])
    return float(np.mean(frames == 0))


def write_features(path: Path, features: np.ndarray) -> None:
    T, d = features.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, T, d))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _FEAT_HEADER.size:
        raise CorpusSpecError(f"truncated feature file {path}")
    magic, T, d = _FEAT_HEADER.unpack_from(data)
    if magic != FEAT_MAGIC:
        raise CorpusSpecError(f"bad magic {magic!r} in {path}")
    body = np.frombuffer(data, dtype="<f4", offset=_FEAT_HEADER.size)
    if body.size != T * d:
        raise CorpusSpecError(f"{path}: expected {T}x{d} floats, found {body.size}")
    return body.reshape(T, d).astype(np.float32)


def write_corpus(corpus: Corpus, out_dir) -> str:
    """Write every partition to disk; returns the corpus checksum"""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    spec = corpus.spec
    vocab = corpus.vocab

    meta = {"spec": spec.to_dict(), "classes": list(vocab.classes),
            "concat_label": vocab.concat_label,
            "seen_classes": list(corpus.train_vocab.classes)}
    (out_dir / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    rows = ["utt_id\tn_frames\tpartition"]
    for partition in PARTITIONS:
        utterances = corpus.partitions.get(partition, [])
        for utt in utterances:
            write_features(feat_dir / f"{utt.utt_id}.feat", utt.features)
            rows.append(f"{utt.utt_id}\t{utt.T}\t{partition}")
        (out_dir / f"{partition}.lab").write_text(
            frames_to_text([u.frame_labels for u in utterances], vocab))
        (out_dir / f"{partition}.mask").write_text(serialize_flags(
            {u.utt_id: u.speech_mask for u in utterances}, SPEECH, NONSPEECH, spec.resolution))
        (out_dir / f"{partition}.concat").write_text(serialize_flags(
            {u.utt_id: u.concat_mask for u in utterances}, CONCAT, PLAIN, spec.resolution))
    (out_dir / "manifest.tsv").write_text("\n".join(rows) + "\n")

    checksum = corpus_checksum(out_dir)
    logger.info("corpus_written", out_dir=str(out_dir), checksum=checksum)
    return checksum


def corpus_checksum(corpus_dir) -> str:
    """sha256 over every corpus file, in sorted path order"""
    corpus_dir = Path(corpus_dir)
    digest = hashlib.sha256()
    for path in sorted(p for p in corpus_dir.rglob("*") if p.is_file()):
        digest.update(path.relative_to(corpus_dir).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def read_manifest(corpus_dir) -> List[Tuple[str, int, str]]:
    lines = (Path(corpus_dir) / "manifest.tsv").read_text().splitlines()
    entries = []
    for line in lines[1:]:
        if line.strip():
            utt_id, n, partition = line.split("\t")
            entries.append((utt_id, int(n), partition))
    return entries


def load_corpus(corpus_dir, partitions: Sequence[str] = PARTITIONS) -> Corpus:
    corpus_dir = Path(corpus_dir)
    meta = json.loads((corpus_dir / "corpus.json").read_text())
    spec = CorpusSpec.from_dict(meta["spec"])
    vocab = spec.vocabulary
    corpus = Corpus(spec)
    manifest = read_manifest(corpus_dir)

    for partition in partitions:
        timelines = parse_segments((corpus_dir / f"{partition}.lab").read_text(), vocab)
        masks = parse_flag_file((corpus_dir / f"{partition}.mask").read_text(),
                                SPEECH, NONSPEECH, spec.resolution)
        concats = parse_flag_file((corpus_dir / f"{partition}.concat").read_text(),
                                  CONCAT, PLAIN, spec.resolution)
        by_id = {t.utt_id: t for t in timelines}
        utterances = []
        for utt_id, n, part in manifest:
            if part != partition:
                continue
            features = read_features(corpus_dir / "feats" / f"{utt_id}.feat")
            frames = timeline_to_frames(by_id[utt_id], vocab, spec.resolution)
            if frames.T != n or features.shape[0] != n:
                raise CorpusSpecError(f"{utt_id}: manifest says {n} frames, "
                                      f"labels {frames.T}, features {features.shape[0]}")
            frames.mask = masks[utt_id]
            utterances.append(FeatUtterance(utt_id, features, frames, masks[utt_id], concats[utt_id]))
        corpus.partitions[partition] = utterances
        logger.info("partition_loaded", partition=partition, n_utts=len(utterances))
    return corpus
