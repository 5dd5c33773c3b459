"""
Scoring
JI_bona, JER_spoof with optimal per-utterance cluster-to-attack mapping,
and equal error rates at frame and utterance level

All durations are frame counts; non-speech frames are excluded.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy.optimize import linear_sum_assignment
from tabulate import tabulate

from spoofdiar.errors import ShapeMismatchError, UndefinedMetricError
from spoofdiar.inference import POOLINGS, DiarizationHypothesis
from spoofdiar.timeline import FrameLabels

logger = structlog.get_logger(__name__)

Hypotheses = Union[Sequence[DiarizationHypothesis], Mapping[str, DiarizationHypothesis]]


@dataclass
class LabelCounts:
    fa: int
    md: int
    total: int

    @property
    def error(self) -> float:
        return (self.fa + self.md) / self.total


@dataclass
class UttScore:
    """bona is None when neither reference nor hypothesis has bona frames"""

    utt_id: str
    bona: Optional[LabelCounts]
    attacks: Dict[int, LabelCounts] = field(default_factory=dict)
    mapping: Dict[int, int] = field(default_factory=dict)

    @property
    def jer_sum(self) -> float:
        return sum(c.error for c in self.attacks.values())


@dataclass
class DiarizationReport:
    ji_bona: float
    jer_spoof: float
    n_utts: int
    utt_scores: List[UttScore] = field(default_factory=list)
    eer_frame: Optional[float] = None
    eer_utt: Optional[float] = None
    n_ji_skipped: int = 0

    def summary(self) -> Dict[str, Optional[float]]:
        return {"ji_bona": self.ji_bona, "jer_spoof": self.jer_spoof, "eer_frame": self.eer_frame,
                "eer_utt": self.eer_utt, "n_utts": self.n_utts, "n_ji_skipped": self.n_ji_skipped}


def _assignments(hyp) -> np.ndarray:
    if isinstance(hyp, DiarizationHypothesis):
        return hyp.frame_assignments
    return np.asarray(hyp, dtype=np.int64)


def _masked(ref: FrameLabels, hyp) -> Tuple[np.ndarray, np.ndarray]:
    assignments = _assignments(hyp)
    if assignments.shape != ref.labels.shape:
        raise ShapeMismatchError(
            f"{ref.utt_id}: hypothesis has {assignments.size} frames, reference {ref.T}")
    speech = ref.speech_mask()
    return ref.labels[speech], assignments[speech]


def overlap_matrix(ref_labels: np.ndarray, hyp_ids: np.ndarray) -> Tuple[np.ndarray, List[int], List[int]]:
    """Frame overlaps between hypothesis clusters (rows) and reference attacks (columns)"""
    clusters = sorted(int(c) for c in np.unique(hyp_ids[hyp_ids != 0]))
    attacks = sorted(int(a) for a in np.unique(ref_labels[ref_labels != 0]))
    overlap = np.zeros((len(clusters), len(attacks)), dtype=np.int64)
    for i, c in enumerate(clusters):
        for j, a in enumerate(attacks):
            overlap[i, j] = int(np.sum((hyp_ids == c) & (ref_labels == a)))
    return overlap, clusters, attacks


def map_clusters(ref: FrameLabels, hyp) -> Dict[int, int]:
    """One-to-one cluster -> attack mapping maximizing total overlapped frames"""
    ref_labels, hyp_ids = _masked(ref, hyp)
    overlap, clusters, attacks = overlap_matrix(ref_labels, hyp_ids)
    if overlap.size == 0:
        return {}
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return {clusters[r]: attacks[c] for r, c in zip(rows, cols)}


def score_utterance(ref: FrameLabels, hyp) -> UttScore:
    ref_labels, hyp_ids = _masked(ref, hyp)
    mapping = map_clusters(ref, hyp)

    ref_bona, hyp_bona = ref_labels == 0, hyp_ids == 0
    union = int(np.sum(ref_bona | hyp_bona))
    bona = None
    if union:
        bona = LabelCounts(fa=int(np.sum(hyp_bona & ~ref_bona)),
                           md=int(np.sum(ref_bona & ~hyp_bona)), total=union)

    attack_to_cluster = {a: c for c, a in mapping.items()}
    attacks = {}
    for attack in sorted(int(a) for a in np.unique(ref_labels[ref_labels != 0])):
        in_ref = ref_labels == attack
        cluster = attack_to_cluster.get(attack)
        in_hyp = hyp_ids == cluster if cluster is not None else np.zeros_like(in_ref)
        attacks[attack] = LabelCounts(fa=int(np.sum(in_hyp & ~in_ref)),
                                      md=int(np.sum(in_ref & ~in_hyp)),
                                      total=int(np.sum(in_ref | in_hyp)))
    return UttScore(ref.utt_id, bona, attacks, mapping)


def _pair(refs: Sequence[FrameLabels], hyps: Hypotheses) -> List[Tuple[FrameLabels, object]]:
    if isinstance(hyps, Mapping):
        by_id = dict(hyps)
    else:
        hyps = list(hyps)
        if hyps and not isinstance(hyps[0], DiarizationHypothesis):
            if len(hyps) != len(refs):
                raise ShapeMismatchError(f"{len(hyps)} hypotheses for {len(refs)} references")
            return list(zip(refs, hyps))
        by_id = {h.utt_id: h for h in hyps}
    missing = [r.utt_id for r in refs if r.utt_id not in by_id]
    if missing:
        raise ShapeMismatchError(f"no hypothesis for {len(missing)} utterances, e.g. {missing[0]}")
    return [(r, by_id[r.utt_id]) for r in refs]


def _ji(scores: Sequence[UttScore]) -> Tuple[float, int]:
    terms = [s.bona.error for s in scores if s.bona is not None]
    skipped = len(scores) - len(terms)
    for s in scores:
        if s.bona is None:
            logger.warning("ji_bona_utterance_skipped", utt_id=s.utt_id, reason="empty union")
    return (float(np.mean(terms)) if terms else 0.0), skipped


def _jer(scores: Sequence[UttScore]) -> float:
    n_attacks = sum(len(s.attacks) for s in scores)
    if n_attacks == 0:
        logger.warning("jer_spoof_no_reference_attacks", n_utts=len(scores))
        return 0.0
    return float(sum(s.jer_sum for s in scores) / n_attacks)


def ji_bona(refs: Sequence[FrameLabels], hyps: Hypotheses) -> float:
    """Mean over utterances of (FA_bona + MD_bona) / |ref bona U hyp bona|; 0 is perfect"""
    return _ji([score_utterance(r, h) for r, h in _pair(refs, hyps)])[0]


def jer_spoof(refs: Sequence[FrameLabels], hyps: Hypotheses) -> float:
    """Sum of per-attack Jaccard errors divided by the total number of reference attacks"""
    return _jer([score_utterance(r, h) for r, h in _pair(refs, hyps)])


def eer(scores, labels) -> float:
    """Equal error rate; labels are 1 for the positive (bona fide) class

    frr(t) = P(pos < t), far(t) = P(neg >= t) over t in the unique scores and +inf,
    interpolated linearly at the first operating point where frr >= far.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeMismatchError(f"{scores.size} scores for {labels.size} labels")
    pos, neg = np.sort(scores[labels]), np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("EER needs both positive and negative samples")

    thresholds = np.append(np.unique(scores), np.inf)
    frr = np.searchsorted(pos, thresholds, side="left") / pos.size
    far = 1.0 - np.searchsorted(neg, thresholds, side="left") / neg.size
    diff = frr - far
    i = int(np.argmax(diff >= 0))
    if i == 0 or diff[i] == 0:
        return float((frr[i] + far[i]) / 2.0)
    t = -diff[i - 1] / (diff[i] - diff[i - 1])
    return float(frr[i - 1] + t * (frr[i] - frr[i - 1]))


def _scores_of(ref: FrameLabels, hyp) -> np.ndarray:
    scores = getattr(hyp, "bona_scores", None)
    if scores is None:
        raise UndefinedMetricError(f"{ref.utt_id}: hypothesis carries no bona scores")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != ref.labels.shape:
        raise ShapeMismatchError(f"{ref.utt_id}: {scores.size} scores for {ref.T} frames")
    return scores


def frame_eer(refs: Sequence[FrameLabels], hyps: Hypotheses) -> float:
    all_scores, all_labels = [], []
    for ref, hyp in _pair(refs, hyps):
        speech = ref.speech_mask()
        all_scores.append(_scores_of(ref, hyp)[speech])
        all_labels.append(ref.labels[speech] == 0)
    if not all_scores:
        raise UndefinedMetricError("no utterances to score")
    return eer(np.concatenate(all_scores), np.concatenate(all_labels))


def pool_scores(frame_scores: np.ndarray, pooling: str = "min") -> float:
    if pooling not in POOLINGS:
        raise UndefinedMetricError(f"unknown pooling '{pooling}'")
    if frame_scores.size == 0:
        raise UndefinedMetricError("cannot pool an empty score vector")
    return float(frame_scores.min() if pooling == "min" else frame_scores.mean())


def utterance_eer(refs: Sequence[FrameLabels], hyps: Hypotheses, pooling: str = "min") -> float:
    """An utterance is bona fide iff no speech frame is spoofed"""
    scores, labels = [], []
    for ref, hyp in _pair(refs, hyps):
        speech = ref.speech_mask()
        scores.append(pool_scores(_scores_of(ref, hyp)[speech], pooling))
        labels.append(not np.any(ref.labels[speech] != 0))
    return eer(np.array(scores), np.array(labels))


def _optional_eer(fn, *args) -> Optional[float]:
    try:
        return fn(*args)
    except UndefinedMetricError as e:
        logger.warning("eer_undefined", metric=fn.__name__, reason=str(e))
        return None


def score_corpus(refs: Sequence[FrameLabels], hyps: Hypotheses, with_eer: bool = True,
                 pooling: str = "min") -> DiarizationReport:
    pairs = _pair(refs, hyps)
    utt_scores = [score_utterance(r, h) for r, h in pairs]
    ji, skipped = _ji(utt_scores)
    report = DiarizationReport(ji_bona=ji, jer_spoof=_jer(utt_scores), n_utts=len(utt_scores),
                               utt_scores=utt_scores, n_ji_skipped=skipped)
    if with_eer:
        report.eer_frame = _optional_eer(frame_eer, refs, hyps)
        report.eer_utt = _optional_eer(utterance_eer, refs, hyps, pooling)
    logger.info("corpus_scored", **report.summary())
    return report


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.2f}"


def format_report(report: DiarizationReport, title: str = "") -> str:
    corpus_table = tabulate(
        [["JI_bona (%)", _pct(report.ji_bona)], ["JER_spoof (%)", _pct(report.jer_spoof)],
         ["Frame EER (%)", _pct(report.eer_frame)], ["Utt. EER (%)", _pct(report.eer_utt)],
         ["utterances", report.n_utts], ["JI_bona skipped", report.n_ji_skipped]],
        headers=["metric", "value"], tablefmt="github")
    rows = []
    for s in report.utt_scores:
        rows.append([s.utt_id, "-" if s.bona is None else f"{s.bona.error:.4f}", len(s.attacks),
                     f"{s.jer_sum:.4f}",
                     " ".join(f"C{c}->{a}" for c, a in sorted(s.mapping.items())) or "-"])
    utt_table = tabulate(rows, headers=["utt_id", "ji_bona", "n_attacks", "jer_sum", "mapping"],
                         tablefmt="github")
    header = f"# {title}\n\n" if title else ""
    return f"{header}{corpus_table}\n\n{utt_table}\n"


def write_report(report: DiarizationReport, path, provenance: Optional[Dict] = None,
                 title: str = "") -> None:
    """Text report at path plus a JSON twin at path.json"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report(report, title))
    payload = {
        "metrics": report.summary(),
        "utterances": [
            {"utt_id": s.utt_id,
             "ji_bona": None if s.bona is None else s.bona.error,
             "attacks": {str(a): {"fa": c.fa, "md": c.md, "total": c.total} for a, c in s.attacks.items()},
             "mapping": {str(c): a for c, a in s.mapping.items()}}
            for s in report.utt_scores
        ],
        "provenance": provenance or {},
    }
    Path(f"{path}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
