"""
Inference
Bona fide scoring, agglomerative clustering of spoof frames and the
label-based CM constraint (LCM) that keeps localization's bona decisions
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
from sklearn.cluster import AgglomerativeClustering

from spoofdiar.corpus import FeatUtterance
from spoofdiar.errors import ClusteringError, ConfigError, CoverageError, VocabularyError
from spoofdiar.model import ForwardOutputs, SpoofDiarizer, forward
from spoofdiar.timeline import (
    BONA,
    DEFAULT_RESOLUTION,
    FrameLabels,
    LabelVocabulary,
    Segment,
    Timeline,
    _read_records,
    names_to_timeline,
    serialize_timelines,
    timeline_frame_names,
)

logger = structlog.get_logger(__name__)

LINKAGES = ("average", "complete", "single")
CLUSTER_SCOPES = ("spoof_frames", "all_frames")
POOLINGS = ("min", "mean")


@dataclass(frozen=True)
class InferenceConfig:
    threshold: float = 0.5
    linkage: str = "average"
    distance: str = "cosine"
    oracle_k: bool = True
    k_override: Optional[int] = None
    cluster_scope: Optional[str] = None
    pooling: str = "min"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("must lie in (0, 1)", "threshold")
        if self.linkage not in LINKAGES:
            raise ConfigError(f"expected one of {LINKAGES}", "linkage")
        if self.distance != "cosine":
            raise ConfigError("only cosine distance is supported", "distance")
        if self.k_override is not None and self.k_override < 1:
            raise ConfigError("must be >= 1", "k_override")
        if self.cluster_scope is not None and self.cluster_scope not in CLUSTER_SCOPES:
            raise ConfigError(f"expected one of {CLUSTER_SCOPES}", "cluster_scope")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"expected one of {POOLINGS}", "pooling")

    def scope_for(self, architecture: str) -> str:
        """Constrain-then-cluster for the merged model, cluster-then-constrain for dual branch"""
        if self.cluster_scope is not None:
            return self.cluster_scope
        return "all_frames" if architecture == "dual_branch" else "spoof_frames"

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(eq=False)
class DiarizationHypothesis:
    """frame_assignments: 0 for bona fide, 1..k for spoof clusters"""

    utt_id: str
    frame_assignments: np.ndarray
    bona_scores: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return int(self.frame_assignments.size)

    @property
    def n_clusters(self) -> int:
        return int(self.frame_assignments.max(initial=0))

    def label_names(self) -> List[str]:
        return [BONA if c == 0 else f"C{c}" for c in self.frame_assignments.tolist()]


def bona_scores(out: ForwardOutputs) -> np.ndarray:
    """Bona fide score per frame: the bona-token column of P_loc"""
    return out.P_loc[:, 0].detach().cpu().double().numpy()


def _relabel(ids: np.ndarray) -> np.ndarray:
    """Renumber nonzero ids 1..k in order of first appearance; 0 stays 0"""
    ids = np.asarray(ids, dtype=np.int64)
    mapping: Dict[int, int] = {}
    out = np.zeros_like(ids)
    for i, value in enumerate(ids.tolist()):
        if value == 0:
            continue
        if value not in mapping:
            mapping[value] = len(mapping) + 1
        out[i] = mapping[value]
    return out


def cosine_distances(embeddings: np.ndarray) -> np.ndarray:
    X = np.asarray(embeddings, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    Xn = X / norms
    D = np.clip(1.0 - Xn @ Xn.T, 0.0, 2.0)
    np.fill_diagonal(D, 0.0)
    return (D + D.T) / 2.0


def agglomerative_cluster(embeddings: np.ndarray, k: int, linkage: str = "average",
                          distance: str = "cosine") -> np.ndarray:
    """Bottom-up merging on cosine distance, stopped at k clusters; ids 1..k

    Merges are computed by scipy's linkage (through scikit-learn). Equally
    close pairs are merged in scipy's order, which is not guaranteed to be
    the lowest pair index on every tie pattern.
    """
    if distance != "cosine":
        raise ClusteringError(f"unsupported distance '{distance}'")
    if linkage not in LINKAGES:
        raise ClusteringError(f"unsupported linkage '{linkage}'")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if k < 1:
        raise ClusteringError(f"cluster count must be >= 1, got {k}")
    if n < k:
        raise ClusteringError(f"cannot form {k} clusters from {n} embeddings")
    if k == n:
        return np.arange(1, n + 1, dtype=np.int64)
    if k == 1:
        return np.ones(n, dtype=np.int64)

    clusterer = AgglomerativeClustering(n_clusters=k, metric="precomputed", linkage=linkage)
    labels = clusterer.fit_predict(cosine_distances(embeddings))
    return _relabel(labels + 1)


def apply_lcm(cluster_ids: np.ndarray, scores: np.ndarray, threshold: float) -> np.ndarray:
    """Frames scoring >= threshold are bona; the rest take their cluster id, in frame order"""
    scores = np.asarray(scores, dtype=np.float64)
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    spoof_frames = np.flatnonzero(scores < threshold)
    if cluster_ids.size != spoof_frames.size:
        raise CoverageError(f"{cluster_ids.size} cluster ids for {spoof_frames.size} sub-threshold frames")
    if cluster_ids.size and cluster_ids.min() < 1:
        raise CoverageError("cluster ids must be >= 1")
    assignments = np.zeros(scores.size, dtype=np.int64)
    assignments[spoof_frames] = cluster_ids
    return assignments


def reference_k(frames: FrameLabels) -> int:
    """Number of distinct spoof methods on the reference's speech frames"""
    labels = frames.labels[frames.speech_mask()]
    return int(np.unique(labels[labels != 0]).size)


def _normalize_rows(X: np.ndarray) -> np.ndarray:
    return X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)


def _resolve_k(infer_cfg: InferenceConfig, ref_k: Optional[int]) -> int:
    if infer_cfg.k_override is not None:
        return infer_cfg.k_override
    if not infer_cfg.oracle_k:
        raise ConfigError("cluster-count estimation is not available; set k_override or oracle_k",
                          "oracle_k")
    if ref_k is None:
        raise ConfigError("oracle cluster count requested without a reference", "oracle_k")
    return ref_k


def hypothesis_from_outputs(out: ForwardOutputs, utt_id: str, infer_cfg: InferenceConfig,
                            k: int, architecture: str = "merged") -> DiarizationHypothesis:
    scores = bona_scores(out)
    embeddings = _normalize_rows(out.E_prime.detach().cpu().double().numpy())
    spoof = scores < infer_cfg.threshold

    if infer_cfg.scope_for(architecture) == "spoof_frames":
        n_spoof = int(spoof.sum())
        if n_spoof == 0:
            ids = np.zeros(0, dtype=np.int64)
        else:
            ids = agglomerative_cluster(embeddings[spoof], min(max(k, 1), n_spoof),
                                        infer_cfg.linkage, infer_cfg.distance)
        assignments = apply_lcm(ids, scores, infer_cfg.threshold)
    else:
        # one extra cluster absorbs bona fide frames before the constraint
        ids = agglomerative_cluster(embeddings, min(k + 1, len(scores)),
                                    infer_cfg.linkage, infer_cfg.distance)
        assignments = _relabel(np.where(spoof, ids, 0))
    return DiarizationHypothesis(utt_id, assignments, scores)


@torch.no_grad()
def diarize_utterance(model: SpoofDiarizer, infer_cfg: InferenceConfig, utt: FeatUtterance,
                      ref_k: Optional[int] = None) -> DiarizationHypothesis:
    """forward -> bona scores -> cluster sub-threshold E' rows -> LCM"""
    k = _resolve_k(infer_cfg, ref_k)
    model.eval()
    out = forward(model, utt.features)
    return hypothesis_from_outputs(out, utt.utt_id, infer_cfg, k, model.config.architecture)


def diarize_partition(model: SpoofDiarizer, infer_cfg: InferenceConfig,
                      utterances: Sequence[FeatUtterance]) -> List[DiarizationHypothesis]:
    hyps = [diarize_utterance(model, infer_cfg, utt, reference_k(utt.frame_labels)) for utt in utterances]
    logger.info("partition_diarized", n_utts=len(hyps),
                lcm_violations=count_lcm_violations(hyps, infer_cfg.threshold))
    return hyps


def count_lcm_violations(hyps: Sequence[DiarizationHypothesis], threshold: float) -> int:
    """Frames scoring >= threshold that nevertheless carry a cluster label"""
    violations = 0
    for hyp in hyps:
        if hyp.bona_scores is None:
            continue
        violations += int(np.sum((hyp.bona_scores >= threshold) & (hyp.frame_assignments != 0)))
    return violations


def write_hypotheses(hyps: Sequence[DiarizationHypothesis], path,
                     resolution: float = DEFAULT_RESOLUTION) -> None:
    timelines = [names_to_timeline(h.utt_id, h.label_names(), resolution) for h in hyps]
    Path(path).write_text(serialize_timelines(timelines))


def write_scores(hyps: Sequence[DiarizationHypothesis], path) -> None:
    lines = ["utt_id\tframe\tscore"]
    for hyp in hyps:
        for i, score in enumerate(hyp.bona_scores.tolist()):
            lines.append(f"{hyp.utt_id}\t{i}\t{score:.8f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _cluster_index(name: str, line_no: int) -> int:
    if name == BONA:
        return 0
    if name.startswith("C") and name[1:].isdigit() and int(name[1:]) >= 1:
        return int(name[1:])
    raise VocabularyError(f"line {line_no}: hypothesis label must be '{BONA}' or C<k>, got '{name}'")


def parse_hypotheses(text: str, resolution: float = DEFAULT_RESOLUTION,
                     scores: Optional[Dict[str, np.ndarray]] = None) -> List[DiarizationHypothesis]:
    hyps = []
    for group in _read_records(text):
        for rec in group:
            _cluster_index(rec.label, rec.line_no)
        timeline = Timeline(group[0].utt_id, tuple(Segment(r.start, r.end, r.label) for r in group))
        ids = np.array([_cluster_index(n, 0) for n in timeline_frame_names(timeline, resolution)],
                       dtype=np.int64)
        utt_scores = scores.get(timeline.utt_id) if scores else None
        hyps.append(DiarizationHypothesis(timeline.utt_id, ids, utt_scores))
    return hyps


def read_scores(path) -> Dict[str, np.ndarray]:
    rows: Dict[str, List[Tuple[int, float]]] = {}
    for line in Path(path).read_text().splitlines()[1:]:
        if not line.strip():
            continue
        utt_id, frame, score = line.split("\t")
        rows.setdefault(utt_id, []).append((int(frame), float(score)))
    return {utt: np.array([s for _, s in sorted(values)]) for utt, values in rows.items()}


@torch.no_grad()
def dump_embeddings(model: SpoofDiarizer, infer_cfg: InferenceConfig,
                    utterances: Sequence[FeatUtterance], vocab: LabelVocabulary, path) -> int:
    """Per-frame E' rows with reference label and predicted cluster, tab-separated"""
    model.eval()
    dim = model.config.embedding_dim
    lines = ["\t".join([f"e{i}" for i in range(dim)] + ["label", "cluster"])]
    n_rows = 0
    for utt in utterances:
        out = forward(model, utt.features)
        k = _resolve_k(infer_cfg, reference_k(utt.frame_labels))
        hyp = hypothesis_from_outputs(out, utt.utt_id, infer_cfg, k, model.config.architecture)
        embeddings = out.E_prime.detach().cpu().double().numpy()
        for row, label, cluster in zip(embeddings, utt.frame_labels.labels.tolist(), hyp.label_names()):
            lines.append("\t".join([f"{v:.6f}" for v in row] + [vocab.name(label), cluster]))
            n_rows += 1
    Path(path).write_text("\n".join(lines) + "\n")
    logger.info("embeddings_dumped", path=str(path), rows=n_rows, columns=dim + 2)
    return n_rows
