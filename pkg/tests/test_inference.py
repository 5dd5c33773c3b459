import dataclasses
import itertools

import numpy as np
import pytest
import torch

from spoofdiar.corpus import CorpusSpec, generate_utterance
from spoofdiar.errors import ClusteringError, ConfigError, CoverageError, VocabularyError
from spoofdiar.inference import (
    DiarizationHypothesis,
    InferenceConfig,
    agglomerative_cluster,
    apply_lcm,
    bona_scores,
    count_lcm_violations,
    diarize_utterance,
    dump_embeddings,
    hypothesis_from_outputs,
    parse_hypotheses,
    read_scores,
    reference_k,
    write_hypotheses,
    write_scores,
)
from spoofdiar.model import ForwardOutputs, init_model
from spoofdiar.timeline import FrameLabels, LabelVocabulary


def _outputs(P_loc, E_prime) -> ForwardOutputs:
    P_loc = torch.as_tensor(P_loc, dtype=torch.float64)
    E_prime = torch.as_tensor(E_prime, dtype=torch.float64)
    return ForwardOutputs(E=E_prime, E_frames=E_prime, P_loc=P_loc, E_prime=E_prime,
                          P_dia=torch.zeros(len(P_loc), 2))


def _partition(ids):
    groups = {}
    for i, c in enumerate(ids):
        groups.setdefault(int(c), set()).add(i)
    return {frozenset(g) for g in groups.values()}


def _brute_force_cluster(X, k, linkage):
    """Reference bottom-up merging on cosine distance"""
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    D = 1.0 - Xn @ Xn.T
    clusters = [[i] for i in range(len(X))]
    while len(clusters) > k:
        best = None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            pair = D[np.ix_(clusters[a], clusters[b])]
            dist = {"average": pair.mean(), "complete": pair.max(), "single": pair.min()}[linkage]
            if best is None or dist < best[0]:
                best = (dist, a, b)
        _, a, b = best
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    return {frozenset(c) for c in clusters}


def test_bona_scores_read_column_zero():
    out = _outputs([[0.9, 0.1], [0.5, 0.5]], np.eye(2))
    np.testing.assert_allclose(bona_scores(out), [0.9, 0.5])


def test_bona_scores_follow_frame_permutation():
    rng = np.random.default_rng(0)
    p = rng.random(6)
    P_loc = np.stack([p, 1 - p], 1)
    perm = rng.permutation(6)
    np.testing.assert_allclose(bona_scores(_outputs(P_loc[perm], np.eye(6))),
                               bona_scores(_outputs(P_loc, np.eye(6)))[perm])


def test_separated_bundles():
    rng = np.random.default_rng(1)
    a = np.array([1.0, 0.0, 0.0]) + 0.01 * rng.standard_normal((5, 3))
    b = np.array([0.0, 1.0, 0.0]) + 0.01 * rng.standard_normal((4, 3))
    ids = agglomerative_cluster(np.vstack([a, b]), 2)
    assert _partition(ids) == {frozenset(range(5)), frozenset(range(5, 9))}
    assert ids[0] == 1


def test_k_equals_n_gives_singletons():
    ids = agglomerative_cluster(np.random.default_rng(0).standard_normal((4, 3)), 4)
    assert ids.tolist() == [1, 2, 3, 4]


def test_cluster_edge_cases():
    assert agglomerative_cluster(np.zeros((0, 3)), 2).size == 0
    with pytest.raises(ClusteringError):
        agglomerative_cluster(np.ones((2, 3)), 3)
    with pytest.raises(ClusteringError):
        agglomerative_cluster(np.ones((2, 3)), 0)


@pytest.mark.parametrize("linkage", ["average", "complete", "single"])
def test_matches_brute_force_clustering(linkage):
    rng = np.random.default_rng(42)
    for _ in range(15):
        n = int(rng.integers(2, 13))
        k = int(rng.integers(1, n + 1))
        X = rng.standard_normal((n, 4))
        ids = agglomerative_cluster(X, k, linkage)
        assert _partition(ids) == _brute_force_cluster(X, k, linkage)
        assert sorted(set(ids.tolist())) == list(range(1, k + 1))


@pytest.mark.parametrize("linkage", ["average", "complete", "single"])
def test_tied_merges_take_the_lowest_pair(linkage):
    # frames 0-1 and 1-2 are equally close; 0-1 is the lower pair
    X = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    ids = agglomerative_cluster(X, 2, linkage)
    assert _partition(ids) == _brute_force_cluster(X, 2, linkage) == {frozenset({0, 1}), frozenset({2})}


@pytest.mark.parametrize("linkage", ["average", "complete", "single"])
def test_duplicate_rows_match_brute_force(linkage):
    rng = np.random.default_rng(3)
    for _ in range(10):
        base = rng.standard_normal((4, 3))
        X = base[rng.integers(0, 4, size=9)]
        k = int(rng.integers(1, len(np.unique(X, axis=0)) + 1))
        assert _partition(agglomerative_cluster(X, k, linkage)) == _brute_force_cluster(X, k, linkage)


def test_clustering_is_rotation_invariant():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((10, 5))
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    np.testing.assert_array_equal(agglomerative_cluster(X, 3), agglomerative_cluster(X @ Q, 3))


def test_lcm_composition():
    assert apply_lcm(np.array([1, 1]), np.array([0.9, 0.1, 0.1]), 0.5).tolist() == [0, 1, 1]


def test_lcm_all_bona_skips_clustering():
    assert apply_lcm(np.array([], dtype=int), np.array([0.7, 0.5, 0.99]), 0.5).tolist() == [0, 0, 0]


def test_lcm_coverage_mismatch():
    with pytest.raises(CoverageError):
        apply_lcm(np.array([1]), np.array([0.1, 0.2]), 0.5)


def test_threshold_ties_are_bona():
    out = _outputs([[0.5, 0.5], [0.2, 0.8]], [[1.0, 0.0], [0.0, 1.0]])
    hyp = hypothesis_from_outputs(out, "u", InferenceConfig(), k=1)
    assert hyp.frame_assignments.tolist() == [0, 1]


def test_toggling_one_frame_only_changes_that_frame():
    rng = np.random.default_rng(3)
    E = rng.standard_normal((12, 4))
    scores = rng.uniform(0.0, 0.45, size=12)
    config = InferenceConfig(cluster_scope="all_frames")
    base = hypothesis_from_outputs(_outputs(np.stack([scores, 1 - scores], 1), E), "u", config, k=2)
    flipped_scores = scores.copy()
    flipped_scores[5] = 0.9
    flipped = hypothesis_from_outputs(_outputs(np.stack([flipped_scores, 1 - flipped_scores], 1), E),
                                      "u", config, k=2)
    assert flipped.frame_assignments[5] == 0
    others = np.arange(12) != 5
    # clustering over all frames ignores scores, so only the numbering may differ
    assert _partition(base.frame_assignments[others]) == _partition(flipped.frame_assignments[others])


def test_spoof_scope_has_k_clusters_and_contiguous_ids():
    rng = np.random.default_rng(4)
    scores = np.array([0.9, 0.1, 0.2, 0.8, 0.3, 0.1, 0.05])
    E = rng.standard_normal((7, 3))
    hyp = hypothesis_from_outputs(_outputs(np.stack([scores, 1 - scores], 1), E), "u", InferenceConfig(), k=2)
    assert hyp.frame_assignments[[0, 3]].tolist() == [0, 0]
    assert set(hyp.frame_assignments[scores < 0.5].tolist()) == {1, 2}
    assert hyp.frame_assignments[1] == 1


def test_k_capped_by_spoof_frame_count():
    scores = np.array([0.9, 0.1])
    hyp = hypothesis_from_outputs(_outputs(np.stack([scores, 1 - scores], 1), np.eye(2)), "u",
                                  InferenceConfig(), k=3)
    assert hyp.frame_assignments.tolist() == [0, 1]


def test_reference_k_counts_speech_methods():
    frames = FrameLabels("u", [0, 1, 1, 3, 0, 2], mask=[True, True, True, True, True, False])
    assert reference_k(frames) == 2


def _utterance():
    spec = CorpusSpec(n_classes=4, d_feat=8, frames_per_utt=(20, 30), segment_len=(4, 10))
    return generate_utterance(spec, np.random.default_rng(0), "u0", [1, 2])


def test_diarize_utterance_contract(small_model_config):
    model = init_model(small_model_config, 0)
    utt = _utterance()
    config = InferenceConfig()
    hyp = diarize_utterance(model, config, utt, reference_k(utt.frame_labels))
    assert hyp.T == utt.T
    assert count_lcm_violations([hyp], config.threshold) == 0
    again = diarize_utterance(model, config, utt, reference_k(utt.frame_labels))
    np.testing.assert_array_equal(hyp.frame_assignments, again.frame_assignments)
    ids = sorted(set(hyp.frame_assignments.tolist()) - {0})
    assert ids == list(range(1, len(ids) + 1))


def test_oracle_k_requires_reference(small_model_config):
    model = init_model(small_model_config, 0)
    with pytest.raises(ConfigError):
        diarize_utterance(model, InferenceConfig(), _utterance(), None)
    hyp = diarize_utterance(model, InferenceConfig(k_override=1), _utterance(), None)
    assert hyp.n_clusters <= 1


def test_zero_reference_methods_uses_threshold_only(small_model_config):
    model = init_model(small_model_config, 0)
    utt = _utterance()
    hyp = diarize_utterance(model, InferenceConfig(), utt, ref_k=0)
    scores = hyp.bona_scores
    assert ((hyp.frame_assignments == 0) == (scores >= 0.5)).all()
    assert hyp.n_clusters <= 1


def test_dual_branch_default_scope(small_model_config):
    config = dataclasses.replace(small_model_config, architecture="dual_branch")
    model = init_model(config, 0)
    utt = _utterance()
    hyp = diarize_utterance(model, InferenceConfig(), utt, reference_k(utt.frame_labels))
    assert count_lcm_violations([hyp], 0.5) == 0
    assert InferenceConfig().scope_for("dual_branch") == "all_frames"
    assert InferenceConfig().scope_for("merged") == "spoof_frames"


def test_inference_config_validation():
    with pytest.raises(ConfigError):
        InferenceConfig(threshold=1.0)
    with pytest.raises(ConfigError):
        InferenceConfig(k_override=0)
    with pytest.raises(ConfigError):
        InferenceConfig(linkage="ward")


def test_hypothesis_files_round_trip(tmp_path):
    hyps = [DiarizationHypothesis("u1", np.array([0, 0, 1, 1, 2]), np.array([0.9, 0.8, 0.1, 0.2, 0.3])),
            DiarizationHypothesis("u2", np.array([1, 0]), np.array([0.4, 0.6]))]
    write_hypotheses(hyps, tmp_path / "h.lab")
    write_scores(hyps, tmp_path / "h.scores.tsv")
    assert (tmp_path / "h.lab").read_text().splitlines()[:3] == [
        "u1 0.00 0.04 bona", "u1 0.04 0.08 C1", "u1 0.08 0.10 C2"]
    scores = read_scores(tmp_path / "h.scores.tsv")
    parsed = parse_hypotheses((tmp_path / "h.lab").read_text(), 0.02, scores)
    for original, back in zip(hyps, parsed):
        np.testing.assert_array_equal(original.frame_assignments, back.frame_assignments)
        np.testing.assert_allclose(original.bona_scores, back.bona_scores)


def test_hypothesis_labels_validated():
    with pytest.raises(VocabularyError):
        parse_hypotheses("u1 0.00 0.04 A1\n")


def test_embedding_dump(tmp_path, small_model_config):
    model = init_model(small_model_config, 0)
    spec = CorpusSpec(n_classes=4, d_feat=8, frames_per_utt=(10, 10), segment_len=(4, 6))
    utts = [generate_utterance(spec, np.random.default_rng(i), f"u{i}", [1, 2]) for i in range(3)]
    vocab = LabelVocabulary.standard(4)
    path = tmp_path / "emb.tsv"
    n_rows = dump_embeddings(model, InferenceConfig(), utts, vocab, path)
    lines = path.read_text().splitlines()
    assert n_rows == 30
    assert len(lines) == 31
    assert all(len(line.split("\t")) == 2 * small_model_config.d + 2 for line in lines)
    first = path.read_text()
    dump_embeddings(model, InferenceConfig(), utts, vocab, path)
    assert path.read_text() == first
