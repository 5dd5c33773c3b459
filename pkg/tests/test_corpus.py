import numpy as np
import pytest

from spoofdiar.corpus import (
    CorpusSpec,
    bona_fraction,
    class_means,
    corpus_checksum,
    generate_corpus,
    generate_utterance,
    load_corpus,
    read_features,
    read_manifest,
    write_corpus,
    write_features,
)
from spoofdiar.errors import CorpusSpecError


def test_zero_noise_frames_equal_class_means():
    spec = CorpusSpec(n_classes=2, unseen_eval_methods=0, noise_std=0.0, silence_frames=0, d_feat=8)
    utt = generate_utterance(spec, np.random.default_rng(0))
    means = class_means(spec).astype(np.float32)
    np.testing.assert_array_equal(utt.features, means[utt.frame_labels.labels])


def test_same_seed_gives_identical_utterance():
    spec = CorpusSpec()
    a = generate_utterance(spec, np.random.default_rng([0, 1, 2]))
    b = generate_utterance(spec, np.random.default_rng([0, 1, 2]))
    assert a.features.tobytes() == b.features.tobytes()
    np.testing.assert_array_equal(a.frame_labels.labels, b.frame_labels.labels)
    np.testing.assert_array_equal(a.speech_mask, b.speech_mask)


def test_nearest_centroid_is_perfect_for_separated_classes():
    spec = CorpusSpec(class_separation=10.0, noise_std=0.1, silence_frames=0)
    means = class_means(spec)
    rng = np.random.default_rng(5)
    feats, labels = [], []
    while sum(len(lab) for lab in labels) < 1000:
        utt = generate_utterance(spec, rng)
        feats.append(utt.features)
        labels.append(utt.frame_labels.labels)
    X, y = np.concatenate(feats), np.concatenate(labels)
    distances = ((X[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    assert np.mean(distances.argmin(1) == y) == 1.0


def test_class_means_are_distinct_and_scaled():
    spec = CorpusSpec(class_separation=3.0)
    means = class_means(spec)
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), 3.0)
    gram = means @ means.T
    np.testing.assert_allclose(gram - np.diag(np.diag(gram)), 0.0, atol=1e-9)


def test_unseen_method_only_in_eval():
    spec = CorpusSpec(n_train=40, n_dev=10, n_eval=10, n_classes=5, unseen_eval_methods=1)
    corpus = generate_corpus(spec)
    train_labels = set(np.concatenate([u.frame_labels.labels for u in corpus.partitions["train"]]).tolist())
    eval_labels = set(np.concatenate([u.frame_labels.labels for u in corpus.partitions["eval"]]).tolist())
    assert train_labels <= {0, 1, 2, 3}
    assert 4 not in train_labels
    assert 4 in eval_labels
    assert corpus.train_vocab.classes == ("bona", "A1", "A2", "A3")


def test_bona_fraction_close_to_target():
    corpus = generate_corpus(CorpusSpec(n_train=100, n_dev=5, n_eval=5))
    assert 0.50 <= bona_fraction(corpus.partitions["train"]) <= 0.60


def test_concat_marks_surround_boundaries():
    utt = generate_utterance(CorpusSpec(), np.random.default_rng(11))
    labels = utt.frame_labels.labels
    boundaries = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    assert boundaries.size > 0
    expected = np.zeros_like(utt.concat_mask)
    expected[boundaries] = True
    expected[boundaries - 1] = True
    np.testing.assert_array_equal(utt.concat_mask, expected)


def test_every_utterance_has_bona_and_spoof():
    corpus = generate_corpus(CorpusSpec(n_train=30, n_dev=5, n_eval=5))
    for utt in corpus.partitions["train"]:
        labels = utt.frame_labels.labels
        assert (labels == 0).any() and (labels != 0).any()
        assert utt.features.shape == (utt.T, 32)
        assert utt.speech_mask.shape == (utt.T,)


@pytest.mark.parametrize("overrides, field", [
    ({"n_train": 0}, "n_train"),
    ({"bona_fraction": 1.0}, "bona_fraction"),
    ({"unseen_eval_methods": 4}, "unseen_eval_methods"),
    ({"frames_per_utt": (10, 12), "segment_len": (8, 12)}, "segment_len"),
])
def test_invalid_specs_name_the_field(overrides, field):
    with pytest.raises(CorpusSpecError) as info:
        CorpusSpec(**overrides)
    assert info.value.field == field


def test_feature_file_layout(tmp_path):
    features = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = tmp_path / "x.feat"
    write_features(path, features)
    raw = path.read_bytes()
    assert raw[:8] == b"SDFEAT01"
    assert len(raw) == 16 + 12 * 4
    np.testing.assert_array_equal(read_features(path), features)


def test_corpus_on_disk(tmp_path, tiny_spec, tiny_corpus):
    checksum = write_corpus(tiny_corpus, tmp_path / "c")
    manifest = read_manifest(tmp_path / "c")
    assert len([m for m in manifest if m[2] == "eval"]) == tiny_spec.n_eval
    assert {m[2] for m in manifest} == {"train", "dev", "eval"}

    loaded = load_corpus(tmp_path / "c")
    for partition, utterances in tiny_corpus.partitions.items():
        for original, reloaded in zip(utterances, loaded.partitions[partition]):
            assert original.utt_id == reloaded.utt_id
            np.testing.assert_array_equal(original.features, reloaded.features)
            np.testing.assert_array_equal(original.frame_labels.labels, reloaded.frame_labels.labels)
            np.testing.assert_array_equal(original.speech_mask, reloaded.speech_mask)
            np.testing.assert_array_equal(original.concat_mask, reloaded.concat_mask)

    write_corpus(generate_corpus(tiny_spec), tmp_path / "again")
    assert corpus_checksum(tmp_path / "again") == checksum


def _run_lengths(labels):
    boundaries = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    return np.diff(np.concatenate([[0], boundaries, [labels.size]]))


@pytest.mark.parametrize("spec", [
    CorpusSpec(),
    CorpusSpec(frames_per_utt=(20, 30), segment_len=(4, 10)),
    CorpusSpec(frames_per_utt=(60, 60), segment_len=(10, 12), bona_fraction=0.7),
])
def test_segment_lengths_stay_in_range(spec):
    seg_lo, seg_hi = spec.segment_len
    rng = np.random.default_rng(17)
    for _ in range(500):
        labels = generate_utterance(spec, rng).frame_labels.labels
        lengths = _run_lengths(labels)
        assert lengths.min() >= seg_lo
        assert lengths.max() <= seg_hi
        # bona and spoof segments alternate
        kinds = labels[np.concatenate([[0], np.cumsum(lengths)[:-1]])] == 0
        assert np.all(kinds[1:] != kinds[:-1])


def test_unsplittable_length_is_rejected():
    with pytest.raises(CorpusSpecError) as info:
        CorpusSpec(frames_per_utt=(16, 17), segment_len=(8, 8))
    assert info.value.field == "segment_len"
