from pathlib import Path

import pytest

from spoofdiar.config import ExperimentConfig, apply_overrides
from spoofdiar.corpus import CorpusSpec, generate_corpus
from spoofdiar.logging_setup import configure_logging
from spoofdiar.model import ModelConfig
from spoofdiar.timeline import LabelVocabulary

configure_logging("WARNING")


@pytest.fixture
def vocab() -> LabelVocabulary:
    return LabelVocabulary.standard(5)


@pytest.fixture
def tiny_spec() -> CorpusSpec:
    return CorpusSpec(n_train=10, n_dev=4, n_eval=4, n_classes=4, d_feat=8,
                      frames_per_utt=(20, 30), segment_len=(4, 10), seed=3)


@pytest.fixture
def tiny_corpus(tiny_spec):
    return generate_corpus(tiny_spec)


@pytest.fixture
def small_model_config() -> ModelConfig:
    return ModelConfig(d_feat=8, d=8, n_layers=2, n_heads=2, d_ff=16, n_classes=4,
                       gmlp_d_ffn=16, dropout=0.0)


@pytest.fixture
def tiny_experiment(tmp_path: Path) -> ExperimentConfig:
    """Seconds-scale experiment writing under tmp_path"""
    base = ExperimentConfig(out_dir=str(tmp_path / "runs"))
    return apply_overrides(base, {
        "experiment.seeds": "0",
        "corpus.n_train": "10", "corpus.n_dev": "4", "corpus.n_eval": "4",
        "corpus.n_classes": "4", "corpus.d_feat": "8",
        "corpus.frames_per_utt": "20, 30", "corpus.segment_len": "4, 10",
        "model.d": "8", "model.n_layers": "1", "model.n_heads": "2", "model.d_ff": "16",
        "model.gmlp_d_ffn": "16", "model.dropout": "0.0",
        "training.epochs": "1", "training.batch_size": "4",
    })
