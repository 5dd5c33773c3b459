import dataclasses

import numpy as np
import pytest
import torch

import spoofdiar.training as training
from spoofdiar.config import load_config
from spoofdiar.errors import ConfigError, TrainingDivergenceError
from spoofdiar.experiment import ensure_corpus, run_train
from spoofdiar.model import forward, init_model, load_checkpoint
from spoofdiar.training import LOG_COLUMNS, Trainer, TrainingConfig, read_train_log


def _trainer(tiny_corpus, small_model_config, **overrides):
    config = dataclasses.replace(small_model_config, n_classes=tiny_corpus.spec.n_seen_classes)
    model = init_model(config, seed=0)
    train_cfg = TrainingConfig(**dict({"epochs": 2, "batch_size": 4}, **overrides))
    return Trainer(model, train_cfg, tiny_corpus.train_vocab)


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(optimizer="lbfgs")
    with pytest.raises(ConfigError):
        TrainingConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainingConfig(selection_metric="eer")


def test_fit_writes_log_and_checkpoints(tmp_path, tiny_corpus, small_model_config):
    trainer = _trainer(tiny_corpus, small_model_config)
    result = trainer.fit(tiny_corpus.partitions["train"], tiny_corpus.partitions["dev"], tmp_path)

    rows = read_train_log(result.log_path)
    assert result.log_path.read_text().splitlines()[0].split("\t") == list(LOG_COLUMNS)
    assert len(rows) == 2 * 3
    assert [r["step"] for r in rows] == [1, 2, 3, 4, 5, 6]
    for row in rows:
        assert row["total"] >= 0

    assert result.best_checkpoint.exists() and result.last_checkpoint.exists()
    model, extra = load_checkpoint(result.best_checkpoint)
    assert extra["epoch"] == result.best_epoch
    assert extra["selection_metric"] == "loss"
    assert len(result.history) == 2


def test_fit_is_deterministic(tmp_path, tiny_corpus, small_model_config):
    results = []
    for run in ("a", "b"):
        trainer = _trainer(tiny_corpus, small_model_config)
        results.append(trainer.fit(tiny_corpus.partitions["train"], tiny_corpus.partitions["dev"],
                                   tmp_path / run, seed=5))
    assert results[0].history == results[1].history
    assert (tmp_path / "a" / "train_log.tsv").read_text() == (tmp_path / "b" / "train_log.tsv").read_text()
    x = tiny_corpus.partitions["eval"][0].features
    a, _ = load_checkpoint(results[0].last_checkpoint)
    b, _ = load_checkpoint(results[1].last_checkpoint)
    torch.testing.assert_close(forward(a, x).P_dia, forward(b, x).P_dia, rtol=0, atol=0)


def test_jer_selection(tmp_path, tiny_corpus, small_model_config):
    trainer = _trainer(tiny_corpus, small_model_config, epochs=1, selection_metric="jer")
    result = trainer.fit(tiny_corpus.partitions["train"], tiny_corpus.partitions["dev"], tmp_path)
    assert "dev_jer" in result.history[0]
    assert 0.0 <= result.best_value <= 1.0


def test_max_train_utts(tmp_path, tiny_corpus, small_model_config):
    trainer = _trainer(tiny_corpus, small_model_config, epochs=1, max_train_utts=4, batch_size=2)
    result = trainer.fit(tiny_corpus.partitions["train"], tiny_corpus.partitions["dev"], tmp_path)
    assert len(read_train_log(result.log_path)) == 2


def test_divergence_reports_last_good_checkpoint(tmp_path, tiny_corpus, small_model_config, monkeypatch):
    real_total_loss = training.total_loss
    calls = {"n": 0}

    def flaky_total_loss(outputs, targets, config):
        calls["n"] += 1
        # epoch 1 is three steps plus one dev evaluation
        if calls["n"] == 5:
            raise TrainingDivergenceError("non-finite loss terms: ['total']", {"total": float("nan")})
        return real_total_loss(outputs, targets, config)

    monkeypatch.setattr(training, "total_loss", flaky_total_loss)
    trainer = _trainer(tiny_corpus, small_model_config)
    with pytest.raises(TrainingDivergenceError) as info:
        trainer.fit(tiny_corpus.partitions["train"], tiny_corpus.partitions["dev"], tmp_path)
    assert info.value.last_good_checkpoint == str(tmp_path / "best.ckpt")
    assert len(read_train_log(tmp_path / "train_log.tsv")) == 3


def test_run_train_smoke(tiny_experiment):
    result, report = run_train(tiny_experiment, seed=0)
    model, extra = load_checkpoint(result.best_checkpoint)
    assert model.config == tiny_experiment.model
    assert extra["experiment"]["experiment"]["name"] == "default"
    run_dir = result.best_checkpoint.parent
    for name in ("config.ini", "train_summary.json", "dev.hyp", "dev.scores.tsv", "report_dev.txt"):
        assert (run_dir / name).exists()
    assert 0.0 <= report.ji_bona <= 1.0
    assert 0.0 <= report.jer_spoof <= 1.0


def test_run_train_twice_gives_identical_metrics(tiny_experiment, tmp_path):
    _, first = run_train(tiny_experiment, seed=0, run_dir=str(tmp_path / "one"))
    _, second = run_train(tiny_experiment, seed=0, run_dir=str(tmp_path / "two"))
    assert first.summary() == second.summary()
    assert (tmp_path / "one" / "dev.hyp").read_text() == (tmp_path / "two" / "dev.hyp").read_text()


@pytest.mark.slow
def test_loss_decreases_on_default_corpus(tmp_path):
    config = load_config()
    corpus, _, _ = ensure_corpus(dataclasses.replace(config, out_dir=str(tmp_path)))
    model = init_model(config.model, seed=0)
    trainer = Trainer(model, dataclasses.replace(config.training, epochs=3), corpus.train_vocab)
    result = trainer.fit(corpus.partitions["train"], corpus.partitions["dev"], tmp_path / "run")
    rows = read_train_log(result.log_path)
    last_epoch = [r["total"] for r in rows if r["epoch"] == 3]
    assert np.mean(last_epoch) < rows[0]["total"]
