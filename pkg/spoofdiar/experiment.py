"""
Experiment driver
Corpus caching, training, evaluation, standalone scoring and ablation
grids; every artifact carries a provenance block
"""

import json
import platform
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy
import sklearn
import structlog
import torch
from joblib import Parallel, delayed
from tabulate import tabulate

from spoofdiar import __version__
from spoofdiar.config import (
    AblationGrid,
    ExperimentConfig,
    apply_overrides,
    env_int,
    to_ini,
)
from spoofdiar.corpus import (
    PARTITIONS,
    Corpus,
    CorpusSpec,
    corpus_checksum,
    generate_corpus,
    load_corpus,
    write_corpus,
)
from spoofdiar.errors import CheckpointError, ConfigError, CoverageError
from spoofdiar.inference import (
    InferenceConfig,
    count_lcm_violations,
    diarize_partition,
    dump_embeddings,
    parse_hypotheses,
    read_scores,
    write_hypotheses,
    write_scores,
)
from spoofdiar.logging_setup import configure_logging
from spoofdiar.metrics import DiarizationReport, score_corpus, write_report
from spoofdiar.model import ModelConfig, SpoofDiarizer, init_model, load_checkpoint
from spoofdiar.timeline import LabelVocabulary, parse_mask, parse_segments, timeline_to_frames
from spoofdiar.training import Trainer, TrainingConfig, TrainResult

logger = structlog.get_logger(__name__)

METRIC_KEYS = ("dev_ji_bona", "dev_jer_spoof", "eval_ji_bona", "eval_jer_spoof",
               "eval_eer_frame", "eval_eer_utt")


def provenance(config: Optional[ExperimentConfig] = None, seed: Optional[int] = None,
               **extra) -> Dict[str, Any]:
    """Config echo, seed and library versions; the timestamp is the only non-deterministic field"""
    return {
        "config": config.to_dict() if config is not None else None,
        "seed": seed,
        "versions": {
            "spoofdiar": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
            "torch": torch.__version__,
        },
        "timestamp": datetime.now(timezone.utc).isoformat(),
        **extra,
    }


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    exp = data.get("experiment", {})
    return ExperimentConfig(
        corpus=CorpusSpec.from_dict(data["corpus"]),
        model=ModelConfig.from_dict(data["model"]),
        inference=InferenceConfig(**data["inference"]),
        training=TrainingConfig(**data["training"]),
        name=exp.get("name", "default"),
        seeds=tuple(exp.get("seeds", (0,))),
        out_dir=exp.get("out_dir", "runs"),
        corpus_dir=exp.get("corpus_dir"),
    )


def ensure_corpus(config: ExperimentConfig) -> Tuple[Corpus, str, Path]:
    """Load the corpus for config.corpus, generating it on first use"""
    corpus_dir = config.resolved_corpus_dir()
    meta_path = corpus_dir / "corpus.json"
    if meta_path.exists():
        stored = CorpusSpec.from_dict(json.loads(meta_path.read_text())["spec"])
        if stored == config.corpus:
            logger.info("corpus_cached", corpus_dir=str(corpus_dir))
            return load_corpus(corpus_dir), corpus_checksum(corpus_dir), corpus_dir
        if config.corpus_dir:
            raise ConfigError(f"{corpus_dir} holds a corpus generated from a different spec",
                              "experiment.corpus_dir")
    corpus = generate_corpus(config.corpus)
    checksum = write_corpus(corpus, corpus_dir)
    return corpus, checksum, corpus_dir


def run_generate(config: ExperimentConfig, out_dir: Optional[str] = None) -> Tuple[Path, str, Dict[str, int]]:
    """Generate (or regenerate) a corpus into out_dir; returns (dir, checksum, utts per partition)"""
    corpus_dir = Path(out_dir) if out_dir else config.resolved_corpus_dir()
    corpus = generate_corpus(config.corpus)
    checksum = write_corpus(corpus, corpus_dir)
    counts = {p: len(corpus.partitions.get(p, [])) for p in PARTITIONS}
    return corpus_dir, checksum, counts


def run_dir_for(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.out_dir) / config.name / f"seed_{seed}"


def _check_model_matches(model: SpoofDiarizer, config: ExperimentConfig) -> None:
    stored, wanted = model.config.to_dict(), config.model.to_dict()
    diff = sorted(k for k in wanted if stored.get(k) != wanted[k])
    if diff:
        raise CheckpointError(f"config/checkpoint mismatch in model fields {diff}")


def evaluate_model(model: SpoofDiarizer, config: ExperimentConfig, corpus: Corpus, partition: str,
                   out_dir, seed: Optional[int] = None, embeddings: bool = False) -> DiarizationReport:
    """Diarize a partition, write hypotheses, scores and report; audit the LCM constraint"""
    if partition not in corpus.partitions:
        raise ConfigError(f"partition '{partition}' not in corpus", "partition")
    if model.config.d_feat != corpus.spec.d_feat:
        raise CheckpointError(f"model expects {model.config.d_feat}-dim features, "
                              f"corpus has {corpus.spec.d_feat}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    utterances = corpus.partitions[partition]

    hyps = diarize_partition(model, config.inference, utterances)
    violations = count_lcm_violations(hyps, config.inference.threshold)
    if violations:
        raise CoverageError(f"{violations} frames at or above the threshold carry a cluster label")

    write_hypotheses(hyps, out_dir / f"{partition}.hyp", corpus.spec.resolution)
    write_scores(hyps, out_dir / f"{partition}.scores.tsv")
    report = score_corpus([u.frame_labels for u in utterances], hyps,
                          pooling=config.inference.pooling)
    write_report(report, out_dir / f"report_{partition}.txt",
                 provenance(config, seed, partition=partition, lcm_violations=violations),
                 title=f"{config.name} / {partition}")
    if embeddings:
        dump_embeddings(model, config.inference, utterances, corpus.vocab,
                        out_dir / f"{partition}.emb.tsv")
    return report


def run_train(config: ExperimentConfig, seed: int,
              run_dir: Optional[str] = None) -> Tuple[TrainResult, DiarizationReport]:
    """Train one seed, keep the best-dev checkpoint, then score dev with it"""
    corpus, checksum, corpus_dir = ensure_corpus(config)
    run_dir = Path(run_dir) if run_dir else run_dir_for(config, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(to_ini(config))

    model = init_model(config.model, seed)
    trainer = Trainer(model, config.training, corpus.train_vocab, config.inference)
    extra = {"experiment": config.to_dict(), "corpus_dir": str(corpus_dir), "corpus_checksum": checksum}
    try:
        result = trainer.fit(corpus.partitions["train"], corpus.partitions["dev"], run_dir, seed, extra)
    except Exception as e:
        logger.error("train_failed", name=config.name, seed=seed, error=str(e))
        raise

    best, _ = load_checkpoint(result.best_checkpoint)
    report = evaluate_model(best, config, corpus, "dev", run_dir, seed)
    summary = {"best_epoch": result.best_epoch, "best_value": result.best_value,
               "n_params": result.n_params, "dev": report.summary(), "history": result.history,
               "provenance": provenance(config, seed, corpus_checksum=checksum)}
    (run_dir / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result, report


def run_evaluate(checkpoint, partition: str, config: Optional[ExperimentConfig] = None,
                 out_dir: Optional[str] = None, embeddings: bool = False,
                 overrides: Optional[Dict[str, Any]] = None) -> DiarizationReport:
    """Evaluate a checkpoint; without a config, the experiment stored in the checkpoint is used"""
    model, extra = load_checkpoint(checkpoint)
    if config is None:
        config = _config_from_checkpoint(checkpoint, extra)
    if overrides:
        config = apply_overrides(config, overrides)
    _check_model_matches(model, config)
    corpus, _, _ = ensure_corpus(config)
    out_dir = Path(out_dir) if out_dir else Path(checkpoint).parent
    return evaluate_model(model, config, corpus, partition, out_dir, extra.get("seed"), embeddings)


def _config_from_checkpoint(checkpoint, extra: Dict[str, Any]) -> ExperimentConfig:
    if "experiment" not in extra:
        raise CheckpointError(f"{checkpoint} carries no experiment config; pass --config")
    config = config_from_dict(extra["experiment"])
    if extra.get("corpus_dir") and not config.corpus_dir:
        config = replace(config, corpus_dir=extra["corpus_dir"])
    return config


def run_dump_embeddings(checkpoint, partition: str, out_path, config: Optional[ExperimentConfig] = None) -> int:
    model, extra = load_checkpoint(checkpoint)
    if config is None:
        config = _config_from_checkpoint(checkpoint, extra)
    _check_model_matches(model, config)
    corpus, _, _ = ensure_corpus(config)
    return dump_embeddings(model, config.inference, corpus.partitions[partition], corpus.vocab, out_path)


def run_score(ref_path, hyp_path, vocab: LabelVocabulary, resolution: float,
              mask_path=None, scores_path=None, out_path=None, threshold: float = 0.5,
              pooling: str = "min") -> DiarizationReport:
    """Score hypothesis label files against reference label files"""
    timelines = parse_segments(Path(ref_path).read_text(), vocab)
    masks = parse_mask(Path(mask_path).read_text(), resolution) if mask_path else {}
    refs = []
    for timeline in timelines:
        frames = timeline_to_frames(timeline, vocab, resolution)
        if timeline.utt_id in masks:
            frames.mask = masks[timeline.utt_id]
        refs.append(frames)

    scores = read_scores(scores_path) if scores_path else None
    hyps = parse_hypotheses(Path(hyp_path).read_text(), resolution, scores)
    if scores is not None:
        violations = count_lcm_violations(hyps, threshold)
        if violations:
            raise CoverageError(f"{violations} frames at or above the threshold carry a cluster label")
    report = score_corpus(refs, hyps, with_eer=scores is not None, pooling=pooling)
    if out_path:
        write_report(report, out_path, provenance(None, None, reference=str(ref_path),
                                                  hypothesis=str(hyp_path)))
    return report


@dataclass
class AblationRow:
    cell: str
    per_seed: Dict[int, Dict[str, Optional[float]]] = field(default_factory=dict)
    failures: Dict[int, str] = field(default_factory=dict)

    def values(self, key: str) -> List[float]:
        return [m[key] for _, m in sorted(self.per_seed.items()) if m.get(key) is not None]

    def mean(self, key: str) -> Optional[float]:
        values = self.values(key)
        return float(np.mean(values)) if values else None

    def std(self, key: str) -> Optional[float]:
        values = self.values(key)
        return float(np.std(values)) if values else None


def _run_cell(name: str, config: ExperimentConfig, seed: int, out_root: str,
              torch_threads: int) -> Dict[str, Any]:
    configure_logging()
    torch.set_num_threads(torch_threads)
    run_dir = Path(out_root) / name / f"seed_{seed}"
    try:
        result, dev = run_train(config, seed, run_dir)
        best, _ = load_checkpoint(result.best_checkpoint)
        corpus, _, _ = ensure_corpus(config)
        test = evaluate_model(best, config, corpus, "eval", run_dir, seed)
    except Exception as e:
        logger.warning("ablation_cell_failed", cell=name, seed=seed, error=f"{type(e).__name__}: {e}")
        return {"cell": name, "seed": seed, "error": f"{type(e).__name__}: {e}"}
    return {"cell": name, "seed": seed, "metrics": {
        "dev_ji_bona": dev.ji_bona, "dev_jer_spoof": dev.jer_spoof,
        "eval_ji_bona": test.ji_bona, "eval_jer_spoof": test.jer_spoof,
        "eval_eer_frame": test.eer_frame, "eval_eer_utt": test.eer_utt,
        "n_params": result.n_params,
    }}


def run_ablate(grid: AblationGrid, base: ExperimentConfig, out_dir: Optional[str] = None,
               n_jobs: Optional[int] = None) -> List[AblationRow]:
    """Train and evaluate every cell for every seed; failures are recorded and the grid continues"""
    cells = grid.configs(base)
    out_root = Path(out_dir) if out_dir else Path(base.out_dir) / "ablation"
    n_jobs = n_jobs if n_jobs is not None else env_int("SPOOFDIAR_N_JOBS", 1)
    torch_threads = env_int("SPOOFDIAR_TORCH_THREADS", 0)
    if torch_threads <= 0:
        torch_threads = 1 if n_jobs != 1 else torch.get_num_threads()

    # corpora are generated once, before workers race for them
    for _, config in cells:
        ensure_corpus(config)
    tasks = [(name, config, seed) for name, config in cells for seed in config.seeds]
    logger.info("ablation_started", n_cells=len(cells), n_runs=len(tasks), n_jobs=n_jobs)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_cell)(name, config, seed, str(out_root), torch_threads) for name, config, seed in tasks)

    rows = {name: AblationRow(name) for name, _ in cells}
    for res in results:
        row = rows[res["cell"]]
        if "error" in res:
            row.failures[res["seed"]] = res["error"]
        else:
            row.per_seed[res["seed"]] = res["metrics"]
    ordered = [rows[name] for name, _ in cells]
    write_ablation(ordered, out_root, grid.reference, base)
    return ordered


def _fmt(mean: Optional[float], std: Optional[float]) -> str:
    if mean is None:
        return "n/a"
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def relative_improvement(row: AblationRow, reference: Optional[AblationRow],
                         key: str = "eval_jer_spoof") -> Optional[float]:
    """Percent reduction of an error metric relative to the reference cell"""
    if reference is None:
        return None
    ref, value = reference.mean(key), row.mean(key)
    if ref is None or value is None or ref == 0:
        return None
    return 100.0 * (ref - value) / ref


def format_ablation(rows: List[AblationRow], reference: Optional[str] = None) -> str:
    ref_row = next((r for r in rows if r.cell == reference), None)
    headers = ["cell", "dev JI_bona", "dev JER_spoof", "eval JI_bona", "eval JER_spoof",
               "frame EER", "utt EER", "rel. JER (%)", "seeds ok", "failed"]
    table = []
    for row in rows:
        rel = relative_improvement(row, ref_row)
        table.append([row.cell] + [_fmt(row.mean(k), row.std(k)) for k in METRIC_KEYS] +
                     ["-" if rel is None else f"{rel:+.1f}", len(row.per_seed), len(row.failures)])
    seed_rows = []
    for row in rows:
        for seed, metrics in sorted(row.per_seed.items()):
            seed_rows.append([row.cell, seed] + [
                "n/a" if metrics.get(k) is None else f"{100 * metrics[k]:.2f}" for k in METRIC_KEYS])
        for seed, error in sorted(row.failures.items()):
            seed_rows.append([row.cell, seed, f"FAILED: {error}"] + [""] * (len(METRIC_KEYS) - 1))
    per_seed = tabulate(seed_rows, headers=["cell", "seed"] + list(METRIC_KEYS), tablefmt="github")
    return (tabulate(table, headers=headers, tablefmt="github") +
            "\n\nper seed (%)\n\n" + per_seed + "\n")


def write_ablation(rows: List[AblationRow], out_root: Path, reference: Optional[str],
                   base: ExperimentConfig) -> None:
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "ablation.txt").write_text(format_ablation(rows, reference))
    payload = {
        "reference": reference,
        "cells": [{"cell": r.cell,
                   "per_seed": {str(s): m for s, m in sorted(r.per_seed.items())},
                   "failures": {str(s): e for s, e in sorted(r.failures.items())},
                   "mean": {k: r.mean(k) for k in METRIC_KEYS},
                   "std": {k: r.std(k) for k in METRIC_KEYS}} for r in rows],
        "provenance": provenance(base, None),
    }
    (out_root / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
