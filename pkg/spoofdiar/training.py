"""
Training loop
Mini-batch optimization of the combined objective with dev-set model
selection, a per-step TSV log and best/last checkpoints
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch

from spoofdiar.corpus import FeatUtterance
from spoofdiar.errors import ConfigError, TrainingDivergenceError
from spoofdiar.inference import InferenceConfig, diarize_partition
from spoofdiar.metrics import jer_spoof
from spoofdiar.model import SpoofDiarizer, count_parameters, save_checkpoint
from spoofdiar.objectives import LossBreakdown, Targets, build_targets, total_loss
from spoofdiar.timeline import LabelVocabulary

logger = structlog.get_logger(__name__)

OPTIMIZERS = ("adam", "adamw", "sgd")
SELECTION_METRICS = ("loss", "jer")
LOG_COLUMNS = ("epoch", "step", "loss_loc", "loss_dia", "loss_token", "total")
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
TRAIN_LOG = "train_log.tsv"


@dataclass(frozen=True)
class TrainingConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 8
    grad_clip: float = 5.0
    selection_metric: str = "loss"
    include_nonspeech: bool = False
    max_train_utts: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"expected one of {OPTIMIZERS}", "optimizer")
        if self.lr <= 0:
            raise ConfigError("must be > 0", "lr")
        if self.weight_decay < 0:
            raise ConfigError("must be >= 0", "weight_decay")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.grad_clip < 0:
            raise ConfigError("must be >= 0 (0 disables clipping)", "grad_clip")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(f"expected one of {SELECTION_METRICS}", "selection_metric")
        if self.max_train_utts is not None and self.max_train_utts < 1:
            raise ConfigError("must be >= 1", "max_train_utts")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_epoch: int
    best_value: float
    n_params: int
    history: List[Dict[str, float]] = field(default_factory=list)


class Trainer:
    """Optimizes one model on one corpus; vocab is the trained vocabulary"""

    def __init__(self, model: SpoofDiarizer, config: TrainingConfig, vocab: LabelVocabulary,
                 infer_cfg: Optional[InferenceConfig] = None):
        self.model = model
        self.config = config
        self.vocab = vocab
        self.infer_cfg = infer_cfg or InferenceConfig()
        self.dtype = next(model.parameters()).dtype
        self.optimizer = self._build_optimizer()
        self.global_step = 0

    def _build_optimizer(self) -> torch.optim.Optimizer:
        params = [p for p in self.model.parameters() if p.requires_grad]
        cfg = self.config
        if cfg.optimizer == "adam":
            return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        if cfg.optimizer == "adamw":
            return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        return torch.optim.SGD(params, lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)

    def targets_for(self, utt: FeatUtterance) -> Targets:
        mc = self.model.config
        mask = None if self.config.include_nonspeech else utt.speech_mask
        return build_targets(utt.frame_labels, self.vocab, mc.label_scheme, mask=mask,
                             concat_mask=utt.concat_mask, use_concat_class=mc.use_concat_class,
                             dtype=self.dtype)

    def _prepare(self, utterances: Sequence[FeatUtterance]) -> List[Tuple[torch.Tensor, Targets]]:
        return [(torch.from_numpy(np.asarray(u.features)).to(self.dtype), self.targets_for(u))
                for u in utterances]

    def train_step(self, batch: Sequence[Tuple[torch.Tensor, Targets]]) -> LossBreakdown:
        self.model.train()
        self.optimizer.zero_grad()
        outputs = [self.model(features) for features, _ in batch]
        breakdown = total_loss(outputs, [t for _, t in batch], self.model.config)
        breakdown.total.backward()
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.global_step += 1
        return breakdown

    @torch.no_grad()
    def evaluate_loss(self, prepared: Sequence[Tuple[torch.Tensor, Targets]]) -> Dict[str, float]:
        self.model.eval()
        outputs = [self.model(features) for features, _ in prepared]
        return total_loss(outputs, [t for _, t in prepared], self.model.config).as_floats()

    def dev_jer(self, dev: Sequence[FeatUtterance]) -> float:
        hyps = diarize_partition(self.model, self.infer_cfg, dev)
        return jer_spoof([u.frame_labels for u in dev], hyps)

    def fit(self, train: Sequence[FeatUtterance], dev: Sequence[FeatUtterance], out_dir,
            seed: int = 0, extra: Optional[Dict[str, Any]] = None) -> TrainResult:
        """Train for the configured epochs; keeps the checkpoint with the best dev value"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        best_path, last_path, log_path = out_dir / BEST_CHECKPOINT, out_dir / LAST_CHECKPOINT, out_dir / TRAIN_LOG
        cfg = self.config
        if cfg.max_train_utts is not None:
            train = list(train)[:cfg.max_train_utts]

        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        prepared_train = self._prepare(train)
        prepared_dev = self._prepare(dev)
        n_params = count_parameters(self.model)
        logger.info("training_started", n_train=len(prepared_train), n_dev=len(prepared_dev),
                    epochs=cfg.epochs, batch_size=cfg.batch_size, n_params=n_params, seed=seed)

        rows = ["\t".join(LOG_COLUMNS)]
        history: List[Dict[str, float]] = []
        best_value, best_epoch = float("inf"), 0
        meta = dict(extra or {}, seed=seed, n_params=n_params)

        try:
            for epoch in range(1, cfg.epochs + 1):
                order = rng.permutation(len(prepared_train))
                epoch_totals = []
                for start in range(0, len(order), cfg.batch_size):
                    batch = [prepared_train[i] for i in order[start:start + cfg.batch_size]]
                    try:
                        losses = self.train_step(batch).as_floats()
                    except TrainingDivergenceError as e:
                        last_good = str(best_path) if best_path.exists() else None
                        logger.error("training_diverged", epoch=epoch, step=self.global_step,
                                     diagnostics=e.diagnostics, last_good_checkpoint=last_good)
                        raise TrainingDivergenceError(str(e), e.diagnostics, last_good) from e
                    epoch_totals.append(losses["total"])
                    rows.append("\t".join([str(epoch), str(self.global_step)] +
                                          [f"{losses[c]:.8f}" for c in LOG_COLUMNS[2:]]))

                record = {"epoch": epoch, "train_total": float(np.mean(epoch_totals)) if epoch_totals else 0.0}
                if prepared_dev:
                    dev_losses = self.evaluate_loss(prepared_dev)
                    record.update({f"dev_{k}": v for k, v in dev_losses.items()})
                    if cfg.selection_metric == "jer":
                        record["dev_jer"] = self.dev_jer(dev)
                        value = record["dev_jer"]
                    else:
                        value = dev_losses["total"]
                else:
                    value = record["train_total"]
                history.append(record)
                logger.info("epoch_done", **{k: round(v, 6) if isinstance(v, float) else v
                                             for k, v in record.items()})
                if value < best_value:
                    best_value, best_epoch = value, epoch
                    save_checkpoint(self.model, best_path,
                                    dict(meta, epoch=epoch, selection_metric=cfg.selection_metric,
                                         selection_value=value))
        finally:
            log_path.write_text("\n".join(rows) + "\n")

        save_checkpoint(self.model, last_path, dict(meta, epoch=cfg.epochs))
        logger.info("training_finished", best_epoch=best_epoch, best_value=round(best_value, 6),
                    checkpoint=str(best_path))
        return TrainResult(best_path, last_path, log_path, best_epoch, best_value, n_params, history)


def read_train_log(path) -> List[Dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    return [{k: float(v) for k, v in zip(header, line.split("\t"))} for line in lines[1:] if line.strip()]
