"""
Training objectives
P2SGrad similarity loss, target construction for the localization,
diarization and token signals, and the combined objective
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from spoofdiar.errors import ShapeMismatchError, TrainingDivergenceError, VocabularyError
from spoofdiar.timeline import FrameLabels, LabelVocabulary

if TYPE_CHECKING:
    from spoofdiar.model import ForwardOutputs, ModelConfig

NORM_EPS = 1e-12
SCHEMES = ("Mul", "Spf")


@dataclass(eq=False)
class Targets:
    """Supervision for one utterance

    y_loc: T x 2 one-hot, column 0 bona fide
    y_dia: T x K one-hot over the scheme's diarization classes
    y_token: L multi-hot over bona + trained spoof methods
    loc_weight / dia_weight: per-frame weights (0 drops the frame)
    """

    y_loc: torch.Tensor
    y_dia: torch.Tensor
    y_token: torch.Tensor
    loc_weight: torch.Tensor
    dia_weight: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.y_loc.shape[0])


@dataclass
class LossBreakdown:
    loss_loc: torch.Tensor
    loss_dia: torch.Tensor
    loss_token: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "loss_loc": float(self.loss_loc.detach()),
            "loss_dia": float(self.loss_dia.detach()),
            "loss_token": float(self.loss_token.detach()),
            "total": float(self.total.detach()),
        }


def cosine_prototype_scores(X: torch.Tensor, O: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Cosine similarity of each row of X (n x d') with each column of O (d' x K)"""
    return F.normalize(X, dim=-1, eps=eps) @ F.normalize(O, dim=0, eps=eps)


def _as_target_matrix(P: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if y.dim() == 1 and not torch.is_floating_point(y):
        if y.shape[0] != P.shape[0]:
            raise ShapeMismatchError(f"{y.shape[0]} labels for {P.shape[0]} score rows")
        return F.one_hot(y, num_classes=P.shape[1]).to(P.dtype)
    y = y.to(P.dtype)
    if y.dim() == 1:
        y = y.unsqueeze(0)
    if y.shape != P.shape:
        raise ShapeMismatchError(f"target shape {tuple(y.shape)} != score shape {tuple(P.shape)}")
    return y


def p2sgrad_terms(P: torch.Tensor, y: torch.Tensor,
                  weight: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """(weighted sum of per-row squared errors, total weight)"""
    if P.dim() == 1:
        P = P.unsqueeze(0)
    target = _as_target_matrix(P, y)
    per_row = ((P - target) ** 2).sum(dim=1)
    if weight is None:
        weight = torch.ones_like(per_row)
    else:
        weight = weight.to(P.dtype)
        if weight.shape != per_row.shape:
            raise ShapeMismatchError(f"{weight.shape[0]} weights for {per_row.shape[0]} rows")
    return (weight * per_row).sum(), weight.sum()


def p2sgrad_loss(P: torch.Tensor, y: torch.Tensor, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over rows of sum_k (P[i,k] - y[i,k])^2

    y is either a vector of class indices or a one/multi-hot matrix shaped like P.
    Rows with weight 0 do not contribute; an all-zero weight vector gives 0.
    """
    total, count = p2sgrad_terms(P, y, weight)
    if float(count) == 0.0:
        return total * 0.0
    return total / count


def dia_classes(vocab: LabelVocabulary, scheme: str, use_concat_class: bool = True) -> Tuple[str, ...]:
    """Column order of y_dia / O_dia for a label scheme"""
    if scheme == "Mul":
        if use_concat_class and vocab.concat_label is not None:
            return vocab.classes + (vocab.concat_label,)
        return vocab.classes
    if scheme == "Spf":
        return vocab.methods
    raise VocabularyError(f"unknown label scheme '{scheme}'")


def build_targets(frames: FrameLabels, vocab: LabelVocabulary, scheme: str = "Mul",
                  mask: Optional[np.ndarray] = None, concat_mask: Optional[np.ndarray] = None,
                  use_concat_class: bool = True, dtype: torch.dtype = torch.float32) -> Targets:
    """Frame and utterance targets for one utterance

    Mul: y_dia over bona, spoof methods and (optionally) the concat class;
    concat-marked frames take the concat column.
    Spf: y_dia over spoof methods only; bona and concat frames get weight 0.
    Masked (non-speech) frames get weight 0 in every frame loss.
    """
    if scheme not in SCHEMES:
        raise VocabularyError(f"unknown label scheme '{scheme}'")
    labels = np.asarray(frames.labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= vocab.L):
        raise VocabularyError(f"{frames.utt_id}: label index outside the {vocab.L}-class vocabulary")
    T = labels.size
    speech = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    concat = np.zeros(T, dtype=bool) if concat_mask is None else np.asarray(concat_mask, dtype=bool)

    is_bona = labels == 0
    y_loc = np.stack([is_bona, ~is_bona], axis=1).astype(np.float64)
    loc_weight = speech.astype(np.float64)

    columns = dia_classes(vocab, scheme, use_concat_class)
    y_dia = np.zeros((T, len(columns)), dtype=np.float64)
    dia_weight = speech.astype(np.float64)
    if scheme == "Mul":
        y_dia[np.arange(T), labels] = 1.0
        if use_concat_class and vocab.concat_label is not None:
            y_dia[concat] = 0.0
            y_dia[concat, vocab.L] = 1.0
    else:
        spoof = ~is_bona
        y_dia[np.flatnonzero(spoof), labels[spoof] - 1] = 1.0
        dia_weight[is_bona | concat] = 0.0

    y_token = np.zeros(vocab.L, dtype=np.float64)
    present = labels[speech] if speech.any() else labels
    y_token[np.unique(present)] = 1.0

    as_tensor = lambda a: torch.as_tensor(a, dtype=dtype)
    return Targets(as_tensor(y_loc), as_tensor(y_dia), as_tensor(y_token),
                   as_tensor(loc_weight), as_tensor(dia_weight))


def _check_finite(breakdown: LossBreakdown) -> LossBreakdown:
    values = breakdown.as_floats()
    bad = {name: value for name, value in values.items() if not np.isfinite(value)}
    if bad:
        raise TrainingDivergenceError(f"non-finite loss terms: {sorted(bad)}", diagnostics=values)
    return breakdown


def total_loss(outputs: Union["ForwardOutputs", Sequence["ForwardOutputs"]],
               targets: Union[Targets, Sequence[Targets]],
               config: "ModelConfig") -> LossBreakdown:
    """Combined objective over one utterance or a mini-batch

    Frame terms average over the pooled frame population of the batch; the
    token term averages over utterances (and over branches owning tokens).
    Disabled terms contribute exactly 0.
    """
    if not isinstance(outputs, (list, tuple)):
        outputs, targets = [outputs], [targets]
    if len(outputs) != len(targets):
        raise ShapeMismatchError(f"{len(outputs)} outputs for {len(targets)} targets")

    ref = outputs[0].P_dia
    zero = ref.new_zeros(())
    loc_sum, loc_count = zero, zero
    dia_sum, dia_count = zero, zero
    token_sum, token_count = zero, zero

    for out, tgt in zip(outputs, targets):
        if out.P_loc.shape != tgt.y_loc.shape:
            raise ShapeMismatchError(f"P_loc {tuple(out.P_loc.shape)} vs y_loc {tuple(tgt.y_loc.shape)}")
        s, c = p2sgrad_terms(out.P_loc, tgt.y_loc, tgt.loc_weight)
        loc_sum, loc_count = loc_sum + s, loc_count + c
        s, c = p2sgrad_terms(out.P_dia, tgt.y_dia, tgt.dia_weight)
        dia_sum, dia_count = dia_sum + s, dia_count + c
        for P_token in out.token_scores:
            s, c = p2sgrad_terms(P_token, tgt.y_token)
            token_sum, token_count = token_sum + s, token_count + c

    def _mean(total, count):
        return total / count if float(count) > 0 else total * 0.0

    loss_loc = _mean(loc_sum, loc_count) if config.use_loc_loss else zero
    loss_dia = _mean(dia_sum, dia_count)
    loss_token = _mean(token_sum, token_count) if config.use_attractor_tokens else zero
    total = loss_loc + loss_dia + loss_token
    return _check_finite(LossBreakdown(loss_loc, loss_dia, loss_token, total))
