"""
Attractor-token spoof diarization model
Merged-branch network with two learnable attractor tokens, plus switches
recovering the dual-branch baseline and the no-token ablations

Shapes: T frames, N = 2 tokens, M = T + N, d embedding size,
L trained classes (bona + seen spoof methods).
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from spoofdiar.errors import CheckpointError, ConfigError, EmptyInputError
from spoofdiar.objectives import NORM_EPS, SCHEMES, cosine_prototype_scores

logger = structlog.get_logger(__name__)

ARCHITECTURES = ("merged", "dual_branch")
TOKEN_TARGETS = ("dia", "loc")
BONA_TOKEN, SPOOF_TOKEN = 0, 1


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 32
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    n_tokens: int = 2
    n_classes: int = 4
    gmlp_depth: int = 1
    gmlp_d_ffn: Optional[int] = None
    gmlp_kernel: int = 3
    architecture: str = "merged"
    use_attractor_tokens: bool = True
    token_targets: Tuple[str, ...] = ("dia", "loc")
    label_scheme: str = "Mul"
    use_loc_loss: bool = True
    use_concat_class: bool = True
    positional_encoding: bool = True
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "token_targets", tuple(sorted(set(self.token_targets))))
        self.validate()

    def validate(self) -> None:
        if self.n_tokens != 2:
            raise ConfigError("exactly 2 attractor tokens (bona, spoof) are supported", "n_tokens")
        if self.d <= 0 or self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} must be positive and divisible by n_heads={self.n_heads}", "d")
        if self.n_layers < 1:
            raise ConfigError("need at least one transformer layer", "n_layers")
        if self.n_classes < 2:
            raise ConfigError("need bona plus at least one spoof class", "n_classes")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"expected one of {ARCHITECTURES}", "architecture")
        if self.label_scheme not in SCHEMES:
            raise ConfigError(f"expected one of {SCHEMES}", "label_scheme")
        unknown = set(self.token_targets) - set(TOKEN_TARGETS)
        if unknown:
            raise ConfigError(f"unknown token targets {sorted(unknown)}", "token_targets")
        if self.use_attractor_tokens and not self.token_targets:
            raise ConfigError("must be nonempty when attractor tokens are used", "token_targets")
        if self.gmlp_depth < 0:
            raise ConfigError("must be >= 0", "gmlp_depth")
        if self.gmlp_ffn % 2 != 0:
            raise ConfigError("must be even (split into value and gate halves)", "gmlp_d_ffn")
        if self.gmlp_kernel < 1 or self.gmlp_kernel % 2 == 0:
            raise ConfigError("must be a positive odd number", "gmlp_kernel")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("must lie in [0, 1)", "dropout")

    @property
    def gmlp_ffn(self) -> int:
        return self.gmlp_d_ffn if self.gmlp_d_ffn else 4 * self.d

    @property
    def tokens_for_loc(self) -> bool:
        return self.use_attractor_tokens and "loc" in self.token_targets

    @property
    def tokens_for_dia(self) -> bool:
        return self.use_attractor_tokens and "dia" in self.token_targets

    @property
    def embedding_dim(self) -> int:
        """Width of E': 2d when frames are concatenated with H, d otherwise"""
        return 2 * self.d if self.tokens_for_dia else self.d

    @property
    def n_dia_classes(self) -> int:
        if self.label_scheme == "Spf":
            return self.n_classes - 1
        return self.n_classes + (1 if self.use_concat_class else 0)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["token_targets"] = list(self.token_targets)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        data["token_targets"] = tuple(data.get("token_targets", ()))
        return cls(**data)


@dataclass(eq=False)
class ForwardOutputs:
    """Per-utterance outputs; fields not produced by a configuration are None"""

    E: torch.Tensor
    E_frames: torch.Tensor
    P_loc: torch.Tensor
    E_prime: torch.Tensor
    P_dia: torch.Tensor
    S: Optional[torch.Tensor] = None
    C: Optional[torch.Tensor] = None
    H: Optional[torch.Tensor] = None
    P_token: Optional[torch.Tensor] = None
    token_scores: List[torch.Tensor] = field(default_factory=list)
    branches: Dict[str, "ForwardOutputs"] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return int(self.P_loc.shape[0])


def sinusoidal_encoding(T: int, d: int, dtype=torch.float32) -> torch.Tensor:
    position = torch.arange(T, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(T, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)[:, : d // 2]
    return pe.to(dtype)


def cross_attention_loc(S: torch.Tensor, C: torch.Tensor, W_Qs: torch.Tensor,
                        W_Ks: torch.Tensor, d: int) -> torch.Tensor:
    """T x N frame-to-token attention map, softmax over the tokens"""
    S_n = F.normalize(S, dim=-1, eps=NORM_EPS)
    C_n = F.normalize(C, dim=-1, eps=NORM_EPS)
    logits = (S_n @ W_Qs) @ (C_n @ W_Ks).transpose(0, 1) / math.sqrt(d)
    return torch.softmax(logits, dim=-1)


def attractor_conditioning(E_frames: torch.Tensor, C: torch.Tensor, W_Qe: torch.Tensor,
                           W_Ke: torch.Tensor, W_Ve: torch.Tensor, d: int,
                           return_attention: bool = False):
    """Token-conditioned frame features H (T x d)

    Queries and keys use the normalized frames and tokens; the values are the
    unnormalized tokens, so each row of H is a convex combination of C W_Ve.
    """
    E_n = F.normalize(E_frames, dim=-1, eps=NORM_EPS)
    C_n = F.normalize(C, dim=-1, eps=NORM_EPS)
    attention = torch.softmax((E_n @ W_Qe) @ (C_n @ W_Ke).transpose(0, 1) / math.sqrt(d), dim=-1)
    H = attention @ (C @ W_Ve)
    if return_attention:
        return H, attention
    return H


class GatedMLPBlock(nn.Module):
    """gMLP block: channel expansion, spatial gating along the sequence, projection back"""

    def __init__(self, d: int, d_ffn: int, kernel: int):
        super().__init__()
        half = d_ffn // 2
        self.norm = nn.LayerNorm(d)
        self.proj_in = nn.Linear(d, d_ffn)
        self.gate_norm = nn.LayerNorm(half)
        self.spatial = nn.Conv1d(half, half, kernel, padding=kernel // 2, groups=half)
        self.proj_out = nn.Linear(half, d)
        # near-identity gate at init
        nn.init.normal_(self.spatial.weight, std=1e-3)
        nn.init.ones_(self.spatial.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.proj_in(self.norm(x)))
        u, v = h.chunk(2, dim=-1)
        v = self.gate_norm(v)
        v = self.spatial(v.transpose(1, 2)).transpose(1, 2)
        return x + self.proj_out(u * v)


def _matrix(rows: int, cols: int) -> nn.Parameter:
    weight = torch.empty(rows, cols)
    nn.init.xavier_uniform_(weight)
    return nn.Parameter(weight)


class AttractorBranch(nn.Module):
    """Front-end projection, transformer, layer aggregation, gMLP and scoring heads

    The merged model is a single branch producing both localization and
    diarization outputs; the dual-branch model holds one branch for each.
    """

    def __init__(self, config: ModelConfig, produce_loc: bool = True, produce_dia: bool = True):
        super().__init__()
        self.config = config
        self.produce_loc = produce_loc
        self.produce_dia = produce_dia
        self.loc_uses_tokens = produce_loc and config.tokens_for_loc
        self.dia_uses_tokens = produce_dia and config.tokens_for_dia
        self.has_tokens = self.loc_uses_tokens or self.dia_uses_tokens
        d = config.d

        self.input_proj = nn.Linear(config.d_feat, d)
        self.encoder_stack = nn.ModuleList([
            nn.TransformerEncoderLayer(d, config.n_heads, config.d_ff, config.dropout,
                                       activation="gelu", batch_first=True)
            for _ in range(config.n_layers)
        ])
        self.layer_weights_frames = nn.Parameter(torch.zeros(config.n_layers))
        self.gmlp = nn.Sequential(*[
            GatedMLPBlock(d, config.gmlp_ffn, config.gmlp_kernel) for _ in range(config.gmlp_depth)
        ])

        if self.has_tokens:
            self.layer_weights_tokens = nn.Parameter(torch.zeros(config.n_layers))
            self.attractor_tokens = nn.Parameter(0.02 * torch.randn(config.n_tokens, d))
            self.W_s = _matrix(d, d)
            self.b_s = nn.Parameter(torch.zeros(d))
            self.W_c = _matrix(d, d)
            self.b_c = nn.Parameter(torch.zeros(d))
            self.O_token1 = nn.Parameter(torch.randn(d, 1))
            self.O_token2 = nn.Parameter(torch.randn(d, config.n_classes - 1))

        if produce_loc:
            if self.loc_uses_tokens:
                self.W_Qs = _matrix(d, d)
                self.W_Ks = _matrix(d, d)
            else:
                self.loc_head = nn.Linear(d, 2)

        if produce_dia:
            if self.dia_uses_tokens:
                self.W_Qe = _matrix(d, d)
                self.W_Ke = _matrix(d, d)
                self.W_Ve = _matrix(d, d)
            dim = 2 * d if self.dia_uses_tokens else d
            self.O_dia = nn.Parameter(torch.randn(dim, config.n_dia_classes))

    def encode(self, features: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """E (M x d) after layer aggregation and gMLP, and the frame count T"""
        T = features.shape[0]
        x = self.input_proj(features)
        if self.config.positional_encoding:
            x = x + sinusoidal_encoding(T, self.config.d, x.dtype)
        if self.has_tokens:
            x = torch.cat([x, self.attractor_tokens], dim=0)

        h = x.unsqueeze(0)
        layer_outputs = []
        for layer in self.encoder_stack:
            h = layer(h)
            layer_outputs.append(h[0])
        stacked = torch.stack(layer_outputs)

        frames = torch.einsum("l,ltd->td", torch.softmax(self.layer_weights_frames, dim=0), stacked[:, :T])
        if self.has_tokens:
            tokens = torch.einsum("l,ltd->td", torch.softmax(self.layer_weights_tokens, dim=0), stacked[:, T:])
            A = torch.cat([frames, tokens], dim=0)
        else:
            A = frames
        return self.gmlp(A.unsqueeze(0))[0]

    def forward(self, features: torch.Tensor) -> ForwardOutputs:
        if features.dim() != 2 or features.shape[0] == 0:
            raise EmptyInputError(f"expected a non-empty T x d_feat matrix, got shape {tuple(features.shape)}")
        d = self.config.d
        T = features.shape[0]
        E = self.encode(features)
        E_frames = E[:T]

        S = C = H = P_token = None
        token_scores: List[torch.Tensor] = []
        if self.has_tokens:
            S = F.gelu(E_frames @ self.W_s + self.b_s)
            C = F.gelu(E[T:] @ self.W_c + self.b_c)
            P_token = torch.cat([
                cosine_prototype_scores(C[BONA_TOKEN:BONA_TOKEN + 1], self.O_token1),
                cosine_prototype_scores(C[SPOOF_TOKEN:SPOOF_TOKEN + 1], self.O_token2),
            ], dim=1)
            token_scores.append(P_token)

        P_loc = None
        if self.produce_loc:
            if self.loc_uses_tokens:
                P_loc = cross_attention_loc(S, C, self.W_Qs, self.W_Ks, d)
            else:
                P_loc = torch.softmax(self.loc_head(E_frames), dim=-1)

        E_prime = P_dia = None
        if self.produce_dia:
            if self.dia_uses_tokens:
                H = attractor_conditioning(E_frames, C, self.W_Qe, self.W_Ke, self.W_Ve, d)
                E_prime = torch.cat([E_frames, H], dim=-1)
            else:
                E_prime = E_frames
            P_dia = cosine_prototype_scores(E_prime, self.O_dia)

        return ForwardOutputs(E=E, E_frames=E_frames, P_loc=P_loc, E_prime=E_prime, P_dia=P_dia,
                              S=S, C=C, H=H, P_token=P_token, token_scores=token_scores)


class DualBranchDiarizer(nn.Module):
    """Two disjoint parameter sets: localization scores and clustering embeddings"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.loc_branch = AttractorBranch(config, produce_loc=True, produce_dia=False)
        self.dia_branch = AttractorBranch(config, produce_loc=False, produce_dia=True)

    def forward(self, features: torch.Tensor) -> ForwardOutputs:
        loc = self.loc_branch(features)
        dia = self.dia_branch(features)
        return ForwardOutputs(
            E=dia.E, E_frames=dia.E_frames, P_loc=loc.P_loc, E_prime=dia.E_prime, P_dia=dia.P_dia,
            S=loc.S, C=dia.C if dia.C is not None else loc.C, H=dia.H,
            P_token=dia.P_token if dia.P_token is not None else loc.P_token,
            token_scores=loc.token_scores + dia.token_scores,
            branches={"loc": loc, "dia": dia},
        )


SpoofDiarizer = Union[AttractorBranch, DualBranchDiarizer]


def init_model(config: ModelConfig, seed: int = 0) -> SpoofDiarizer:
    """Deterministic initialization for a (config, seed) pair"""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if config.architecture == "dual_branch":
            model = DualBranchDiarizer(config)
        else:
            model = AttractorBranch(config)
    logger.debug("model_initialized", architecture=config.architecture,
                 tokens=config.use_attractor_tokens, n_params=count_parameters(model))
    return model


def forward(model: SpoofDiarizer, features) -> ForwardOutputs:
    """Run the model on one utterance (T x d_feat array or tensor)"""
    if not torch.is_tensor(features):
        features = torch.from_numpy(np.asarray(features))
    return model(features.to(next(model.parameters()).dtype))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


CHECKPOINT_MAGIC = b"SDCKPT01"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sII")


def save_checkpoint(model: SpoofDiarizer, path, extra: Optional[Dict[str, Any]] = None) -> None:
    """Versioned container: JSON header (config echo, tensor index) + float32 LE tensors"""
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name, tensor in state.items():
        array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        index.append({"name": name, "shape": list(array.shape), "offset": offset, "count": int(array.size)})
        blobs.append(array.tobytes())
        offset += array.size
    header = json.dumps({"config": model.config.to_dict(), "tensors": index, "extra": extra or {}},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[SpoofDiarizer, Dict[str, Any]]:
    """Rebuild the model stored in a checkpoint; returns (model, extra metadata)"""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, header_len = _CKPT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(data[_CKPT_HEADER.size:_CKPT_HEADER.size + header_len])
    body = np.frombuffer(data, dtype="<f4", offset=_CKPT_HEADER.size + header_len)

    config = ModelConfig.from_dict(header["config"])
    model = init_model(config, seed=0)
    state = {}
    for entry in header["tensors"]:
        chunk = body[entry["offset"]:entry["offset"] + entry["count"]]
        if chunk.size != entry["count"]:
            raise CheckpointError(f"{path}: tensor {entry['name']} is truncated")
        state[entry["name"]] = torch.from_numpy(chunk.reshape(entry["shape"]).copy())
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {e}") from e
    model.eval()
    return model, header.get("extra", {})
