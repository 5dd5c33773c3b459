"""
Experiment configuration
INI files with [corpus], [model], [inference], [training] and [experiment]
sections parsed into typed dataclasses, plus ablation grid files
"""

import configparser
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import structlog
from dotenv import load_dotenv

from spoofdiar.corpus import CorpusSpec
from spoofdiar.errors import ConfigError, CorpusSpecError
from spoofdiar.inference import InferenceConfig
from spoofdiar.model import ModelConfig
from spoofdiar.training import TrainingConfig

logger = structlog.get_logger(__name__)

DEFAULT_OUT = "runs"
SECTIONS = {
    "corpus": CorpusSpec,
    "model": ModelConfig,
    "inference": InferenceConfig,
    "training": TrainingConfig,
}
# derived from [corpus]; setting them in [model] is ignored
DERIVED_MODEL_KEYS = ("d_feat", "n_classes")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def load_environment() -> None:
    """Read an optional .env into os.environ without overriding what is already set"""
    load_dotenv(override=False)


def env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got '{raw}'", name) from None


def default_out_dir() -> str:
    return os.getenv("SPOOFDIAR_OUT", DEFAULT_OUT)


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    name: str = "default"
    seeds: Tuple[int, ...] = (0, 1, 2)
    out_dir: str = DEFAULT_OUT
    corpus_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("at least one seed is required", "experiment.seeds")
        model = dataclasses.replace(self.model, d_feat=self.corpus.d_feat,
                                    n_classes=self.corpus.n_seen_classes)
        object.__setattr__(self, "model", model)

    def resolved_corpus_dir(self) -> Path:
        if self.corpus_dir:
            return Path(self.corpus_dir)
        return Path(self.out_dir) / "corpora" / corpus_key(self.corpus)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "corpus": self.corpus.to_dict(),
            "model": self.model.to_dict(),
            "inference": self.inference.to_dict(),
            "training": self.training.to_dict(),
            "experiment": {"name": self.name, "seeds": list(self.seeds), "out_dir": self.out_dir,
                           "corpus_dir": self.corpus_dir},
        }


EXPERIMENT_KEYS = {"name": str, "seeds": Tuple[int, ...], "out_dir": str, "corpus_dir": Optional[str]}


def corpus_key(spec: CorpusSpec) -> str:
    """Short stable hash of a corpus spec, used to cache generated corpora"""
    blob = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _coerce(raw: str, tp, where: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ("", "none", "null"):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(raw, inner, where)
    if origin in (tuple, Tuple):
        items = [item.strip() for item in raw.split(",") if item.strip()]
        if args and args[-1] is Ellipsis:
            return tuple(_coerce(item, args[0], where) for item in items)
        if len(items) != len(args):
            raise ConfigError(f"expected {len(args)} comma-separated values, got '{raw}'", where)
        return tuple(_coerce(item, a, where) for item, a in zip(items, args))
    if tp is bool:
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ConfigError(f"expected a boolean, got '{raw}'", where)
    if tp is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got '{raw}'", where) from None
    if tp is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got '{raw}'", where) from None
    return raw


def _field_types(cls) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _apply_section(current, section: str, values: Dict[str, str]):
    types = _field_types(type(current))
    updates = {}
    for key, raw in values.items():
        where = f"{section}.{key}"
        if key not in types:
            raise ConfigError("unknown key", where)
        if section == "model" and key in DERIVED_MODEL_KEYS:
            logger.warning("derived_key_ignored", key=where, source="corpus")
            continue
        updates[key] = _coerce(raw, types[key], where)
    if not updates:
        return current
    try:
        return dataclasses.replace(current, **updates)
    except (ConfigError, CorpusSpecError) as e:
        field_name = getattr(e, "field", None)
        raise ConfigError(str(e).split(": ", 1)[-1],
                          f"{section}.{field_name}" if field_name else section) from e
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), section) from e


def apply_overrides(config: ExperimentConfig, deltas: Dict[str, str]) -> ExperimentConfig:
    """Apply dotted 'section.key' = value deltas (grid cells, CLI flags)"""
    grouped: Dict[str, Dict[str, str]] = {}
    for dotted, raw in deltas.items():
        if "." not in dotted:
            raise ConfigError("expected 'section.key'", dotted)
        section, key = dotted.split(".", 1)
        grouped.setdefault(section.strip(), {})[key.strip()] = str(raw)

    sections = {name: getattr(config, name) for name in SECTIONS}
    experiment = {"name": config.name, "seeds": config.seeds, "out_dir": config.out_dir,
                  "corpus_dir": config.corpus_dir}
    for section, values in grouped.items():
        if section in SECTIONS:
            sections[section] = _apply_section(sections[section], section, values)
        elif section == "experiment":
            for key, raw in values.items():
                if key not in EXPERIMENT_KEYS:
                    raise ConfigError("unknown key", f"experiment.{key}")
                experiment[key] = _coerce(raw, EXPERIMENT_KEYS[key], f"experiment.{key}")
        else:
            raise ConfigError("unknown section", section)
    return ExperimentConfig(**sections, **experiment)


def _read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    return parser


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Defaults, then the INI file at path (if any); out_dir defaults to $SPOOFDIAR_OUT"""
    base = ExperimentConfig(out_dir=default_out_dir())
    if path is None:
        return base
    parser = _read_ini(path)
    deltas = {f"{section}.{key}": value
              for section in parser.sections() for key, value in parser.items(section)}
    config = apply_overrides(base, deltas)
    logger.info("config_loaded", path=str(path), name=config.name, seeds=list(config.seeds))
    return config


@dataclass(frozen=True)
class GridCell:
    name: str
    deltas: Dict[str, str]


@dataclass(frozen=True)
class AblationGrid:
    cells: Tuple[GridCell, ...]
    reference: Optional[str] = None

    def configs(self, base: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
        """Every cell applied to base; an empty grid is the baseline alone"""
        if not self.cells:
            return [("baseline", base)]
        return [(cell.name, apply_overrides(base, {**cell.deltas, "experiment.name": cell.name}))
                for cell in self.cells]


def load_grid(path) -> AblationGrid:
    """Sections are cells with dotted deltas; an optional [grid] section holds 'reference'"""
    parser = _read_ini(path)
    cells = []
    reference = None
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "grid":
            reference = items.get("reference") or None
            continue
        cells.append(GridCell(section, items))
    if reference is not None and reference not in {c.name for c in cells}:
        raise ConfigError(f"reference cell '{reference}' is not in the grid", "grid.reference")
    return AblationGrid(tuple(cells), reference)


def to_ini(config: ExperimentConfig) -> str:
    """Config echo in the same INI layout load_config reads"""
    def _fmt(value) -> str:
        if value is None:
            return "none"
        if isinstance(value, (list, tuple)):
            return ", ".join(str(v) for v in value)
        return str(value).lower() if isinstance(value, bool) else str(value)

    lines = []
    for section, values in config.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {_fmt(value)}")
        lines.append("")
    return "\n".join(lines)


def config_fields() -> Dict[str, Dict[str, Any]]:
    """section -> {key: default} for documentation and tests"""
    out = {name: asdict(cls()) for name, cls in SECTIONS.items()}
    out["experiment"] = {"name": "default", "seeds": (0, 1, 2), "out_dir": DEFAULT_OUT, "corpus_dir": None}
    return out
