"""
spoofdiar error types
Every failure raised by the library derives from SpoofDiarError
"""

from typing import Any, Dict, Optional


class SpoofDiarError(Exception):
    """Base class for all spoofdiar failures"""


class LabelParseError(SpoofDiarError):
    """Malformed line in a label file"""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TimelineValidationError(SpoofDiarError):
    """Segments overlap, leave gaps or are otherwise inconsistent"""


class VocabularyError(SpoofDiarError):
    """Label not present in the vocabulary, or vocabulary malformed"""


class CorpusSpecError(SpoofDiarError):
    """Synthetic corpus settings are invalid or infeasible"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class ConfigError(SpoofDiarError):
    """Experiment, model or inference configuration is invalid"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class EmptyInputError(SpoofDiarError):
    """Zero-length utterance passed to the model"""


class ShapeMismatchError(SpoofDiarError):
    """Score and target tensors disagree in shape"""


class TrainingDivergenceError(SpoofDiarError):
    """A loss term became NaN or infinite during training"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None,
                 last_good_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.last_good_checkpoint = last_good_checkpoint


class ClusteringError(SpoofDiarError):
    """Requested cluster count cannot be produced"""


class CoverageError(SpoofDiarError):
    """Cluster ids do not cover exactly the sub-threshold frames"""


class UndefinedMetricError(SpoofDiarError):
    """Metric is undefined for the given input (e.g. single-class EER)"""


class CheckpointError(SpoofDiarError):
    """Checkpoint file is corrupt or does not match the requested config"""
