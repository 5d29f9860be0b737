"""Entity-aware neural re-ranking with query-document interactions."""

from .errors import DataFormatError, NumericError, QderError
from .interaction import (
    AblationConfig,
    Adapter,
    BilinearModel,
    InteractionFeatures,
    LinearModel,
    attend,
    backward,
    build_features,
    forward,
    init_model,
    load_model,
    logistic,
    save_model,
)
from .records import (
    Candidate,
    DocumentRecord,
    EntitySet,
    QrelEntry,
    QueryRecord,
    TokenMatrix,
    validate_record,
)
from .trainer import (
    Dataset,
    Example,
    FoldSplit,
    TrainConfig,
    adam_step,
    bce_loss,
    build_examples,
    cross_validate,
    make_dataset,
    make_folds,
    train_fold,
)

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "Adapter",
    "BilinearModel",
    "Candidate",
    "DataFormatError",
    "Dataset",
    "DocumentRecord",
    "EntitySet",
    "Example",
    "FoldSplit",
    "InteractionFeatures",
    "LinearModel",
    "NumericError",
    "QderError",
    "QrelEntry",
    "QueryRecord",
    "TokenMatrix",
    "TrainConfig",
    "adam_step",
    "attend",
    "backward",
    "bce_loss",
    "build_examples",
    "build_features",
    "cross_validate",
    "forward",
    "init_model",
    "load_model",
    "logistic",
    "make_dataset",
    "make_folds",
    "save_model",
    "train_fold",
    "validate_record",
]
