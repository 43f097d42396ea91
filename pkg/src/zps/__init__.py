"""Zero-label prompt selection toolkit.

Pick the best prompt for a task using nothing but unlabeled examples: score
every (prompt, example, choice) triple, filter out low-confidence prompts,
pseudo-label the examples with an ensemble of the survivors, and select the
prompt that agrees most with the pseudo-labels.
"""

from .backends import (
    BackendCapabilities,
    RemoteBackend,
    ScoreRequest,
    ScorerBackend,
    SyntheticBackend,
    derived_profile,
)
from .cache import ScoreCache, make_cache_key
from .catalog import (
    Prompt,
    PromptTemplate,
    TaskSpec,
    UnlabeledExample,
    Verbalizer,
    candidate_phrases,
    canon_label,
    gold_label_map,
    load_catalog,
    load_examples,
    render,
    serialize_catalog,
    validate_prompt,
    verbalize,
)
from .errors import (
    BackendError,
    CacheCorruptionError,
    ProtocolError,
    ScoringFailedError,
    ValidationError,
    ZpsError,
)
from .evalsim import (
    EvalReport,
    RobustnessSpec,
    SimulationResult,
    compare_strategies,
    default_robustness_spec,
    evaluate,
    format_robustness_table,
    format_strategy_table,
    load_robustness_spec,
    simulate_robustness,
)
from .fewshot import (
    CheckpointPredictions,
    PseudoLabeledSet,
    UsageStrategyRow,
    build_pseudo_val,
    checkpoint_agreement,
    evaluate_usage_strategies,
    format_usage_table,
    load_checkpoint_predictions,
    load_pseudo_labeled,
    select_checkpoint,
    split_labeled,
    top_confidence_pseudo_train,
)
from .scoring import PredictionMatrix, ScoreTensor, predict, score_all
from .selection import (
    STRATEGIES,
    ConfidenceReport,
    EnsembleConfig,
    SelectionReport,
    confidence_scores,
    ensemble_predict,
    ensemble_scores,
    filter_prompts,
    pseudo_accuracy,
    select,
)

__version__ = "0.1.0"

__all__ = [
    "BackendCapabilities",
    "BackendError",
    "CacheCorruptionError",
    "CheckpointPredictions",
    "ConfidenceReport",
    "EnsembleConfig",
    "EvalReport",
    "PredictionMatrix",
    "Prompt",
    "PromptTemplate",
    "ProtocolError",
    "PseudoLabeledSet",
    "RemoteBackend",
    "RobustnessSpec",
    "STRATEGIES",
    "ScoreCache",
    "ScoreRequest",
    "ScoreTensor",
    "ScorerBackend",
    "ScoringFailedError",
    "SelectionReport",
    "SimulationResult",
    "SyntheticBackend",
    "TaskSpec",
    "UnlabeledExample",
    "UsageStrategyRow",
    "ValidationError",
    "Verbalizer",
    "ZpsError",
    "build_pseudo_val",
    "candidate_phrases",
    "canon_label",
    "checkpoint_agreement",
    "compare_strategies",
    "confidence_scores",
    "default_robustness_spec",
    "derived_profile",
    "ensemble_predict",
    "ensemble_scores",
    "evaluate",
    "evaluate_usage_strategies",
    "filter_prompts",
    "format_robustness_table",
    "format_strategy_table",
    "format_usage_table",
    "gold_label_map",
    "load_catalog",
    "load_checkpoint_predictions",
    "load_examples",
    "load_pseudo_labeled",
    "load_robustness_spec",
    "make_cache_key",
    "predict",
    "pseudo_accuracy",
    "render",
    "score_all",
    "select",
    "select_checkpoint",
    "serialize_catalog",
    "simulate_robustness",
    "split_labeled",
    "top_confidence_pseudo_train",
    "validate_prompt",
    "verbalize",
]
