"""Prompt selection with unlabeled data only.

The pipeline: score each candidate prompt's confidence (summed gap between
its top two choice probabilities over all examples), drop the low-confidence
cluster found by an exact two-cluster 1-D k-means, pseudo-label every example
with an ensemble of the kept prompts, and select the prompt whose own
predictions agree most with the pseudo-labels.

Everything here is a pure function over immutable inputs. Ensemble
reductions run in ascending prompt_id order, so floating-point sums are
reproducible and the selected prompt never depends on how the candidate list
was permuted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .scoring import PredictionMatrix, ScoreTensor, predict

STRATEGIES = ("logprob_mean", "prob_mean", "majority_vote")

# The fixed tie rule: ensemble score ties fall back to summed per-prompt
# log-probability, then earliest choice in task order.
TIE_BREAK = "sumlogp_then_choice_order"


@dataclass(frozen=True)
class EnsembleConfig:
    """Which ensemble combines the kept prompts into pseudo-labels."""

    strategy: str = "logprob_mean"
    tie_break: str = TIE_BREAK

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(
                f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}"
            )
        if self.tie_break != TIE_BREAK:
            raise ValidationError(f"unsupported tie_break {self.tie_break!r}")


@dataclass(frozen=True)
class ConfidenceReport:
    """Per-prompt confidence scores and the kept/discarded split."""

    confidences: Mapping[str, float]
    kept: tuple[str, ...]
    discarded: tuple[str, ...]
    cluster_means: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "confidences", dict(self.confidences))
        if not self.kept:
            raise ValidationError("kept prompt set must not be empty")
        overlap = set(self.kept) & set(self.discarded)
        if overlap:
            raise ValidationError(f"prompts both kept and discarded: {sorted(overlap)}")
        if self.discarded:
            if min(self.confidences[p] for p in self.kept) < max(
                self.confidences[p] for p in self.discarded
            ):
                raise ValidationError("kept/discarded sets interleave in confidence")

    def to_json_dict(self) -> dict:
        return {
            "confidences": {p: float(c) for p, c in self.confidences.items()},
            "kept": list(self.kept),
            "discarded": list(self.discarded),
            "cluster_means": [float(m) for m in self.cluster_means],
        }


@dataclass(frozen=True)
class SelectionReport:
    """Full audit trail of one selection run."""

    confidence: ConfidenceReport
    pseudo_labels: tuple[str, ...]
    pseudo_acc: Mapping[str, float]
    selected: str
    strategy: str
    example_ids: tuple[str, ...] = ()
    extras: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "pseudo_labels", tuple(self.pseudo_labels))
        object.__setattr__(self, "pseudo_acc", dict(self.pseudo_acc))
        object.__setattr__(self, "example_ids", tuple(self.example_ids))
        object.__setattr__(self, "extras", dict(self.extras))
        if self.selected not in self.confidence.kept:
            raise ValidationError(
                f"selected prompt {self.selected!r} is not in the kept set"
            )
        for pid, acc in self.pseudo_acc.items():
            if not 0.0 <= acc <= 1.0:
                raise ValidationError(f"pseudo accuracy for {pid!r} out of [0,1]: {acc}")

    def to_json_dict(self) -> dict:
        return {
            "selected": self.selected,
            "strategy": self.strategy,
            "confidence": self.confidence.to_json_dict(),
            "pseudo_acc": {p: float(a) for p, a in self.pseudo_acc.items()},
            "pseudo_labels": list(self.pseudo_labels),
            "example_ids": list(self.example_ids),
            **({"extras": dict(self.extras)} if self.extras else {}),
        }

    def to_json(self) -> str:
        """Deterministic byte representation (keys sorted)."""
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def confidence_scores(tensor: ScoreTensor) -> np.ndarray:
    """Per-prompt decisiveness: summed top-1 minus top-2 choice probability.

    Under softmax normalization each per-example gap is in [0, 1], so a
    prompt's score lies in [0, n].
    """
    if len(tensor.choices) < 2:
        raise ValidationError("confidence needs at least 2 choices")
    probs = np.sort(tensor.probs(), axis=2)
    gaps = probs[:, :, -1] - probs[:, :, -2]
    return gaps.sum(axis=1)


def _within_cluster_sse(prefix: np.ndarray, prefix_sq: np.ndarray, lo: int, hi: int) -> float:
    """Sum of squared deviations of sorted[lo:hi] from its mean, via prefix sums."""
    count = hi - lo
    total = prefix[hi] - prefix[lo]
    total_sq = prefix_sq[hi] - prefix_sq[lo]
    return total_sq - total * total / count


def filter_prompts(
    prompt_ids: Sequence[str], confidences: Sequence[float]
) -> ConfidenceReport:
    """Exact two-cluster 1-D k-means over confidence scores; keep the upper cluster.

    Scans every split point of the sorted scores and takes the one minimizing
    the within-cluster sum of squared deviations -- optimal and deterministic,
    with no initialization sensitivity. With two or fewer prompts, or all
    scores equal, nothing is filtered.
    """
    if len(prompt_ids) != len(confidences):
        raise ValidationError("prompt_ids and confidences differ in length")
    if not prompt_ids:
        raise ValidationError("filter_prompts needs at least one prompt")
    values = np.asarray(confidences, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValidationError("confidence scores must be finite")
    conf_map = {pid: float(c) for pid, c in zip(prompt_ids, values)}
    p = len(prompt_ids)

    if p <= 2 or np.all(values == values[0]):
        mean = float(values.mean())
        return ConfidenceReport(
            confidences=conf_map,
            kept=tuple(sorted(prompt_ids)),
            discarded=(),
            cluster_means=(mean, mean),
        )

    # Sort by (confidence, prompt_id) so equal scores split deterministically
    # regardless of input order.
    order = sorted(range(p), key=lambda i: (values[i], prompt_ids[i]))
    sorted_values = values[order]
    prefix = np.concatenate(([0.0], np.cumsum(sorted_values)))
    prefix_sq = np.concatenate(([0.0], np.cumsum(sorted_values**2)))

    best_split, best_sse = 1, np.inf
    for split in range(1, p):
        sse = _within_cluster_sse(prefix, prefix_sq, 0, split) + _within_cluster_sse(
            prefix, prefix_sq, split, p
        )
        if sse < best_sse:
            best_split, best_sse = split, sse

    low = [prompt_ids[i] for i in order[:best_split]]
    high = [prompt_ids[i] for i in order[best_split:]]
    return ConfidenceReport(
        confidences=conf_map,
        kept=tuple(sorted(high)),
        discarded=tuple(sorted(low)),
        cluster_means=(
            float(sorted_values[:best_split].mean()),
            float(sorted_values[best_split:].mean()),
        ),
    )


def _ordered_by_prompt_id(tensor: ScoreTensor) -> ScoreTensor:
    ordered = tuple(sorted(tensor.prompt_ids))
    return tensor if ordered == tensor.prompt_ids else tensor.restrict(ordered)


def ensemble_scores(tensor: ScoreTensor, config: EnsembleConfig) -> np.ndarray:
    """The n x c ensemble score matrix s(x_k, y) for the configured strategy."""
    tensor = _ordered_by_prompt_id(tensor)
    if config.strategy == "logprob_mean":
        return tensor.logprobs.mean(axis=0)
    if config.strategy == "prob_mean":
        return np.exp(tensor.logprobs).mean(axis=0)
    # majority_vote: per-prompt argmax predictions, counted per choice
    preds = np.argmax(tensor.logprobs, axis=2)
    n, c = len(tensor.example_ids), len(tensor.choices)
    votes = np.zeros((n, c), dtype=np.float64)
    for k in range(n):
        votes[k] = np.bincount(preds[:, k], minlength=c)
    return votes


def ensemble_predict(tensor: ScoreTensor, config: EnsembleConfig) -> np.ndarray:
    """Pseudo-label indices, one per example, from the prompt ensemble.

    Score ties resolve to the earliest choice in task order; majority-vote
    ties are first broken by summed per-prompt log-probability.
    """
    if not tensor.prompt_ids:
        raise ValidationError("ensemble needs at least one prompt")
    tensor = _ordered_by_prompt_id(tensor)
    scores = ensemble_scores(tensor, config)
    if config.strategy != "majority_vote":
        return np.argmax(scores, axis=1)

    sum_logp = tensor.logprobs.sum(axis=0)
    top = scores.max(axis=1, keepdims=True)
    tie_scores = np.where(scores == top, sum_logp, -np.inf)
    return np.argmax(tie_scores, axis=1)


def _labels_to_indices(labels: Sequence[str], choices: tuple[str, ...]) -> np.ndarray:
    lookup = {c: j for j, c in enumerate(choices)}
    try:
        return np.asarray([lookup[lab] for lab in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"label {exc} is not among the task choices") from None


def pseudo_accuracy(
    preds: PredictionMatrix,
    pseudo_labels: Sequence[str] | np.ndarray,
    prompt_ids: Sequence[str] | None = None,
) -> dict[str, float]:
    """Per-prompt agreement with the pseudo-labels.

    ``pseudo_labels`` may be label ids or choice indices; it must cover the
    prediction matrix's examples in the same order.
    """
    if isinstance(pseudo_labels, np.ndarray) and pseudo_labels.dtype != object \
            and np.issubdtype(pseudo_labels.dtype, np.integer):
        targets = pseudo_labels.astype(np.int64)
    else:
        targets = _labels_to_indices(list(pseudo_labels), preds.choices)
    if targets.shape != (len(preds.example_ids),):
        raise ValidationError(
            f"pseudo-label length {targets.shape} does not match "
            f"{len(preds.example_ids)} examples"
        )
    ids = list(prompt_ids) if prompt_ids is not None else list(preds.prompt_ids)
    return {
        pid: float(np.mean(preds.row(pid) == targets)) for pid in ids
    }


def select(
    tensor: ScoreTensor,
    config: EnsembleConfig | None = None,
    *,
    no_filter: bool = False,
    score_all_prompts: bool = False,
) -> SelectionReport:
    """Run the full pipeline and return the audit report.

    Only kept prompts are eligible for selection; ``score_all_prompts``
    additionally reports pseudo accuracies of discarded prompts without
    making them eligible. Ties on pseudo accuracy are broken by higher
    confidence, then lexicographically smallest prompt_id, which makes the
    outcome invariant to permutations of the candidate list.
    """
    config = config or EnsembleConfig()
    conf = confidence_scores(tensor)
    if no_filter:
        mean = float(conf.mean())
        report = ConfidenceReport(
            confidences={pid: float(c) for pid, c in zip(tensor.prompt_ids, conf)},
            kept=tuple(sorted(tensor.prompt_ids)),
            discarded=(),
            cluster_means=(mean, mean),
        )
    else:
        report = filter_prompts(tensor.prompt_ids, conf)

    kept_tensor = tensor.restrict(report.kept)
    pseudo_idx = ensemble_predict(kept_tensor, config)
    preds = predict(tensor)
    scored = list(report.kept) + (list(report.discarded) if score_all_prompts else [])
    acc = pseudo_accuracy(preds, pseudo_idx, prompt_ids=scored)

    selected = min(
        report.kept,
        key=lambda pid: (-acc[pid], -report.confidences[pid], pid),
    )
    return SelectionReport(
        confidence=report,
        pseudo_labels=tuple(tensor.choices[j] for j in pseudo_idx),
        pseudo_acc=acc,
        selected=selected,
        strategy=config.strategy,
        example_ids=tensor.example_ids,
    )
