"""Score tensors and the batch scoring driver.

``score_all`` renders every (prompt, example) pair, asks the backend for the
log-likelihood of each verbalized choice, and assembles the dense
prompt x example x choice tensor everything downstream consumes. Results are
written position-addressed, so the tensor is bit-identical no matter how
requests are batched, parallelized, or served from cache.

Phrase scores default to the sum of token log-likelihoods as returned by the
backend; ``length_norm`` divides by the phrase's whitespace token count when
the backend reports phrase-level sums. ``normalize="softmax"`` renormalizes
over the choice set so per-cell probabilities sum to one -- the default,
since confidence gaps are only comparable across prompts on a normalized
scale. ``normalize="none"`` keeps raw likelihoods for raw-likelihood studies.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .backends import ScoreRequest, ScorerBackend
from .cache import ScoreCache, make_cache_key
from .catalog import Prompt, TaskSpec, UnlabeledExample, candidate_phrases, render
from .errors import BackendError, ScoringFailedError, ValidationError

logger = logging.getLogger(__name__)

NORMALIZE_MODES = ("softmax", "none")


@dataclass(frozen=True)
class ScoreTensor:
    """Dense p x n x c array of finite natural-log scores.

    Axis order matches the catalog's prompt order, the dataset's example
    order, and the task's choice order. When ``normalized`` is True the
    per-cell scores are log-probabilities over the choice set (all <= 0).
    Immutable after construction; safe to share across workers.
    """

    prompt_ids: tuple[str, ...]
    example_ids: tuple[str, ...]
    choices: tuple[str, ...]
    logprobs: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        arr = np.asarray(self.logprobs, dtype=np.float64)
        expected = (len(self.prompt_ids), len(self.example_ids), len(self.choices))
        if arr.shape != expected:
            raise ValidationError(f"tensor shape {arr.shape} != {expected}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("tensor contains NaN or infinite entries")
        if self.normalized and np.any(arr > 1e-9):
            raise ValidationError("normalized tensor has log-probabilities above 0")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "logprobs", arr)
        object.__setattr__(self, "prompt_ids", tuple(self.prompt_ids))
        object.__setattr__(self, "example_ids", tuple(self.example_ids))
        object.__setattr__(self, "choices", tuple(self.choices))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.logprobs.shape  # type: ignore[return-value]

    def probs(self) -> np.ndarray:
        """Per-cell choice probabilities, exp of the stored log scores."""
        return np.exp(self.logprobs)

    def prompt_index(self, prompt_id: str) -> int:
        try:
            return self.prompt_ids.index(prompt_id)
        except ValueError:
            raise ValidationError(f"unknown prompt_id {prompt_id!r}") from None

    def restrict(self, prompt_ids: Sequence[str]) -> "ScoreTensor":
        """Sub-tensor over the given prompts, in the given order."""
        rows = [self.prompt_index(pid) for pid in prompt_ids]
        return ScoreTensor(
            prompt_ids=tuple(prompt_ids),
            example_ids=self.example_ids,
            choices=self.choices,
            logprobs=self.logprobs[rows],
            normalized=self.normalized,
        )


@dataclass(frozen=True)
class PredictionMatrix:
    """Per-(prompt, example) argmax choices, stored as choice indices."""

    prompt_ids: tuple[str, ...]
    example_ids: tuple[str, ...]
    choices: tuple[str, ...]
    indices: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.indices, dtype=np.int64)
        expected = (len(self.prompt_ids), len(self.example_ids))
        if arr.shape != expected:
            raise ValidationError(f"prediction shape {arr.shape} != {expected}")
        if arr.size and (arr.min() < 0 or arr.max() >= len(self.choices)):
            raise ValidationError("prediction index outside the choice set")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "indices", arr)
        object.__setattr__(self, "prompt_ids", tuple(self.prompt_ids))
        object.__setattr__(self, "example_ids", tuple(self.example_ids))
        object.__setattr__(self, "choices", tuple(self.choices))

    def row(self, prompt_id: str) -> np.ndarray:
        return self.indices[self.prompt_ids.index(prompt_id)]

    def labels_row(self, prompt_id: str) -> list[str]:
        return [self.choices[j] for j in self.row(prompt_id)]

    def restrict(self, prompt_ids: Sequence[str]) -> "PredictionMatrix":
        rows = [self.prompt_ids.index(pid) for pid in prompt_ids]
        return PredictionMatrix(
            prompt_ids=tuple(prompt_ids),
            example_ids=self.example_ids,
            choices=self.choices,
            indices=self.indices[rows],
        )


def predict(tensor: ScoreTensor) -> PredictionMatrix:
    """Argmax choice per (prompt, example); ties go to the earliest choice."""
    return PredictionMatrix(
        prompt_ids=tensor.prompt_ids,
        example_ids=tensor.example_ids,
        choices=tensor.choices,
        indices=np.argmax(tensor.logprobs, axis=2),
    )


def _label_tokens(phrase: str) -> int:
    return max(1, len(phrase.split()))


def _chunk(seq: list, size: int) -> list[list]:
    return [seq[i : i + size] for i in range(0, len(seq), size)]


def score_all(
    task: TaskSpec,
    prompts: Sequence[Prompt],
    examples: Sequence[UnlabeledExample],
    backend: ScorerBackend,
    cache: ScoreCache | None = None,
    *,
    normalize: str = "softmax",
    length_norm: bool = False,
    jobs: int = 1,
) -> ScoreTensor:
    """Fill the full p x n x c score tensor.

    Cells present in the cache are served without backend calls; newly
    computed cells are appended to the cache before returning. If any cell
    cannot be scored after the backend's bounded retries, the failing
    (prompt_id, example_id) coordinates are isolated and reported together.
    """
    if not prompts or not examples:
        raise ValidationError("score_all needs at least one prompt and one example")
    if normalize not in NORMALIZE_MODES:
        raise ValidationError(f"normalize must be one of {NORMALIZE_MODES}")
    if jobs < 1:
        raise ValidationError("jobs must be >= 1")

    caps = backend.capabilities
    divide_lengths = length_norm and caps.granularity == "phrase"
    choice_labels = task.choices
    raw = np.empty((len(prompts), len(examples), len(choice_labels)), dtype=np.float64)

    def cell_keys(req: ScoreRequest) -> list[str]:
        coords = None if caps.content_addressed else (req.prompt_id, req.example_id)
        return [
            make_cache_key(backend.model_id, req.input, cand, length_norm, coords)
            for cand in req.candidates
        ]

    pending: list[tuple[int, int, ScoreRequest]] = []
    for i, prompt in enumerate(prompts):
        phrases = candidate_phrases(task, prompt)
        for k, example in enumerate(examples):
            req = ScoreRequest(
                input=render(prompt, example),
                candidates=phrases,
                prompt_id=prompt.prompt_id,
                example_id=example.example_id,
                choice_labels=choice_labels,
            )
            if cache is not None:
                cached = [cache.get(key) for key in cell_keys(req)]
                if all(v is not None for v in cached):
                    raw[i, k, :] = cached
                    continue
            pending.append((i, k, req))

    def score_requests(chunk: list[tuple[int, int, ScoreRequest]]) -> list[tuple[str, str]]:
        """Score one chunk in place; returns coordinates that failed."""
        reqs = [req for _, _, req in chunk]
        try:
            results = backend.score_batch(reqs)
        except BackendError as exc:
            if len(chunk) == 1:
                logger.error("cell (%s, %s) failed: %s",
                             reqs[0].prompt_id, reqs[0].example_id, exc)
                return [(reqs[0].prompt_id, reqs[0].example_id)]
            # Isolate the failing cells with per-item requests.
            failed: list[tuple[str, str]] = []
            for item in chunk:
                failed.extend(score_requests([item]))
            return failed
        for (i, k, req), scores in zip(chunk, results):
            values = list(scores)
            if divide_lengths:
                values = [v / _label_tokens(c) for v, c in zip(values, req.candidates)]
            raw[i, k, :] = values
            if cache is not None:
                for key, value in zip(cell_keys(req), values):
                    cache.put(key, value)
        return []

    chunks = _chunk(pending, caps.max_batch_size)
    failed: list[tuple[str, str]] = []
    if jobs == 1 or len(chunks) <= 1:
        for chunk in chunks:
            failed.extend(score_requests(chunk))
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(score_requests, chunks):
                failed.extend(result)
    if failed:
        raise ScoringFailedError(failed)

    logprobs = log_softmax(raw, axis=2) if normalize == "softmax" else raw
    return ScoreTensor(
        prompt_ids=tuple(p.prompt_id for p in prompts),
        example_ids=tuple(e.example_id for e in examples),
        choices=choice_labels,
        logprobs=logprobs,
        normalized=normalize == "softmax",
    )
