"""Pluggable scorer backends.

A backend rates candidate phrases against a rendered input and returns one
finite natural-log likelihood per candidate. Two implementations ship here:

* ``RemoteBackend`` talks to any inference service over a small JSON wire
  protocol with bounded exponential-backoff retries.
* ``SyntheticBackend`` is a seeded, closed-form stand-in for a real model,
  used for tests and simulations. Per prompt it is right about a planted
  label with a configured probability, and its score margins are calibrated:
  confident cells tend to be correct ones, and higher-quality prompts are
  more confident overall.

Backends must be deterministic for identical requests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Mapping, Sequence

import requests

from .errors import BackendError, ProtocolError, ValidationError

logger = logging.getLogger(__name__)

# Retry policy: 3 attempts, exponential backoff starting at 500 ms. Keeps the
# client polite toward shared inference services.
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 0.5


@dataclass(frozen=True)
class BackendCapabilities:
    """What a backend can do and how its scores are addressed.

    ``granularity`` is "phrase" when scores are summed token log-likelihoods
    of the whole candidate phrase, "token" when the backend already returns
    a per-token average. ``content_addressed`` is True when a score depends
    only on the (input, candidate) strings; the synthetic backend keys its
    scores by (prompt_id, example_id) instead, and the cache layer respects
    that.
    """

    max_batch_size: int
    granularity: str = "phrase"
    content_addressed: bool = True


@dataclass(frozen=True)
class ScoreRequest:
    """One cell to score: a rendered input and its candidate phrases."""

    input: str
    candidates: tuple[str, ...]
    prompt_id: str
    example_id: str
    choice_labels: tuple[str, ...]


class ScorerBackend(ABC):
    """Interface every scorer implements."""

    @property
    @abstractmethod
    def model_id(self) -> str:
        """Stable identifier of the scorer configuration (cache namespace)."""

    @property
    @abstractmethod
    def capabilities(self) -> BackendCapabilities:
        ...

    @abstractmethod
    def score_batch(self, batch: Sequence[ScoreRequest]) -> list[list[float]]:
        """Log-likelihood per candidate for each request, aligned with input order."""


def _hash01(*parts: str) -> float:
    """Deterministic uniform float in [0, 1) from string parts."""
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


class SyntheticBackend(ScorerBackend):
    """Seeded pseudo-random scorer with planted ground truth.

    For prompt i and example k the planted label receives the highest score
    with probability ``prompt_quality[i]``; whether that happens, which wrong
    label wins otherwise, and all score margins are pure functions of
    (seed, prompt_id, example_id), so identical inputs always produce
    identical scores.

    Margins model a calibrated scorer: they grow with prompt quality, and
    shrink (by ``miss_margin_scale``) on cells where the prompt is wrong.
    """

    def __init__(
        self,
        seed: int | str,
        prompt_quality: Mapping[str, float],
        planted_labels: Mapping[str, str],
        default_quality: float | None = None,
        miss_margin_scale: float = 0.35,
        max_batch_size: int = 256,
    ):
        for pid, q in prompt_quality.items():
            if not 0.0 <= q <= 1.0:
                raise ValidationError(f"quality for prompt {pid!r} out of [0,1]: {q}")
        if default_quality is not None and not 0.0 <= default_quality <= 1.0:
            raise ValidationError(f"default_quality out of [0,1]: {default_quality}")
        self.seed = seed
        self.prompt_quality = dict(prompt_quality)
        self.planted_labels = dict(planted_labels)
        self.default_quality = default_quality
        self.miss_margin_scale = miss_margin_scale
        self._max_batch_size = max_batch_size
        self.calls = 0  # score_batch invocations, for cache tests
        self.cells_scored = 0
        config = json.dumps(
            [seed, sorted(self.prompt_quality.items()), sorted(self.planted_labels.items()),
             default_quality, miss_margin_scale],
            sort_keys=True,
        )
        self._model_id = "synthetic:" + hashlib.sha256(config.encode()).hexdigest()[:12]

    @property
    def model_id(self) -> str:
        return self._model_id

    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(
            max_batch_size=self._max_batch_size,
            granularity="phrase",
            content_addressed=False,
        )

    def _quality(self, prompt_id: str) -> float:
        if prompt_id in self.prompt_quality:
            return self.prompt_quality[prompt_id]
        if self.default_quality is not None:
            return self.default_quality
        raise BackendError(f"no quality configured for prompt {prompt_id!r}")

    def _score_cell(self, req: ScoreRequest) -> list[float]:
        pid, eid = req.prompt_id, req.example_id
        labels = req.choice_labels
        planted = self.planted_labels.get(eid)
        if planted is None:
            raise BackendError(f"no planted label for example {eid!r}")
        if planted not in labels:
            raise BackendError(
                f"planted label {planted!r} for example {eid!r} not among choices {labels}"
            )
        quality = self._quality(pid)
        s = str(self.seed)

        correct = _hash01(s, "flip", pid, eid) < quality
        if correct:
            winner = labels.index(planted)
        else:
            others = [j for j in range(len(labels)) if labels[j] != planted]
            winner = others[int(_hash01(s, "wrong", pid, eid) * len(others))]

        # Margin grows with quality and with a per-cell confidence wobble;
        # wrong cells get a damped margin (calibration).
        wobble = 0.25 + 0.75 * _hash01(s, "conf", pid, eid)
        margin = 0.2 + 3.0 * quality * wobble
        if not correct:
            margin *= self.miss_margin_scale

        base = -(0.5 + 2.5 * _hash01(s, "base", pid, eid))
        scores = []
        for j in range(len(labels)):
            if j == winner:
                scores.append(base)
            else:
                extra = 0.05 + 0.5 * _hash01(s, "loser", pid, eid, str(j))
                scores.append(base - margin - extra)
        return scores

    def score_batch(self, batch: Sequence[ScoreRequest]) -> list[list[float]]:
        self.calls += 1
        self.cells_scored += len(batch)
        return [self._score_cell(req) for req in batch]


def derived_profile(
    seed: int,
    prompt_ids: Sequence[str],
    example_ids: Sequence[str],
    choices: Sequence[str],
    quality_range: tuple[float, float] = (0.55, 0.95),
) -> tuple[dict[str, float], dict[str, str]]:
    """Seed-derived qualities and planted labels for ad-hoc synthetic runs."""
    lo, hi = quality_range
    s = str(seed)
    qualities = {pid: lo + (hi - lo) * _hash01(s, "q", pid) for pid in prompt_ids}
    planted = {
        eid: choices[int(_hash01(s, "y", eid) * len(choices))] for eid in example_ids
    }
    return qualities, planted


class RemoteBackend(ScorerBackend):
    """HTTP client for a log-likelihood scoring service.

    Wire protocol: POST JSON ``{"model": str, "items": [{"input": str,
    "candidates": [str, ...]}, ...]}`` and read back ``{"results":
    [{"scores": [float, ...]}, ...]}`` with scores being natural-log
    likelihoods aligned with the candidates.

    Transport failures and 5xx answers are retried with exponential backoff;
    malformed or non-finite payloads raise immediately with an excerpt of the
    offending payload.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_token: str | None = None,
        max_batch_size: int = 32,
        timeout: float = 60.0,
        retries: int = DEFAULT_RETRIES,
        backoff: float = DEFAULT_BACKOFF,
        session: requests.Session | None = None,
    ):
        if retries < 1:
            raise ValidationError("retries must be >= 1")
        self.endpoint = endpoint
        self.model = model
        self.api_token = api_token
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self._max_batch_size = max_batch_size
        self.retry_count = 0

    @property
    def model_id(self) -> str:
        return self.model

    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(
            max_batch_size=self._max_batch_size,
            granularity="phrase",
            content_addressed=True,
        )

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_token:
            headers["Authorization"] = f"Bearer {self.api_token}"
        return headers

    def _post(self, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.retries):
            if attempt > 0:
                delay = self.backoff * (2 ** (attempt - 1))
                self.retry_count += 1
                logger.warning(
                    "retrying scorer request (attempt %d/%d) after %.2fs: %s",
                    attempt + 1, self.retries, delay, last_error,
                )
                time.sleep(delay)
            try:
                response = self.session.post(
                    self.endpoint, json=payload, headers=self._headers(),
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = BackendError(
                    f"server error {response.status_code} from {self.endpoint}"
                )
                continue
            if response.status_code != 200:
                raise BackendError(
                    f"scorer at {self.endpoint} answered {response.status_code}: "
                    f"{response.text[:200]}"
                )
            try:
                return response.json()
            except ValueError:
                raise ProtocolError(
                    "response is not JSON", payload_excerpt=response.text[:200]
                ) from None
        raise BackendError(
            f"scorer at {self.endpoint} unreachable after {self.retries} attempts: "
            f"{last_error}"
        )

    def score_batch(self, batch: Sequence[ScoreRequest]) -> list[list[float]]:
        payload = {
            "model": self.model,
            "items": [
                {"input": req.input, "candidates": list(req.candidates)} for req in batch
            ],
        }
        doc = self._post(payload)
        excerpt = json.dumps(doc)[:200]
        results = doc.get("results")
        if not isinstance(results, list) or len(results) != len(batch):
            raise ProtocolError(
                f"expected {len(batch)} results, got "
                f"{len(results) if isinstance(results, list) else type(results).__name__}",
                payload_excerpt=excerpt,
            )
        out: list[list[float]] = []
        for req, result in zip(batch, results):
            scores = result.get("scores") if isinstance(result, dict) else None
            if not isinstance(scores, list) or len(scores) != len(req.candidates):
                raise ProtocolError(
                    f"malformed scores for input of example {req.example_id!r}",
                    payload_excerpt=excerpt,
                )
            values: list[float] = []
            for value in scores:
                if not isinstance(value, (int, float)) or isinstance(value, bool) \
                        or not math.isfinite(value):
                    raise ProtocolError(
                        f"non-finite or non-numeric score {value!r} for example "
                        f"{req.example_id!r}",
                        payload_excerpt=excerpt,
                    )
                values.append(float(value))
            out.append(values)
        return out
