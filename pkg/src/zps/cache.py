"""Persistent score cache.

Append-only JSON Lines file, one entry per (model, input, candidate, flags)
cell: ``{"key": hex-hash, "logprob": float}``. Keys are content hashes, so a
cache survives prompt/catalog reordering and is shared across runs. Backends
whose scores are addressed by ids rather than content (the synthetic one)
get the ids mixed into the key.

Reads are lock-free after load; appends are serialized. A malformed cache
raises instead of being silently recomputed over.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from pathlib import Path

from .errors import CacheCorruptionError


def make_cache_key(
    model_id: str,
    rendered_input: str,
    candidate: str,
    length_norm: bool,
    coords: tuple[str, str] | None = None,
) -> str:
    """Content hash identifying one scored cell.

    ``coords`` (prompt_id, example_id) is only mixed in for backends that are
    not content-addressed.
    """
    parts = [model_id, f"ln={int(length_norm)}", rendered_input, candidate]
    if coords is not None:
        parts += [f"pid={coords[0]}", f"eid={coords[1]}"]
    return hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()


class ScoreCache:
    """File-backed cache of per-candidate log-likelihoods."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, float] = {}
        self._handle = None
        self.hits = 0
        self.misses = 0
        self._load()
        self._handle = open(self.path, "a", encoding="utf-8")

    def _load(self) -> None:
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            return
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    key = obj["key"]
                    value = obj["logprob"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    raise CacheCorruptionError(
                        f"cache {self.path} is corrupt at line {lineno}; refusing to "
                        "recompute silently -- delete or move the file to reset it"
                    ) from None
                if not isinstance(key, str) or not isinstance(value, (int, float)) \
                        or isinstance(value, bool) or not math.isfinite(value):
                    raise CacheCorruptionError(
                        f"cache {self.path} has an invalid entry at line {lineno}; "
                        "delete or move the file to reset it"
                    )
                self._entries[key] = float(value)

    def get(self, key: str) -> float | None:
        value = self._entries.get(key)
        if value is None:
            self.misses += 1
        else:
            self.hits += 1
        return value

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def put(self, key: str, logprob: float) -> None:
        """Record one score; appends immediately so concurrent runs can share."""
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = float(logprob)
            line = json.dumps({"key": key, "logprob": float(logprob)}) + "\n"
            self._handle.write(line)
            self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "ScoreCache":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
