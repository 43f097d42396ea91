"""Shared builders for the test suite."""

from __future__ import annotations

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from scipy.special import log_softmax

from zps import (
    Prompt,
    PromptTemplate,
    ScoreTensor,
    SyntheticBackend,
    TaskSpec,
    UnlabeledExample,
    Verbalizer,
    score_all,
)


def make_task(c=2, task_id="t"):
    return TaskSpec(
        task_id=task_id,
        field_schema=("text",),
        choices=tuple(str(j) for j in range(c)),
    )


def make_prompts(task, p):
    verb = Verbalizer({lab: f"phrase {lab}" for lab in task.choices})
    template = PromptTemplate("{{text}}")
    return [Prompt(f"p{i:02d}", template, verb) for i in range(p)]


def make_examples(n):
    return [UnlabeledExample(f"e{k:04d}", {"text": f"x{k}"}) for k in range(n)]


def plant_labels(task, examples, seed=0):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(task.choices), size=len(examples))
    return {e.example_id: task.choices[int(j)] for e, j in zip(examples, idx)}


def synthetic_setup(p=5, n=40, c=2, seed=0, qualities=None, planted=None):
    """Task, prompts, examples and a configured synthetic backend."""
    task = make_task(c)
    prompts = make_prompts(task, p)
    examples = make_examples(n)
    if qualities is None:
        rng = np.random.default_rng(seed + 1)
        qualities = [float(q) for q in rng.uniform(0.55, 0.95, size=p)]
    if not isinstance(qualities, dict):
        qualities = {pr.prompt_id: float(q) for pr, q in zip(prompts, qualities)}
    if planted is None:
        planted = plant_labels(task, examples, seed)
    backend = SyntheticBackend(
        seed=seed, prompt_quality=qualities, planted_labels=planted
    )
    return task, prompts, examples, backend, planted


def synthetic_tensor(p=5, n=40, c=2, seed=0, qualities=None, planted=None, **kw):
    task, prompts, examples, backend, planted = synthetic_setup(
        p=p, n=n, c=c, seed=seed, qualities=qualities, planted=planted
    )
    tensor = score_all(task, prompts, examples, backend, **kw)
    return tensor, planted


def raw_tensor(arr, normalized=False, prompt_ids=None, example_ids=None, choices=None):
    arr = np.asarray(arr, dtype=np.float64)
    p, n, c = arr.shape
    return ScoreTensor(
        prompt_ids=tuple(prompt_ids) if prompt_ids else tuple(f"p{i:02d}" for i in range(p)),
        example_ids=tuple(example_ids) if example_ids else tuple(f"e{k:04d}" for k in range(n)),
        choices=tuple(choices) if choices else tuple(str(j) for j in range(c)),
        logprobs=arr,
        normalized=normalized,
    )


def normalized_tensor(arr, **kw):
    return raw_tensor(log_softmax(np.asarray(arr, dtype=np.float64), axis=2),
                      normalized=True, **kw)


def prob_tensor(probs, **kw):
    """Tensor whose per-cell probabilities are exactly the given values."""
    return raw_tensor(np.log(np.asarray(probs, dtype=np.float64)),
                      normalized=True, **kw)


def stub_score(input_text: str, candidate: str) -> float:
    """Deterministic fake log-likelihood used by the stub server."""
    digest = hashlib.sha256(f"{input_text}|{candidate}".encode()).hexdigest()
    return -(0.5 + 3.0 * int(digest[:8], 16) / 0xFFFFFFFF)


class StubScorer:
    """In-process scoring server speaking the remote wire protocol.

    ``script`` is a queue of canned (status, body) responses served in
    order; once exhausted (or when empty from the start) the server answers
    properly with ``stub_score`` values. Bodies may be dicts (sent as JSON)
    or raw strings. All received request payloads and headers are recorded.
    """

    def __init__(self, script=None):
        self.script = list(script or [])
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                payload = json.loads(body) if body else {}
                with stub._lock:
                    stub.requests.append(payload)
                    stub.headers.append({k: v for k, v in self.headers.items()})
                    scripted = stub.script.pop(0) if stub.script else None
                if scripted is not None:
                    status, doc = scripted
                    data = doc if isinstance(doc, str) else json.dumps(doc)
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.end_headers()
                    self.wfile.write(data.encode())
                    return
                results = [
                    {"scores": [stub_score(item["input"], c) for c in item["candidates"]]}
                    for item in payload.get("items", [])
                ]
                data = json.dumps({"results": results})
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(data.encode())

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/score"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
