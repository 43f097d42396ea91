"""Command-line entry point.

Wires catalogs, example files, backends and caches into reproducible batch
runs. Every artifact embeds the resolved run configuration (secrets reduced
to a presence flag), content hashes of the input files, and the seed, and is
written via a temp file plus atomic rename so failed runs leave no partial
output behind.

Exit codes: 0 success, 1 bad input, 2 backend or cache trouble, 3 internal
error. Auth tokens are read from the ZPS_API_TOKEN environment variable
only, never from flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .backends import RemoteBackend, ScorerBackend, SyntheticBackend, derived_profile
from .cache import ScoreCache
from .catalog import canon_label, gold_label_map, load_catalog, load_examples
from .errors import BackendError, CacheCorruptionError, ValidationError, ZpsError
from .evalsim import (
    compare_strategies,
    default_robustness_spec,
    evaluate,
    format_robustness_table,
    format_strategy_table,
    load_robustness_spec,
    simulate_robustness,
)
from .fewshot import (
    build_pseudo_val,
    checkpoint_agreement,
    load_checkpoint_predictions,
    load_pseudo_labeled,
    select_checkpoint,
)
from .scoring import NORMALIZE_MODES, predict, score_all
from .selection import STRATEGIES, EnsembleConfig, select

TOKEN_ENV = "ZPS_API_TOKEN"


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to audit a run, minus the secret itself."""

    command: str
    seed: int = 0
    api_token_present: bool = False
    catalog: str | None = None
    examples: str | None = None
    backend: str | None = None
    endpoint: str | None = None
    model: str | None = None
    cache: str | None = None
    strategy: str | None = None
    normalize: str | None = None
    length_norm: bool | None = None
    no_filter: bool | None = None
    score_all_prompts: bool | None = None
    jobs: int | None = None
    size: int | None = None
    spec_path: str | None = None
    checkpoints: str | None = None
    pseudo_val: str | None = None
    synthetic_profile: str | None = None
    out: str | None = None
    input_hashes: Mapping[str, str] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        doc = {
            "command": self.command,
            "seed": self.seed,
            "api_token_present": self.api_token_present,
            "input_hashes": dict(self.input_hashes),
        }
        optional = (
            "catalog", "examples", "backend", "endpoint", "model", "cache",
            "strategy", "normalize", "length_norm", "no_filter",
            "score_all_prompts", "jobs", "size", "spec_path", "checkpoints",
            "pseudo_val", "synthetic_profile", "out",
        )
        for name in optional:
            value = getattr(self, name)
            if value is not None:
                doc[name] = value
        return doc


def _hash_file(path: str | Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None


def _run_config(args: argparse.Namespace, command: str) -> RunConfig:
    hash_attrs = ("catalog", "examples", "synthetic_profile", "spec",
                  "checkpoints", "pseudo_val")
    hashes = {}
    for name in hash_attrs:
        value = getattr(args, name, None)
        if value:
            hashes[name] = _hash_file(value)
    length_norm = getattr(args, "length_norm", None)
    return RunConfig(
        command=command,
        seed=getattr(args, "seed", 0),
        api_token_present=TOKEN_ENV in os.environ,
        catalog=getattr(args, "catalog", None),
        examples=getattr(args, "examples", None),
        backend=getattr(args, "backend", None),
        endpoint=getattr(args, "endpoint", None),
        model=getattr(args, "model", None),
        cache=getattr(args, "cache", None),
        strategy=getattr(args, "strategy", None),
        normalize=getattr(args, "normalize", None),
        length_norm=None if length_norm is None else length_norm == "on",
        no_filter=getattr(args, "no_filter", None),
        score_all_prompts=getattr(args, "score_all_prompts", None),
        jobs=getattr(args, "jobs", None),
        size=getattr(args, "size", None),
        spec_path=getattr(args, "spec", None),
        checkpoints=getattr(args, "checkpoints", None),
        pseudo_val=getattr(args, "pseudo_val", None),
        synthetic_profile=getattr(args, "synthetic_profile", None),
        out=getattr(args, "out", None),
        input_hashes=hashes,
    )


def _write_artifact(path: str | Path, text: str) -> None:
    """Write-then-rename: the output path never holds a partial file."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent or "."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _load_synthetic_profile(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read profile {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"profile {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "qualities" not in doc or "planted_labels" not in doc:
        raise ValidationError(
            f"profile {path} must be an object with 'qualities' and 'planted_labels'"
        )
    return doc


def _make_backend(args: argparse.Namespace, task, prompts, examples) -> ScorerBackend:
    if args.backend == "remote":
        if not args.endpoint or not args.model:
            raise ValidationError("remote backend needs --endpoint and --model")
        return RemoteBackend(
            endpoint=args.endpoint,
            model=args.model,
            api_token=os.environ.get(TOKEN_ENV),
        )

    # Synthetic backend. Planted labels come from, in order of precedence:
    # an explicit profile file, complete gold labels in the example file, or
    # a profile derived from the seed.
    prompt_ids = [p.prompt_id for p in prompts]
    example_ids = [e.example_id for e in examples]
    if args.synthetic_profile:
        doc = _load_synthetic_profile(args.synthetic_profile)
        qualities = {str(k): float(v) for k, v in doc["qualities"].items()}
        planted = {str(k): canon_label(v) for k, v in doc["planted_labels"].items()}
        return SyntheticBackend(
            seed=args.seed,
            prompt_quality=qualities,
            planted_labels=planted,
            default_quality=doc.get("default_quality"),
            miss_margin_scale=float(doc.get("miss_margin_scale", 0.35)),
        )
    qualities, planted = derived_profile(
        args.seed, prompt_ids, example_ids, task.choices
    )
    gold = gold_label_map(examples)
    if len(gold) == len(examples):
        planted = gold
    return SyntheticBackend(
        seed=args.seed, prompt_quality=qualities, planted_labels=planted
    )


def _score_from_args(args: argparse.Namespace):
    task, prompts = load_catalog(args.catalog)
    examples = load_examples(args.examples, task)
    backend = _make_backend(args, task, prompts, examples)
    cache = ScoreCache(args.cache) if args.cache else None
    try:
        tensor = score_all(
            task,
            prompts,
            examples,
            backend,
            cache,
            normalize=args.normalize,
            length_norm=args.length_norm == "on",
            jobs=args.jobs,
        )
    finally:
        if cache is not None:
            cache.close()
    return task, prompts, examples, tensor, cache


def cmd_select(args: argparse.Namespace) -> int:
    config = _run_config(args, "select")
    _, _, _, tensor, _ = _score_from_args(args)
    report = select(
        tensor,
        EnsembleConfig(strategy=args.strategy),
        no_filter=args.no_filter,
        score_all_prompts=args.score_all_prompts,
    )
    _write_artifact(args.out, _dump({"config": config.to_json_dict(),
                                     "report": report.to_json_dict()}))
    print(f"selected {report.selected} "
          f"(pseudo accuracy {report.pseudo_acc[report.selected]:.4f}); "
          f"report written to {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _run_config(args, "evaluate")
    task, _, examples, tensor, _ = _score_from_args(args)
    gold = gold_label_map(examples)
    gold_field = task.gold_label_field or "gold_label"
    if not gold:
        raise ValidationError(
            f"no gold labels found: populate {gold_field!r} in the examples file"
        )
    missing = [e.example_id for e in examples if e.example_id not in gold]
    if missing:
        raise ValidationError(
            f"examples missing {gold_field!r}: {missing[:5]}"
        )
    report = select(
        tensor,
        EnsembleConfig(strategy=args.strategy),
        no_filter=args.no_filter,
        score_all_prompts=True,
    )
    eval_report = evaluate(report, predict(tensor), gold)
    _write_artifact(args.out, _dump({"config": config.to_json_dict(),
                                     "report": eval_report.to_json_dict()}))
    header = f"{'prompt':<14} {'pseudo acc':>10} {'true acc':>9}"
    print(header)
    print("-" * len(header))
    for pid, pseudo, true in eval_report.ranking():
        print(f"{pid:<14} {pseudo:>10.4f} {true:>9.4f}")
    print(f"selected {eval_report.selected} "
          f"(true accuracy {eval_report.selected_accuracy:.4f}); "
          f"report written to {args.out}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _run_config(args, "simulate")
    spec = load_robustness_spec(args.spec) if args.spec else default_robustness_spec()
    robustness = simulate_robustness(spec)
    strategies = compare_strategies(spec)
    print(format_robustness_table(robustness))
    print()
    print(format_strategy_table(strategies))
    if args.out:
        _write_artifact(
            args.out,
            _dump({
                "config": config.to_json_dict(),
                "robustness": robustness.to_json_dict(),
                "strategies": strategies.to_json_dict(),
            }),
        )
        print(f"tables written to {args.out}")
    return 0


def cmd_pseudo_val(args: argparse.Namespace) -> int:
    config = _run_config(args, "pseudo-val")
    _, _, _, tensor, _ = _score_from_args(args)
    pseudo = build_pseudo_val(
        tensor, EnsembleConfig(strategy=args.strategy), size=args.size
    )
    _write_artifact(args.out, pseudo.to_jsonl())
    # The JSONL line format is fixed, so the run config rides in a sidecar.
    _write_artifact(f"{args.out}.meta.json",
                    _dump({"config": config.to_json_dict(),
                           "provenance": pseudo.provenance,
                           "size": len(pseudo)}))
    print(f"{len(pseudo)} pseudo-labeled examples written to {args.out}")
    return 0


def cmd_select_checkpoint(args: argparse.Namespace) -> int:
    config = _run_config(args, "select-checkpoint")
    task, _ = load_catalog(args.catalog)
    candidates = load_checkpoint_predictions(args.checkpoints, task.choices)
    pseudo = load_pseudo_labeled(args.pseudo_val)
    best = select_checkpoint(candidates, pseudo)
    agreements = {
        c.checkpoint_id: checkpoint_agreement(c, pseudo) for c in candidates
    }
    if args.out:
        _write_artifact(args.out, _dump({
            "config": config.to_json_dict(),
            "selected_checkpoint": best,
            "agreement": agreements,
        }))
    print(f"selected checkpoint {best} (agreement {agreements[best]:.4f})")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    _run_config(args, "score")  # validates the input files up front
    if not args.cache:
        raise ValidationError("score needs --cache to have somewhere to warm")
    _, prompts, examples, tensor, cache = _score_from_args(args)
    p, n, c = tensor.shape
    print(f"scored {p * n * c} values over {p} prompts x {n} examples; "
          f"cache {args.cache}: {cache.hits} hits, {cache.misses} misses")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zps",
        description="Zero-label prompt selection: score, filter, ensemble, select.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    scoring = argparse.ArgumentParser(add_help=False)
    scoring.add_argument("--catalog", required=True, help="catalog JSON file")
    scoring.add_argument("--examples", required=True, help="examples JSONL file")
    scoring.add_argument("--backend", choices=("synthetic", "remote"),
                         default="synthetic")
    scoring.add_argument("--endpoint", help="remote scorer URL")
    scoring.add_argument("--model", help="remote model identifier")
    scoring.add_argument("--cache", help="score cache JSONL path")
    scoring.add_argument("--normalize", choices=NORMALIZE_MODES, default="softmax")
    scoring.add_argument("--length-norm", choices=("on", "off"), default="off",
                         help="divide phrase scores by their token count")
    scoring.add_argument("--seed", type=int, default=0)
    scoring.add_argument("--synthetic-profile",
                         help="JSON file with synthetic qualities and planted labels")
    scoring.add_argument("--jobs", type=int, default=1,
                         help="max concurrent scoring batches")

    strategy = argparse.ArgumentParser(add_help=False)
    strategy.add_argument("--strategy", choices=STRATEGIES, default="logprob_mean")

    p_select = sub.add_parser("select", parents=[scoring, strategy],
                              help="run the full selection pipeline")
    p_select.add_argument("--no-filter", action="store_true",
                          help="skip confidence filtering")
    p_select.add_argument("--score-all-prompts", action="store_true",
                          help="report pseudo accuracy for discarded prompts too")
    p_select.add_argument("--out", required=True, help="report JSON path")
    p_select.set_defaults(func=cmd_select)

    p_eval = sub.add_parser("evaluate", parents=[scoring, strategy],
                            help="selection plus gold-label evaluation")
    p_eval.add_argument("--no-filter", action="store_true")
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_evaluate)

    p_sim = sub.add_parser("simulate",
                           help="robustness and strategy-comparison simulations")
    p_sim.add_argument("--spec", help="simulation spec JSON (default: built-in)")
    p_sim.add_argument("--seed", type=int, default=0,
                       help="recorded in the artifact; cell seeds come from --spec")
    p_sim.add_argument("--out")
    p_sim.set_defaults(func=cmd_simulate)

    p_pv = sub.add_parser("pseudo-val", parents=[scoring, strategy],
                          help="export a pseudo-labeled validation set")
    p_pv.add_argument("--size", type=int,
                      help="keep only the most confident examples")
    p_pv.add_argument("--out", required=True, help="JSONL output path")
    p_pv.set_defaults(func=cmd_pseudo_val)

    p_ck = sub.add_parser("select-checkpoint",
                          help="pick a checkpoint by pseudo-val agreement")
    p_ck.add_argument("--catalog", required=True,
                      help="catalog JSON file (defines the choice set)")
    p_ck.add_argument("--checkpoints", required=True,
                      help="per-checkpoint predictions JSONL")
    p_ck.add_argument("--pseudo-val", required=True,
                      help="pseudo-labeled validation JSONL")
    p_ck.add_argument("--seed", type=int, default=0)
    p_ck.add_argument("--out")
    p_ck.set_defaults(func=cmd_select_checkpoint)

    p_score = sub.add_parser("score", parents=[scoring],
                             help="score everything once to warm the cache")
    p_score.set_defaults(func=cmd_score)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; 2 is reserved for backend trouble.
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (BackendError, CacheCorruptionError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 2
    except ZpsError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - last-resort exit-code mapping
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
