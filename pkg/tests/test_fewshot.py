"""Pseudo-labeled sets, checkpoint selection and gold-budget comparison."""

import json

import numpy as np
import pytest

from zps import (
    CheckpointPredictions,
    EnsembleConfig,
    PredictionMatrix,
    PseudoLabeledSet,
    SyntheticBackend,
    UnlabeledExample,
    ValidationError,
    build_pseudo_val,
    checkpoint_agreement,
    evaluate_usage_strategies,
    format_usage_table,
    load_checkpoint_predictions,
    load_pseudo_labeled,
    predict,
    pseudo_accuracy,
    score_all,
    select_checkpoint,
    split_labeled,
    top_confidence_pseudo_train,
)

from .helpers import (
    make_examples,
    make_prompts,
    make_task,
    prob_tensor,
    synthetic_tensor,
)

PROB_MEAN = EnsembleConfig("prob_mean")


def gap_tensor():
    # single prompt, prob gaps 0.8 / 0.1 / 0.4
    return prob_tensor([[[0.9, 0.1], [0.55, 0.45], [0.7, 0.3]]])


class TestPseudoLabeledSet:
    def test_entries_validated(self):
        with pytest.raises(ValidationError, match="duplicate"):
            PseudoLabeledSet(entries=(("e0", "1", 0.5), ("e0", "0", 0.2)))
        with pytest.raises(ValidationError, match=">= 0"):
            PseudoLabeledSet(entries=(("e0", "1", -0.1),))
        with pytest.raises(ValidationError, match="finite"):
            PseudoLabeledSet(entries=(("e0", "1", float("nan")),))

    def test_accessors(self):
        ps = PseudoLabeledSet(entries=(("e1", "yes", 0.9), ("e0", "no", 0.3)))
        assert len(ps) == 2
        assert ps.example_ids == ("e1", "e0")
        assert ps.labels() == {"e1": "yes", "e0": "no"}

    def test_save_load_round_trip(self, tmp_path):
        ps = PseudoLabeledSet(entries=(("e1", "yes", 0.9), ("e0", "no", 0.25)))
        path = tmp_path / "pv.jsonl"
        ps.save(path)
        loaded = load_pseudo_labeled(path)
        assert loaded.entries == ps.entries
        assert loaded.provenance == "file:pv.jsonl"

    def test_loader_canonicalizes_labels(self, tmp_path):
        path = tmp_path / "pv.jsonl"
        path.write_text('{"example_id": "e0", "label": 1, "gap": 0.5}\n')
        assert load_pseudo_labeled(path).labels() == {"e0": "1"}

    @pytest.mark.parametrize(
        "line,match",
        [
            ('{"example_id": "e0", "label": "1"}', "expected keys"),
            ('{"example_id": "e0", "label": "1", "gap": true}', "number"),
            ('{"example_id": "e0", "label": "1", "gap": "x"}', "number"),
            ("not json", "invalid JSON"),
        ],
    )
    def test_loader_errors_carry_line_numbers(self, tmp_path, line, match):
        path = tmp_path / "pv.jsonl"
        path.write_text('{"example_id": "ok", "label": "1", "gap": 0.1}\n' + line + "\n")
        with pytest.raises(ValidationError, match=match) as excinfo:
            load_pseudo_labeled(path)
        assert ":2:" in str(excinfo.value)


class TestBuildPseudoVal:
    def test_orders_by_descending_gap(self):
        ps = build_pseudo_val(gap_tensor(), PROB_MEAN)
        assert ps.example_ids == ("e0000", "e0002", "e0001")
        gaps = [g for _, _, g in ps.entries]
        assert gaps == pytest.approx([0.8, 0.4, 0.1])
        assert all(lab == "0" for lab in ps.labels().values())

    def test_size_truncates_to_most_confident(self):
        ps = build_pseudo_val(gap_tensor(), PROB_MEAN, size=1)
        assert ps.example_ids == ("e0000",)
        full = build_pseudo_val(gap_tensor(), PROB_MEAN, size=3)
        assert full.example_ids == build_pseudo_val(gap_tensor(), PROB_MEAN).example_ids

    def test_ties_keep_example_order(self):
        tensor = prob_tensor([[[0.7, 0.3], [0.7, 0.3], [0.7, 0.3]]])
        ps = build_pseudo_val(tensor, PROB_MEAN)
        assert ps.example_ids == ("e0000", "e0001", "e0002")

    def test_size_bounds(self):
        with pytest.raises(ValidationError, match="size"):
            build_pseudo_val(gap_tensor(), PROB_MEAN, size=0)
        with pytest.raises(ValidationError, match="size"):
            build_pseudo_val(gap_tensor(), PROB_MEAN, size=4)

    def test_provenance_records_recipe(self):
        ps = build_pseudo_val(gap_tensor(), PROB_MEAN, size=2)
        assert "prob_mean" in ps.provenance
        assert "size=2" in ps.provenance


class TestTopConfidencePseudoTrain:
    def test_takes_largest_gaps(self):
        ps = top_confidence_pseudo_train(gap_tensor(), 2, PROB_MEAN)
        assert ps.example_ids == ("e0000", "e0002")

    def test_top_k_sets_nest(self):
        tensor, _ = synthetic_tensor(p=4, n=30, seed=8)
        previous = set()
        for k in range(1, 31):
            ids = set(top_confidence_pseudo_train(tensor, k).example_ids)
            assert len(ids) == k
            assert previous <= ids
            previous = ids

    def test_k_bounds(self):
        with pytest.raises(ValidationError, match="k must be"):
            top_confidence_pseudo_train(gap_tensor(), 0)
        with pytest.raises(ValidationError, match="k must be"):
            top_confidence_pseudo_train(gap_tensor(), 9)


def write_checkpoint_file(path, table):
    """table: {ckpt: {prompt: [(example_id, pred), ...]}}"""
    lines = []
    for ckpt, per_prompt in table.items():
        for prompt, pairs in per_prompt.items():
            for example_id, pred in pairs:
                lines.append(
                    json.dumps(
                        {
                            "checkpoint_id": ckpt,
                            "prompt_id": prompt,
                            "example_id": example_id,
                            "pred": pred,
                        }
                    )
                )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class TestCheckpointLoading:
    def test_grouping_and_file_order(self, tmp_path):
        path = tmp_path / "ckpts.jsonl"
        write_checkpoint_file(
            path,
            {
                "step100": {
                    "pa": [("e0", "0"), ("e1", "1")],
                    "pb": [("e0", "1"), ("e1", "1")],
                },
                "step200": {
                    "pa": [("e0", "0"), ("e1", "0")],
                    "pb": [("e0", "0"), ("e1", "1")],
                },
            },
        )
        candidates = load_checkpoint_predictions(path, ["0", "1"])
        assert [c.checkpoint_id for c in candidates] == ["step100", "step200"]
        first = candidates[0].preds
        assert first.prompt_ids == ("pa", "pb")
        assert first.example_ids == ("e0", "e1")
        assert first.indices.tolist() == [[0, 1], [1, 1]]

    def test_unknown_pred_label(self, tmp_path):
        path = tmp_path / "ckpts.jsonl"
        write_checkpoint_file(path, {"c": {"p": [("e0", "maybe")]}})
        with pytest.raises(ValidationError, match="maybe"):
            load_checkpoint_predictions(path, ["0", "1"])

    def test_prompts_must_share_example_list(self, tmp_path):
        path = tmp_path / "ckpts.jsonl"
        write_checkpoint_file(
            path,
            {"c": {"pa": [("e0", "0"), ("e1", "1")], "pb": [("e0", "0")]}},
        )
        with pytest.raises(ValidationError, match="different example lists"):
            load_checkpoint_predictions(path, ["0", "1"])

    def test_checkpoints_must_share_example_list(self, tmp_path):
        path = tmp_path / "ckpts.jsonl"
        write_checkpoint_file(
            path,
            {
                "c1": {"pa": [("e0", "0"), ("e1", "1")]},
                "c2": {"pa": [("e0", "0"), ("e2", "1")]},
            },
        )
        with pytest.raises(ValidationError, match="c2"):
            load_checkpoint_predictions(path, ["0", "1"])

    def test_duplicate_example_rejected(self, tmp_path):
        path = tmp_path / "ckpts.jsonl"
        write_checkpoint_file(path, {"c": {"pa": [("e0", "0"), ("e0", "1")]}})
        with pytest.raises(ValidationError, match="duplicate"):
            load_checkpoint_predictions(path, ["0", "1"])

    def test_empty_and_malformed_files(self, tmp_path):
        path = tmp_path / "ckpts.jsonl"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ValidationError, match="no checkpoint"):
            load_checkpoint_predictions(path, ["0", "1"])
        path.write_text("garbage\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="invalid JSON"):
            load_checkpoint_predictions(path, ["0", "1"])
        path.write_text('{"checkpoint_id": "c"}\n', encoding="utf-8")
        with pytest.raises(ValidationError, match="expected keys"):
            load_checkpoint_predictions(path, ["0", "1"])


def checkpoint_from_indices(ckpt_id, indices, example_ids, choices=("0", "1")):
    return CheckpointPredictions(
        checkpoint_id=ckpt_id,
        preds=PredictionMatrix(
            prompt_ids=tuple(f"p{i}" for i in range(len(indices))),
            example_ids=tuple(example_ids),
            choices=tuple(choices),
            indices=np.asarray(indices),
        ),
    )


class TestCheckpointSelection:
    def pseudo_val(self, labels):
        return PseudoLabeledSet(
            entries=tuple(
                (f"e{k}", lab, 1.0 - 0.01 * k) for k, lab in enumerate(labels)
            )
        )

    def test_agreement_counts_matches(self):
        cand = checkpoint_from_indices("c", [[0, 1, 1, 0]], [f"e{k}" for k in range(4)])
        ps = self.pseudo_val(["0", "1", "0", "0"])
        assert checkpoint_agreement(cand, ps) == 0.75

    def test_agreement_averages_over_prompts(self):
        cand = checkpoint_from_indices(
            "c", [[0, 1], [1, 1]], ["e0", "e1"]
        )
        ps = self.pseudo_val(["0", "1"])
        # prompt p0 matches 2/2, p1 matches 1/2
        assert checkpoint_agreement(cand, ps) == 0.75

    def test_agreement_equals_pseudo_accuracy_for_single_prompt(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n = int(rng.integers(1, 12))
            indices = rng.integers(0, 2, size=(1, n))
            labels = [str(int(v)) for v in rng.integers(0, 2, size=n)]
            example_ids = [f"e{k}" for k in range(n)]
            cand = checkpoint_from_indices("c", indices, example_ids)
            ps = PseudoLabeledSet(
                entries=tuple((e, lab, 1.0) for e, lab in zip(example_ids, labels))
            )
            via_checkpoint = checkpoint_agreement(cand, ps)
            via_matrix = pseudo_accuracy(cand.preds, labels)["p0"]
            assert via_checkpoint == via_matrix

    def test_missing_examples_error(self):
        cand = checkpoint_from_indices("c", [[0, 1]], ["e0", "e1"])
        ps = self.pseudo_val(["0", "1", "1"])
        with pytest.raises(ValidationError, match="lacks predictions"):
            checkpoint_agreement(cand, ps)

    def test_unknown_pseudo_label_error(self):
        cand = checkpoint_from_indices("c", [[0, 1]], ["e0", "e1"])
        ps = PseudoLabeledSet(entries=(("e0", "weird", 1.0), ("e1", "1", 0.5)))
        with pytest.raises(ValidationError, match="weird"):
            checkpoint_agreement(cand, ps)

    def test_select_best_and_singleton(self):
        example_ids = [f"e{k}" for k in range(10)]
        ps = self.pseudo_val(["0"] * 10)
        good = checkpoint_from_indices("good", [[0] * 9 + [1]], example_ids)
        bad = checkpoint_from_indices("bad", [[0] * 7 + [1] * 3], example_ids)
        assert select_checkpoint([bad, good], ps) == "good"
        assert select_checkpoint([bad], ps) == "bad"

    def test_ties_go_to_training_order(self):
        example_ids = ["e0", "e1"]
        ps = self.pseudo_val(["0", "1"])
        first = checkpoint_from_indices("early", [[0, 0]], example_ids)
        second = checkpoint_from_indices("late", [[1, 1]], example_ids)
        assert select_checkpoint([first, second], ps) == "early"
        assert select_checkpoint([second, first], ps) == "late"

    def test_coverage_mismatch_error(self):
        a = checkpoint_from_indices("a", [[0, 1]], ["e0", "e1"])
        b = checkpoint_from_indices("b", [[0, 1]], ["e0", "e2"])
        with pytest.raises(ValidationError, match="different example"):
            select_checkpoint([a, b], self.pseudo_val(["0", "1"]))
        with pytest.raises(ValidationError, match="at least one"):
            select_checkpoint([], self.pseudo_val(["0"]))


class TestSplitLabeled:
    def test_even_split(self):
        examples = make_examples(32)
        train, val = split_labeled(examples)
        assert len(train) == 16 and len(val) == 16
        assert train == examples[:16] and val == examples[16:]

    def test_odd_split_favors_validation(self):
        train, val = split_labeled(make_examples(7))
        assert len(train) == 3 and len(val) == 4

    def test_too_small(self):
        with pytest.raises(ValidationError, match="at least 2"):
            split_labeled(make_examples(1))


def usage_setup(m=32, n=100, seed=0, p=5, qualities=None):
    task = make_task(2)
    prompts = make_prompts(task, p)
    if qualities is None:
        qualities = [0.95, 0.7, 0.65, 0.6, 0.55][:p]
    quality_map = {pr.prompt_id: q for pr, q in zip(prompts, qualities)}

    rng = np.random.default_rng(seed)
    gold_examples = [
        UnlabeledExample(
            f"g{k:03d}", {"text": f"g{k}"}, gold_label=str(int(rng.integers(0, 2)))
        )
        for k in range(m)
    ]
    unlabeled = make_examples(n)
    unlabeled_gold = {
        e.example_id: str(int(rng.integers(0, 2))) for e in unlabeled
    }
    backend = SyntheticBackend(
        seed=seed,
        prompt_quality=quality_map,
        planted_labels={
            **{e.example_id: e.gold_label for e in gold_examples},
            **unlabeled_gold,
        },
    )
    labeled_tensor = score_all(task, prompts, gold_examples, backend)
    unlabeled_tensor = score_all(task, prompts, unlabeled, backend)
    return gold_examples, labeled_tensor, unlabeled_tensor, unlabeled_gold


class TestUsageStrategies:
    def test_row_shapes_and_names(self):
        gold_examples, lab, unlab, unlab_gold = usage_setup()
        rows = evaluate_usage_strategies(
            gold_examples, lab, unlab, unlabeled_gold=unlab_gold
        )
        assert [r.strategy for r in rows] == [
            "gold_val", "pseudo_train", "pseudo_val", "more_pseudo_val"
        ]
        assert [r.name for r in rows] == [
            "16+16", "32_pseudo_train", "32_pseudo_val", "more_pseudo_val"
        ]
        assert [r.train_size for r in rows] == [16, 32, 32, 32]
        assert [r.val_size for r in rows] == [16, 32, 32, 100]
        assert [r.val_kind for r in rows] == ["gold", "gold", "pseudo", "pseudo"]
        assert rows[0].agrees_with_gold_selection is True
        assert rows[0].pseudo_val_accuracy is None
        for row in rows[1:]:
            assert 0.0 <= row.pseudo_val_accuracy <= 1.0

    def test_without_unlabeled_gold_accuracy_is_unknown(self):
        gold_examples, lab, unlab, _ = usage_setup()
        rows = evaluate_usage_strategies(gold_examples, lab, unlab)
        assert all(r.pseudo_val_accuracy is None for r in rows)

    def test_dominant_prompt_selected_by_every_recipe(self):
        gold_examples, lab, unlab, unlab_gold = usage_setup(
            m=40, n=200, seed=4, qualities=[0.97, 0.6, 0.58, 0.56, 0.54]
        )
        rows = evaluate_usage_strategies(
            gold_examples, lab, unlab, unlabeled_gold=unlab_gold
        )
        assert all(r.selected == "p00" for r in rows)
        assert all(r.agrees_with_gold_selection for r in rows)

    def test_pseudo_sets_prefer_confident_examples(self):
        gold_examples, lab, unlab, unlab_gold = usage_setup(m=20, n=150, seed=2)
        rows = evaluate_usage_strategies(
            gold_examples, lab, unlab, unlabeled_gold=unlab_gold
        )
        by_name = {r.strategy: r for r in rows}
        # the top-confidence train subset should not be less accurate than
        # the pseudo-labels over the whole pool
        assert by_name["pseudo_train"].pseudo_val_accuracy >= \
            by_name["more_pseudo_val"].pseudo_val_accuracy - 1e-9

    def test_validation_errors(self):
        gold_examples, lab, unlab, _ = usage_setup(m=6, n=20)
        with pytest.raises(ValidationError, match="at least 2"):
            evaluate_usage_strategies(gold_examples[:1], lab, unlab)
        unlabeled_example = UnlabeledExample("u0", {"text": "u"})
        with pytest.raises(ValidationError, match="missing gold"):
            evaluate_usage_strategies(
                gold_examples[:4] + [unlabeled_example], lab, unlab
            )
        stranger = UnlabeledExample("zz", {"text": "z"}, gold_label="1")
        with pytest.raises(ValidationError, match="lacks scores"):
            evaluate_usage_strategies(gold_examples[:4] + [stranger], lab, unlab)

    def test_format_table_lists_every_row(self):
        gold_examples, lab, unlab, unlab_gold = usage_setup(m=8, n=30)
        rows = evaluate_usage_strategies(
            gold_examples, lab, unlab, unlabeled_gold=unlab_gold
        )
        table = format_usage_table(rows)
        for row in rows:
            assert row.name in table
        assert "selected" in table

    def test_row_json_dict_round_trips_through_json(self):
        gold_examples, lab, unlab, unlab_gold = usage_setup(m=8, n=30)
        rows = evaluate_usage_strategies(
            gold_examples, lab, unlab, unlabeled_gold=unlab_gold
        )
        doc = json.dumps([r.to_json_dict() for r in rows], sort_keys=True)
        assert json.loads(doc)[0]["strategy"] == "gold_val"
