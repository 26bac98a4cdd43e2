import json
import random

import pytest
from sklearn.exceptions import NotFittedError

from egograph.knowledge_net import KnowledgeNet
from egograph.media_plan import VideoMeta
from egograph.mllm import ChoiceSet, FixtureBackend, HashChoiceBackend, ImageRef, TextPart, VideoRef, record_exchange
from egograph.pipeline import (
    Bucket,
    CategoryReport,
    ConfigurationError,
    EnsembleError,
    EnsembleSelector,
    InferenceConfig,
    Mode,
    PipelineResources,
    Prediction,
    QuestionRecord,
    ScoringError,
    assignment_dumps,
    assignment_loads,
    build_context,
    dumps_paths_file,
    dumps_predictions,
    emit_submission,
    generate_bundle,
    prompt_for,
    question_paths,
    read_paths_file,
    read_predictions,
    read_questions,
    run_question,
    run_questions,
    score,
    select_ensemble,
    write_questions,
)
from conftest import store_from_triples
from oracles import recount
from synthetic import kg_paths, make_bundle, make_questions, snet_kg_paths

ABC = ChoiceSet(("mug", "kettle", "pan"))


def question(qid="q1", category="Action", micro="take", text="What did I take?", gold=0, **kw):
    return QuestionRecord(qid, "P01-101", category, micro, text, ABC, gold, **kw)


def resources(backend=None, **kw):
    return PipelineResources(
        backend=backend or HashChoiceBackend(),
        bundles={"P01-101": make_bundle("P01-101", 900.0)},
        kg_paths={"q1": ["mug is used for drinking"]},
        snet_kg_paths={"P01-101": ["kettle is located at kitchen"]},
        **kw,
    )


class TestConfig:
    def test_default_video(self):
        assert InferenceConfig(Mode.SNET).include_video is False
        assert InferenceConfig(Mode.KNET).include_video is True

    def test_key_round_trip(self):
        for mode in Mode:
            for video in (True, False):
                if mode is Mode.VIDEO_ONLY and not video:
                    continue
                cfg = InferenceConfig(mode, video)
                assert InferenceConfig.from_key(cfg.key) == cfg
        assert InferenceConfig(Mode.SNET, True).key == "snet+video"
        assert InferenceConfig(Mode.SNET_PLUS_KNET).key == "snet+knet"

    def test_video_only_needs_video(self):
        with pytest.raises(ValueError):
            InferenceConfig(Mode.VIDEO_ONLY, False)


class TestQuestions:
    def test_unknown_category(self):
        with pytest.raises(ValueError):
            question(category="Cooking")

    def test_gold_out_of_range(self):
        with pytest.raises(ValueError):
            question(gold=3)

    def test_letter_gold_and_round_trip(self, tmp_path):
        q = QuestionRecord.from_dict(
            {"id": 7, "video_id": "v", "category": "Gaze", "question": "?", "choices": ["a", "b"], "gold": "B"}
        )
        assert q.gold == 1 and q.micro_category == "Gaze" and q.id == "7"
        write_questions([q], tmp_path / "q.jsonl")
        assert read_questions(tmp_path / "q.jsonl") == [q]

    def test_reference_time(self):
        assert question(text="At <TIME>1:00</TIME>?").reference_time() == 60.0
        assert question(question_time=5).reference_time() == 5.0
        assert question().reference_time() is None


class TestContext:
    def test_snet_has_graphs_and_no_video(self):
        parts, sizes = build_context(question(), InferenceConfig(Mode.SNET), resources())
        assert not any(isinstance(p, (VideoRef, ImageRef)) for p in parts)
        assert parts[0].text.startswith("Scene graphs:")
        assert sizes["segments"] == 3

    def test_snet_keeps_single_frame(self):
        q = question(text="What is in <BBOX>0.1,0.1,0.2,0.2</BBOX> at <TIME>30</TIME>?")
        parts, _ = build_context(q, InferenceConfig(Mode.SNET), resources())
        assert [type(p) for p in parts] == [TextPart, ImageRef]
        assert parts[1].bbox == (0.1, 0.1, 0.2, 0.2)

    def test_knet_has_video_and_paths(self):
        parts, _ = build_context(question(), InferenceConfig(Mode.KNET), resources())
        assert "mug is used for drinking" in parts[0].text
        assert parts[1] == VideoRef("P01-101")

    def test_video_only(self):
        parts, _ = build_context(question(), InferenceConfig(Mode.VIDEO_ONLY), resources(manifests={"P01-101": "m1"}))
        assert parts == [VideoRef("m1")]

    def test_combined_modes(self):
        parts, _ = build_context(question(), InferenceConfig(Mode.SNET_PLUS_KNET), resources())
        assert [type(p) for p in parts] == [TextPart, TextPart, VideoRef]
        parts, _ = build_context(question(), InferenceConfig(Mode.KNET_FROM_SNET), resources())
        assert "kettle is located at kitchen" in parts[0].text

    def test_gaze_questions_use_look_back(self):
        q = question(category="Gaze", text="What will I touch? <TIME>600</TIME>")
        text = build_context(q, InferenceConfig(Mode.SNET), resources())[0][0].text
        graphs = json.loads(text.split("\n", 1)[1])
        # window [200, 600]: segment 0 stays but its actions (10 s, 120 s) fall
        # outside; raw segment 1 stays verbatim; segment 2 starts after 600 s
        assert [s["segment_start"] for s in graphs] == ["0:00", "6:40"]
        assert graphs[0]["actions"] == []
        assert graphs[1]["raw_output"] == "oops {"

    @pytest.mark.parametrize(
        "mode,missing",
        [(Mode.SNET, "bundles"), (Mode.KNET, "kg_paths"), (Mode.KNET_FROM_SNET, "snet_kg_paths")],
    )
    def test_missing_artifact(self, mode, missing):
        res = resources()
        setattr(res, missing, {})
        with pytest.raises(ConfigurationError, match="needs"):
            build_context(question(), InferenceConfig(mode), res)


class TestRun:
    def test_fixture_answer_a(self, tmp_path):
        q = question()
        cfg = InferenceConfig(Mode.KNET)
        res = resources()
        record_exchange(tmp_path, prompt_for(q, cfg, res), "A")
        res.backend = FixtureBackend(tmp_path)
        pred = run_question(q, cfg, res)
        assert pred.answer == 0 and pred.label == "A"
        assert pred.config == "knet"
        assert set(pred.provenance) == {"prompt_hash", "template_hash", "context"}

    def test_timings_opt_in(self):
        pred = run_question(question(), InferenceConfig(Mode.KNET), resources(record_timings=True))
        assert pred.provenance["elapsed_s"] >= 0

    def test_run_questions_order_and_determinism(self):
        qs = make_questions(20)
        res = PipelineResources(
            HashChoiceBackend(),
            bundles={v: make_bundle(v, d) for v, d in {"P01-101": 900.0, "P02-7": 350.0}.items()},
            kg_paths=kg_paths(qs),
        )
        a = run_questions(qs, InferenceConfig(Mode.SNET_PLUS_KNET), res, 8)
        b = run_questions(qs, InferenceConfig(Mode.SNET_PLUS_KNET), res, 1)
        assert [p.question_id for p in a] == [q.id for q in qs]
        assert dumps_predictions(a) == dumps_predictions(b)

    def test_predictions_file_round_trip(self, tmp_path):
        preds = [Prediction("q1", "snet", 2, {"prompt_hash": "x"}), Prediction("q2", "snet", None)]
        path = tmp_path / "p.jsonl"
        path.write_text(dumps_predictions(preds))
        assert read_predictions(path) == preds


def pred(qid, answer, config="knet"):
    return Prediction(qid, config, answer)


class TestScore:
    def test_three_of_four(self):
        qs = [question(f"q{i}", gold=0) for i in range(4)]
        report = score([pred("q0", 0), pred("q1", 0), pred("q2", 0), pred("q3", 1)], qs)
        assert report.categories["Action"].accuracy == 75.0
        assert report.to_dict()["categories"]["Action"] == {"correct": 3, "total": 4, "accuracy": 75.0}

    def test_all_abstentions(self):
        qs = [question(f"q{i}") for i in range(3)]
        assert score([pred(q.id, None) for q in qs], qs).overall.accuracy == 0.0

    def test_hand_table(self):
        rows = [
            ("Action", "a1", 0, 0),
            ("Action", "a1", 1, 2),
            ("Action", "a2", 2, 2),
            ("Action", "a2", 0, None),
            ("Action", "a1", 0, 0),
            ("Recipe", "r1", 1, 1),
            ("Recipe", "r1", 2, 2),
            ("Recipe", "r1", 0, 1),
            ("Recipe", "r2", 0, 0),
            ("Recipe", "r2", 1, None),
        ]
        qs = [question(f"q{i}", cat, mic, gold=g) for i, (cat, mic, g, _) in enumerate(rows)]
        preds = [pred(f"q{i}", p) for i, (*_, p) in enumerate(rows)]
        d = score(preds, qs).to_dict()
        assert d["overall"] == {"correct": 6, "total": 10, "accuracy": 60.0}
        assert {k: v["accuracy"] for k, v in d["categories"].items()} == {"Action": 60.0, "Recipe": 60.0}
        assert {k: v["accuracy"] for k, v in d["micro_categories"].items()} == {
            "a1": 66.67,
            "a2": 50.0,
            "r1": 66.67,
            "r2": 50.0,
        }
        assert d["config"] == "knet"

    def test_missing_gold(self):
        with pytest.raises(ScoringError):
            score([pred("nope", 0)], [question()])
        with pytest.raises(ScoringError):
            score([pred("q1", 0)], [question(gold=None)])

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_recount(self, seed):
        rng = random.Random(seed)
        cats = ["Action", "Gaze", "Recipe"]
        qs, preds, pairs = [], [], []
        for i in range(rng.randint(1, 40)):
            cat = rng.choice(cats)
            mic = f"{cat}-{rng.randrange(3)}"
            gold = rng.randrange(3)
            answer = rng.choice([None, 0, 1, 2])
            qs.append(question(f"q{i}", cat, mic, gold=gold))
            preds.append(pred(f"q{i}", answer))
            pairs.append((cat, mic, answer == gold))
        report = score(preds, qs)
        cat_acc, mic_acc, overall = recount(pairs)
        assert report.overall.accuracy == pytest.approx(overall, abs=1e-9)
        assert {k: b.accuracy for k, b in report.categories.items()} == pytest.approx(cat_acc)
        assert {k: b.accuracy for k, b in report.micro_categories.items()} == pytest.approx(mic_acc)
        again = CategoryReport.from_dict(json.loads(report.dumps()))
        assert again.to_dict() == report.to_dict()


def report(accs, config=None):
    """accs: micro -> accuracy in whole percent (out of 100 questions)."""
    micro = {m: Bucket(a, 100) for m, a in accs.items()}
    total = Bucket(sum(b.correct for b in micro.values()), 100 * len(micro))
    return CategoryReport({"Action": total}, micro, total, config)


class TestEnsemble:
    def test_argmax(self):
        reports = {"video": report({"m": 30}), "snet": report({"m": 41}), "knet": report({"m": 34})}
        assert select_ensemble(reports) == {"m": "snet"}

    def test_tie_goes_to_knet(self):
        reports = {k: report({"m": 50}) for k in ("video", "snet", "snet+knet", "knet", "knet-from-snet")}
        assert select_ensemble(reports) == {"m": "knet"}

    def test_tie_priority_order(self):
        reports = {k: report({"m": 50}) for k in ("video", "snet+knet", "snet")}
        assert select_ensemble(reports) == {"m": "snet"}

    def test_single_config(self):
        assert select_ensemble({"video": report({"a": 10, "b": 90})}) == {"a": "video", "b": "video"}

    def test_inconsistent_micro_sets(self):
        with pytest.raises(EnsembleError):
            select_ensemble({"video": report({"a": 1}), "snet": report({"b": 1})})
        with pytest.raises(EnsembleError):
            select_ensemble({})

    @pytest.mark.parametrize("seed", range(30))
    def test_dominance(self, seed):
        rng = random.Random(seed)
        keys = ["video", "snet", "knet", "snet+knet", "knet-from-snet"]
        micros = [f"m{i}" for i in range(rng.randint(1, 6))]
        reports = {k: report({m: rng.randint(0, 5) * 20 for m in micros}) for k in keys}
        assignment = select_ensemble(reports)
        assert set(assignment) == set(micros)
        for m, best in assignment.items():
            assert all(reports[best].micro_categories[m].accuracy >= r.micro_categories[m].accuracy for r in reports.values())
        ens = sum(reports[assignment[m]].micro_categories[m].correct for m in micros)
        assert ens >= max(r.overall.correct for r in reports.values())

    def test_estimator(self):
        sel = EnsembleSelector()
        with pytest.raises(NotFittedError):
            sel.predict([question()])
        sel.fit({"video": report({"take": 30}), "snet": report({"take": 41})})
        assert sel.predict([question()]) == ["snet"]
        with pytest.raises(EnsembleError):
            sel.predict([question(micro="other")])
        assert sel.get_params() == {}

    def test_assignment_file(self):
        a = {"m2": "snet", "m1": "knet+video"}
        assert assignment_loads(assignment_dumps(a)) == a


class TestSubmission:
    def setup_method(self):
        self.qs = [question("q2", micro="b"), question("q1", micro="a"), question("q3", micro="a")]
        self.preds = {
            "snet": [pred("q1", 0, "snet"), pred("q2", 1, "snet"), pred("q3", 2, "snet")],
            "knet": [pred("q1", 2), pred("q2", None), pred("q3", 1)],
        }

    def test_mixed_assignment(self):
        csv = emit_submission({"a": "snet", "b": "knet"}, self.preds, self.qs)
        assert csv == "question_id,answer_label\nq1,A\nq2,\nq3,C\n"

    def test_single_config(self):
        csv = emit_submission({"a": "knet", "b": "knet"}, self.preds, self.qs)
        assert csv == "question_id,answer_label\nq1,C\nq2,\nq3,B\n"

    def test_missing_prediction_lists_ids(self):
        self.preds["snet"] = self.preds["snet"][:1]
        with pytest.raises(EnsembleError, match="q3"):
            emit_submission({"a": "snet", "b": "knet"}, self.preds, self.qs)

    def test_unassigned_micro(self):
        with pytest.raises(EnsembleError):
            emit_submission({"a": "snet"}, self.preds, self.qs)

    def test_selector_combine(self):
        sel = EnsembleSelector().fit({"snet": report({"a": 50, "b": 10}), "knet": report({"a": 40, "b": 20})})
        assert [p.config for p in sel.combine(self.preds, self.qs)] == ["snet", "knet", "snet"]


class TestGeneration:
    def test_generate_bundle_with_fixture_responses(self, tmp_path):
        class ByIndex:
            def complete(self, bundle):
                seg = bundle.user_parts[0].manifest_id
                if seg.endswith("001"):
                    return "the model rambled"
                return json.dumps(
                    {
                        "nodes": [{"id": "k", "kind": "Environment"}, {"id": "me", "kind": "Agent"}],
                        "binary_edges": [],
                        "actions": [{"action": "stir", "agent": "me", "timestamp": "0:10"}],
                    }
                )

        bundle = generate_bundle(VideoMeta("v", 1000), ByIndex(), max_in_flight=3)
        assert [s.segment_start for s in bundle.segments] == [0, 400, 800]
        assert bundle.segments[1].raw_output == "the model rambled"
        assert bundle.segments[2].actions[0].start == 810

    def test_question_paths(self):
        class Objects:
            def complete(self, bundle):
                return "['cupboard']"

        store = store_from_triples([("cupboard", "UsedFor", "storing_dishes", 0.9)])
        knet = KnowledgeNet().fit(store)
        got = question_paths([question()], Objects(), knet)
        assert got == {"q1": ["cupboard is used for storing dishes"]}

    def test_paths_file(self, tmp_path):
        paths = {"q1": ["a", "b"], "P01": ["c"]}
        (tmp_path / "p.jsonl").write_text(dumps_paths_file(paths))
        assert read_paths_file(tmp_path / "p.jsonl") == paths
        assert snet_kg_paths()
