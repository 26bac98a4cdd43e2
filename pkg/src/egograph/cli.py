"""Command-line entry point: ``egograph <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from egograph import conceptnet, media_plan, mllm, pipeline, scene_net
from egograph.domain import HashingEncoder, HttpEmbeddingClient, SentenceTransformerEncoder
from egograph.knowledge_net import KnowledgeNet
from egograph.resources import data_path, read_sentences

logger = logging.getLogger("egograph")


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def make_encoder(name: str):
    """``hash``, ``http(s)://...`` (embedding service) or ``st:<model>`` (sentence-transformers)."""
    if name == "hash":
        return HashingEncoder()
    if name.startswith(("http://", "https://")):
        return HttpEmbeddingClient(name)
    if name.startswith("st:"):
        return SentenceTransformerEncoder(name[3:])
    raise SystemExit(f"unknown encoder {name!r}")


def make_backend(args) -> mllm.MLLMBackend:
    if args.backend == "fixture":
        if not args.fixtures:
            raise SystemExit("--backend fixture needs --fixtures DIR")
        return mllm.FixtureBackend(args.fixtures)
    if args.backend == "hash":
        backend = mllm.HashChoiceBackend()
    elif args.backend == "http":
        if not args.backend_config:
            raise SystemExit("--backend http needs --backend-config FILE")
        backend = mllm.HttpChatBackend.from_config(args.backend_config)
    else:
        raise SystemExit(f"unknown backend {args.backend!r}")
    if args.record:
        backend = mllm.RecordingBackend(backend, args.record)
    return backend


def _add_backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["fixture", "http", "hash"], default="fixture")
    p.add_argument("--fixtures", help="directory of <prompt-hash>.txt responses")
    p.add_argument("--backend-config", help="JSON file with HttpChatBackend settings")
    p.add_argument("--record", help="write every exchange into this replay directory")
    p.add_argument("--max-in-flight", type=int, default=4)


# -- commands ----------------------------------------------------------------


def cmd_ingest(args) -> int:
    relations = conceptnet.read_relations_file(args.relations or data_path("relations.txt"))
    store = conceptnet.build_store(args.dump, args.lang, relations, args.n_quantiles)
    store.save(args.out)
    logger.info("stored %d assertions (%d malformed rows skipped) in %s", len(store), store.skipped, args.out)
    return 0


def cmd_build_kg(args) -> int:
    store = conceptnet.AssertionStore.load(args.store)
    refs = read_sentences(args.refs) if args.refs else None
    knet = KnowledgeNet(
        depth=args.depth,
        threshold=args.threshold,
        max_paths=args.max_paths,
        reference_sentences=refs,
        encoder=make_encoder(args.encoder),
    ).fit(store)
    lines = []
    for root in args.root:
        for path in knet.ranked_paths(root):
            lines.append(json.dumps(path.to_dict()) + "\n")
    _write(args.out, "".join(lines))
    return 0


def cmd_validate_sg(args) -> int:
    text = Path(args.file).read_bytes()
    try:
        data = json.loads(text)
    except ValueError:
        data = None
    if isinstance(data, dict) and data.get("format") == scene_net.BUNDLE_FORMAT:
        bundle = scene_net.SceneGraphBundle.from_dict(data)
        docs = list(bundle.segments)
    else:
        docs = [scene_net.parse_scene_graph(text, args.segment_start, args.segment_duration)]
    n_bad = 0
    for i, doc in enumerate(docs):
        # raw-wrapped documents report why they were quarantined
        problems = (list(doc.diagnostics) if doc.is_raw else []) or scene_net.validate_scene_graph(doc)
        for v in problems:
            print(f"segment {i}: {v}")
        n_bad += bool(problems)
    print(f"{len(docs) - n_bad}/{len(docs)} segment(s) valid")
    return 1 if n_bad else 0


def cmd_plan(args) -> int:
    meta = media_plan.VideoMeta(args.video_id, args.duration)
    summary = media_plan.plan_summary(meta)
    _write(args.out, json.dumps(summary, indent=2) + "\n")
    if args.manifest:
        manifest = media_plan.frame_manifest(meta, accelerate=not args.no_accelerate)
        Path(args.manifest).write_text(json.dumps(manifest) + "\n", encoding="utf-8")
    return 0


def cmd_generate_sg(args) -> int:
    meta = media_plan.VideoMeta(args.video_id, args.duration)
    bundle = pipeline.generate_bundle(meta, make_backend(args), args.schema, args.max_in_flight)
    _write(args.out, bundle.dumps() + "\n")
    return 0


def _load_bundles(directory: str | None) -> dict[str, scene_net.SceneGraphBundle]:
    if directory is None:
        return {}
    out = {}
    for path in sorted(Path(directory).glob("*.json")):
        bundle = scene_net.SceneGraphBundle.loads(path.read_text(encoding="utf-8"))
        out[bundle.video_id] = bundle
    return out


def cmd_run(args) -> int:
    questions = pipeline.read_questions(args.questions)
    video = None if args.video is None else args.video == "yes"
    cfg = pipeline.InferenceConfig(pipeline.Mode(args.mode), video)
    res = pipeline.PipelineResources(
        backend=make_backend(args),
        bundles=_load_bundles(args.bundles),
        kg_paths=pipeline.read_paths_file(args.kg_paths) if args.kg_paths else {},
        snet_kg_paths=pipeline.read_paths_file(args.snet_kg_paths) if args.snet_kg_paths else {},
        record_timings=args.timings,
    )
    preds = pipeline.run_questions(questions, cfg, res, args.max_in_flight)
    _write(args.out, pipeline.dumps_predictions(preds))
    return 0


def cmd_score(args) -> int:
    report = pipeline.score(pipeline.read_predictions(args.preds), pipeline.read_questions(args.gold))
    _write(args.out, report.dumps())
    return 0


def _read_reports(directory: str) -> dict[str, pipeline.CategoryReport]:
    reports = {}
    for path in sorted(Path(directory).glob("*.json")):
        report = pipeline.CategoryReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
        reports[report.config or path.stem] = report
    if not reports:
        raise SystemExit(f"no report files in {directory}")
    return reports


def cmd_ensemble(args) -> int:
    assignment = pipeline.select_ensemble(_read_reports(args.reports))
    _write(args.out, pipeline.assignment_dumps(assignment))
    return 0


def cmd_submit(args) -> int:
    assignment = pipeline.assignment_loads(Path(args.assignment).read_text(encoding="utf-8"))
    preds = {}
    for path in sorted(Path(args.preds).glob("*.jsonl")):
        rows = pipeline.read_predictions(path)
        key = rows[0].config if rows else path.stem
        preds[key] = rows
    questions = pipeline.read_questions(args.questions)
    _write(args.out, pipeline.emit_submission(assignment, preds, questions))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egograph", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="ingest a ConceptNet assertion dump into a store file")
    p.add_argument("--dump", required=True)
    p.add_argument("--lang", default="en")
    p.add_argument("--relations", help="relation whitelist file (default: shipped list)")
    p.add_argument("--n-quantiles", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-kg", help="build knowledge graphs and write ranked paths")
    p.add_argument("--store", required=True)
    p.add_argument("--root", required=True, action="append", help="object name or concept URI; repeatable")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--max-paths", type=int, default=30)
    p.add_argument("--refs", help="reference sentences, one per line (default: shipped kitchen set)")
    p.add_argument("--encoder", default="hash", help="hash | http(s)://embedding-service | st:<model>")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_kg)

    p = sub.add_parser("validate-sg", help="validate a scene-graph JSON file or bundle")
    p.add_argument("file")
    p.add_argument("--segment-start", default="0")
    p.add_argument("--segment-duration", type=float, default=media_plan.MAX_SEGMENT_S)
    p.set_defaults(func=cmd_validate_sg)

    p = sub.add_parser("plan", help="segment / acceleration plan for a video duration")
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--video-id", default="video")
    p.add_argument("--manifest", help="also write the frame manifest here")
    p.add_argument("--no-accelerate", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("generate-sg", help="generate a scene-graph bundle for one video")
    p.add_argument("--video-id", required=True)
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--schema", help="scene-graph schema file (default: shipped schema)")
    p.add_argument("--out")
    _add_backend_args(p)
    p.set_defaults(func=cmd_generate_sg)

    p = sub.add_parser("run", help="answer questions under one configuration")
    p.add_argument("--mode", required=True, choices=[m.value for m in pipeline.Mode])
    p.add_argument("--questions", required=True)
    p.add_argument("--out")
    p.add_argument("--video", choices=["yes", "no"], help="override whether raw video is included")
    p.add_argument("--bundles", help="directory of scene-graph bundle JSON files")
    p.add_argument("--kg-paths", help="JSONL {key: question_id, paths: [...]}")
    p.add_argument("--snet-kg-paths", help="JSONL {key: video_id, paths: [...]}")
    p.add_argument("--timings", action="store_true", help="record wall-clock timings in provenance")
    _add_backend_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("score", help="accuracy report by category and micro-category")
    p.add_argument("--preds", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ensemble", help="pick the best configuration per micro-category")
    p.add_argument("--reports", required=True, help="directory of report JSON files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("submit", help="write the ensemble submission CSV")
    p.add_argument("--assignment", required=True)
    p.add_argument("--preds", required=True, help="directory of per-configuration prediction JSONL files")
    p.add_argument("--questions", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_submit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (
        conceptnet.StoreError,
        pipeline.ConfigurationError,
        pipeline.EnsembleError,
        pipeline.ScoringError,
        scene_net.SegmentOverlapError,
        mllm.PromptError,
        mllm.FixtureMissingError,
        OSError,
    ) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
