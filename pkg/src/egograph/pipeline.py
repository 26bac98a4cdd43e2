"""Inference configurations, accuracy reports and per-micro-category ensembling.

Each question is answered under one input configuration:

* ``video``: question plus raw video (or the frame it points to);
* ``snet``: question plus all globalized scene graphs of the video, no raw
  video unless asked for (a single TIME/BBOX frame is still attached);
* ``knet``: question, video and the verbalized ConceptNet paths;
* ``snet+knet`` and ``knet-from-snet``: the combined ablations.

Predictions are scored per category and micro-category; the ensemble picks,
for every micro-category, the configuration with the best accuracy.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from egograph.media_plan import GAZE_LOOKBACK_S, VideoMeta, plan_segments
from egograph.mllm import (
    ChoiceSet,
    MLLMBackend,
    Part,
    TextPart,
    VideoRef,
    answer_question,
    attach_frame,
    build_answer_prompt,
    build_generation_prompt,
    build_object_prompt,
    complete_many,
    parse_tags,
    recognize_objects,
)
from egograph.scene_net import (
    SceneGraphBundle,
    globalize_timestamps,
    merge_segments,
    parse_scene_graph,
    render_bundle_for_prompt,
)

logger = logging.getLogger(__name__)

CATEGORIES = (
    "3D Perception",
    "Action",
    "Gaze",
    "Ingredient",
    "Nutrition",
    "Object Motion",
    "Recipe",
)


class ConfigurationError(Exception):
    """A configuration needs an artifact that was not supplied."""


class Mode(str, Enum):
    VIDEO_ONLY = "video"
    SNET = "snet"
    KNET = "knet"
    SNET_PLUS_KNET = "snet+knet"
    KNET_FROM_SNET = "knet-from-snet"


_DEFAULT_VIDEO = {
    Mode.VIDEO_ONLY: True,
    Mode.SNET: False,
    Mode.KNET: True,
    Mode.SNET_PLUS_KNET: True,
    Mode.KNET_FROM_SNET: True,
}
# tie-break order for ensemble selection, most preferred first
MODE_PRIORITY = (Mode.KNET, Mode.SNET, Mode.VIDEO_ONLY, Mode.SNET_PLUS_KNET, Mode.KNET_FROM_SNET)


@dataclass(frozen=True)
class InferenceConfig:
    mode: Mode
    include_video: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.include_video is None:
            object.__setattr__(self, "include_video", _DEFAULT_VIDEO[self.mode])
        if self.mode is Mode.VIDEO_ONLY and not self.include_video:
            raise ValueError("the video-only configuration must include video")

    @property
    def key(self) -> str:
        if self.include_video == _DEFAULT_VIDEO[self.mode]:
            return self.mode.value
        return self.mode.value + ("+video" if self.include_video else "-novideo")

    @classmethod
    def from_key(cls, key: str) -> InferenceConfig:
        for suffix, video in (("+video", True), ("-novideo", False)):
            if key.endswith(suffix) and key[: -len(suffix)] in Mode._value2member_map_:
                return cls(Mode(key[: -len(suffix)]), video)
        return cls(Mode(key))

    def priority(self) -> tuple:
        return (MODE_PRIORITY.index(self.mode), self.include_video != _DEFAULT_VIDEO[self.mode], self.key)


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    video_id: str
    category: str
    micro_category: str
    question_text: str
    choices: ChoiceSet
    gold: int | None = None
    image_time: float | None = None
    question_time: float | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"question {self.id}: unknown category {self.category!r}")
        if self.gold is not None and not 0 <= self.gold < len(self.choices):
            raise ValueError(f"question {self.id}: gold index {self.gold} out of range")

    @classmethod
    def from_dict(cls, d: Mapping) -> QuestionRecord:
        gold = d.get("gold")
        if isinstance(gold, str):
            gold = ord(gold.strip().upper()) - ord("A")
        return cls(
            id=str(d["id"]),
            video_id=str(d["video_id"]),
            category=d["category"],
            micro_category=str(d.get("micro_category") or d["category"]),
            question_text=d["question"],
            choices=ChoiceSet(tuple(d["choices"])),
            gold=gold,
            image_time=d.get("image_time"),
            question_time=d.get("question_time"),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "video_id": self.video_id,
            "category": self.category,
            "micro_category": self.micro_category,
            "question": self.question_text,
            "choices": list(self.choices.options),
            "gold": self.gold,
            "image_time": self.image_time,
            "question_time": self.question_time,
        }

    def reference_time(self) -> float | None:
        """Question time used for gaze look-back: explicit field, else a lone TIME tag."""
        if self.question_time is not None:
            return float(self.question_time)
        times = parse_tags(self.question_text).times
        return times[0] if len(times) == 1 else None


def read_questions(path: str | Path) -> list[QuestionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(QuestionRecord.from_dict(json.loads(line)))
    return out


def write_questions(questions: Iterable[QuestionRecord], path: str | Path) -> None:
    Path(path).write_text(
        "".join(json.dumps(q.to_dict(), sort_keys=True) + "\n" for q in questions), encoding="utf-8"
    )


@dataclass(frozen=True)
class Prediction:
    question_id: str
    config: str
    answer: int | None
    provenance: Mapping = field(default_factory=dict, compare=False)

    @property
    def label(self) -> str:
        return "" if self.answer is None else chr(ord("A") + self.answer)

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "config": self.config,
            "answer": self.answer,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Prediction:
        return cls(str(d["question_id"]), d["config"], d["answer"], d.get("provenance", {}))


def dumps_predictions(preds: Iterable[Prediction]) -> str:
    return "".join(json.dumps(p.to_dict(), sort_keys=True) + "\n" for p in preds)


def read_predictions(path: str | Path) -> list[Prediction]:
    with open(path, encoding="utf-8") as fh:
        return [Prediction.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass
class PipelineResources:
    """Artifacts a configuration may draw on.

    ``kg_paths`` maps a question id to its path texts; ``snet_kg_paths``
    maps a video id to paths grown from that video's scene-graph objects.
    ``manifests`` maps a video id to its frame-manifest id (default: the id).
    """

    backend: MLLMBackend
    bundles: Mapping[str, SceneGraphBundle] = field(default_factory=dict)
    kg_paths: Mapping[str, Sequence[str]] = field(default_factory=dict)
    snet_kg_paths: Mapping[str, Sequence[str]] = field(default_factory=dict)
    manifests: Mapping[str, str] = field(default_factory=dict)
    gaze_horizon: float = GAZE_LOOKBACK_S
    record_timings: bool = False


def _paths_part(paths: Sequence[str]) -> TextPart:
    return TextPart("Commonsense knowledge:\n" + "\n".join(f"- {p}" for p in paths))


def build_context(q: QuestionRecord, cfg: InferenceConfig, res: PipelineResources) -> tuple[list[Part], dict]:
    """Context parts for ``q`` under ``cfg`` plus size bookkeeping."""
    parts: list[Part] = []
    sizes = {"segments": 0, "paths": 0}
    mode = cfg.mode

    if mode in (Mode.SNET, Mode.SNET_PLUS_KNET):
        bundle = res.bundles.get(q.video_id)
        if bundle is None:
            raise ConfigurationError(f"mode {mode.value} needs a scene-graph bundle for video {q.video_id}")
        ref, horizon = None, None
        if q.category == "Gaze":
            ref = q.reference_time()
            horizon = res.gaze_horizon if ref is not None else None
        parts.append(TextPart("Scene graphs:\n" + render_bundle_for_prompt(bundle, ref, horizon)))
        sizes["segments"] = len(bundle.segments)

    if mode in (Mode.KNET, Mode.SNET_PLUS_KNET):
        paths = res.kg_paths.get(q.id)
        if paths is None:
            raise ConfigurationError(f"mode {mode.value} needs knowledge-graph paths for question {q.id}")
        parts.append(_paths_part(paths))
        sizes["paths"] = len(paths)
    elif mode is Mode.KNET_FROM_SNET:
        paths = res.snet_kg_paths.get(q.video_id)
        if paths is None:
            raise ConfigurationError(
                f"mode {mode.value} needs scene-graph-object paths for video {q.video_id}"
            )
        parts.append(_paths_part(paths))
        sizes["paths"] = len(paths)

    if cfg.include_video:
        parts.append(VideoRef(res.manifests.get(q.video_id, q.video_id)))
    frame = attach_frame(q)
    if frame is not None:
        parts.append(frame)
    return parts, sizes


def run_question(q: QuestionRecord, cfg: InferenceConfig, res: PipelineResources) -> Prediction:
    t0 = time.perf_counter()
    parts, sizes = build_context(q, cfg, res)
    result = answer_question(res.backend, q.question_text, q.choices, parts)
    prov = {
        "prompt_hash": result.prompt_hash,
        "template_hash": result.template_hash,
        "context": {
            "parts": len(parts),
            "text_chars": sum(len(p.text) for p in parts if isinstance(p, TextPart)),
            **sizes,
        },
    }
    if result.error is not None:
        prov["error"] = result.error
    if res.record_timings:
        prov["elapsed_s"] = round(time.perf_counter() - t0, 6)
    return Prediction(q.id, cfg.key, result.index, prov)


def run_questions(
    questions: Sequence[QuestionRecord],
    cfg: InferenceConfig,
    res: PipelineResources,
    max_in_flight: int = 4,
) -> list[Prediction]:
    """Answer every question; output order follows ``questions``."""
    if max_in_flight <= 1:
        return [run_question(q, cfg, res) for q in questions]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda q: run_question(q, cfg, res), questions))


def prompt_for(q: QuestionRecord, cfg: InferenceConfig, res: PipelineResources):
    parts, _ = build_context(q, cfg, res)
    return build_answer_prompt(q.question_text, q.choices, parts)


# -- scoring -----------------------------------------------------------------


@dataclass
class Bucket:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"correct": self.correct, "total": self.total, "accuracy": round(self.accuracy, 2)}


@dataclass
class CategoryReport:
    categories: dict[str, Bucket]
    micro_categories: dict[str, Bucket]
    overall: Bucket
    config: str | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "overall": self.overall.to_dict(),
            "categories": {k: v.to_dict() for k, v in sorted(self.categories.items())},
            "micro_categories": {k: v.to_dict() for k, v in sorted(self.micro_categories.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> CategoryReport:
        def bucket(x):
            return Bucket(int(x["correct"]), int(x["total"]))

        return cls(
            categories={k: bucket(v) for k, v in d["categories"].items()},
            micro_categories={k: bucket(v) for k, v in d["micro_categories"].items()},
            overall=bucket(d["overall"]),
            config=d.get("config"),
        )


class ScoringError(ValueError):
    pass


def score(predictions: Sequence[Prediction], gold: Sequence[QuestionRecord]) -> CategoryReport:
    """Bucketed accuracy; abstentions count as wrong."""
    by_id = {q.id: q for q in gold}
    cats: dict[str, Bucket] = {}
    micro: dict[str, Bucket] = {}
    overall = Bucket()
    configs = set()
    for p in predictions:
        q = by_id.get(p.question_id)
        if q is None or q.gold is None:
            raise ScoringError(f"no gold answer for question {p.question_id}")
        hit = int(p.answer is not None and p.answer == q.gold)
        for b in (cats.setdefault(q.category, Bucket()), micro.setdefault(q.micro_category, Bucket()), overall):
            b.correct += hit
            b.total += 1
        configs.add(p.config)
    return CategoryReport(cats, micro, overall, configs.pop() if len(configs) == 1 else None)


# -- ensemble ----------------------------------------------------------------


class EnsembleError(ValueError):
    pass


def _config_priority(key: str) -> tuple:
    try:
        return (0, InferenceConfig.from_key(key).priority())
    except ValueError:
        return (1, (key,))


def select_ensemble(reports: Mapping[str, CategoryReport]) -> dict[str, str]:
    """Per micro-category, the configuration key with the highest accuracy.

    Ties go to the configuration earliest in ``MODE_PRIORITY``.
    """
    if not reports:
        raise EnsembleError("no reports to select from")
    micro_sets = {k: frozenset(r.micro_categories) for k, r in reports.items()}
    reference = next(iter(micro_sets.values()))
    bad = [k for k, s in micro_sets.items() if s != reference]
    if bad:
        raise EnsembleError(f"reports cover different micro-categories: {sorted(bad)}")
    ordered = sorted(reports, key=_config_priority)
    assignment = {}
    for micro in sorted(reference):
        best = ordered[0]
        for key in ordered[1:]:
            if reports[key].micro_categories[micro].accuracy > reports[best].micro_categories[micro].accuracy:
                best = key
        assignment[micro] = best
    return assignment


def ensemble_predictions(
    assignment: Mapping[str, str],
    predictions: Mapping[str, Sequence[Prediction]],
    questions: Sequence[QuestionRecord],
) -> list[Prediction]:
    """One prediction per question, from its micro-category's assigned config."""
    index = {k: {p.question_id: p for p in preds} for k, preds in predictions.items()}
    out, missing = [], []
    for q in sorted(questions, key=lambda q: q.id):
        key = assignment.get(q.micro_category)
        if key is None:
            raise EnsembleError(f"micro-category {q.micro_category!r} has no assigned configuration")
        pred = index.get(key, {}).get(q.id)
        if pred is None:
            missing.append(q.id)
            continue
        out.append(pred)
    if missing:
        raise EnsembleError(f"missing predictions for question ids: {', '.join(missing)}")
    return out


def emit_submission(
    assignment: Mapping[str, str],
    predictions: Mapping[str, Sequence[Prediction]],
    questions: Sequence[QuestionRecord],
) -> str:
    """CSV ``question_id,answer_label`` sorted by question id (blank label = abstention)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["question_id", "answer_label"])
    for p in ensemble_predictions(assignment, predictions, questions):
        writer.writerow([p.question_id, p.label])
    return buf.getvalue()


class EnsembleSelector(BaseEstimator):
    """Choose a configuration per micro-category from validation reports.

    ``fit`` takes a mapping of configuration key to :class:`CategoryReport`;
    ``predict`` maps questions to the configuration key to use for each.
    """

    def fit(self, X: Mapping[str, CategoryReport], y=None):
        self.assignment_ = select_ensemble(X)
        self.configs_ = sorted(X, key=_config_priority)
        return self

    def predict(self, X: Sequence[QuestionRecord]) -> list[str]:
        check_is_fitted(self, "assignment_")
        out = []
        for q in X:
            if q.micro_category not in self.assignment_:
                raise EnsembleError(f"micro-category {q.micro_category!r} was not seen during fit")
            out.append(self.assignment_[q.micro_category])
        return out

    def combine(self, predictions: Mapping[str, Sequence[Prediction]], questions: Sequence[QuestionRecord]) -> list[Prediction]:
        check_is_fitted(self, "assignment_")
        return ensemble_predictions(self.assignment_, predictions, questions)


def assignment_dumps(assignment: Mapping[str, str]) -> str:
    return json.dumps({"assignment": dict(sorted(assignment.items()))}, indent=2) + "\n"


def assignment_loads(text: str) -> dict[str, str]:
    data = json.loads(text)
    return dict(data.get("assignment", data))


# -- graph generation --------------------------------------------------------


def generate_bundle(meta: VideoMeta, backend: MLLMBackend, schema_path=None, max_in_flight: int = 4) -> SceneGraphBundle:
    """Scene graphs for every 400 s segment of a video, parsed and globalized.

    Malformed segment outputs stay in the bundle raw-wrapped.
    """
    segments = plan_segments(meta)
    bundles = [build_generation_prompt(s, meta.video_id, schema_path) for s in segments]
    responses = complete_many(backend, bundles, max_in_flight)
    docs = [
        globalize_timestamps(parse_scene_graph(r, s.start, s.length)) for s, r in zip(segments, responses)
    ]
    n_raw = sum(d.is_raw for d in docs)
    if n_raw:
        logger.info("%s: %d/%d segments raw-wrapped", meta.video_id, n_raw, len(docs))
    return merge_segments(docs, meta.video_id)


def question_paths(
    questions: Sequence[QuestionRecord],
    backend: MLLMBackend,
    knet,
    manifests: Mapping[str, str] | None = None,
) -> dict[str, list[str]]:
    """Recognize each question's objects with the model, then collect their top paths."""
    manifests = manifests or {}
    out = {}
    for q in questions:
        parts: list[Part] = [VideoRef(manifests.get(q.video_id, q.video_id))]
        frame = attach_frame(q)
        if frame is not None:
            parts.append(frame)
        objects = recognize_objects(backend, build_object_prompt(q.question_text, parts))
        out[q.id] = [text for paths in knet.transform(objects) for text in paths]
    return out


def read_paths_file(path: str | Path) -> dict[str, list[str]]:
    """Read ``{"key": ..., "paths": [...]}`` lines into a mapping."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.setdefault(str(row["key"]), []).extend(row["paths"])
    return out


def dumps_paths_file(paths: Mapping[str, Sequence[str]]) -> str:
    return "".join(json.dumps({"key": k, "paths": list(v)}) + "\n" for k, v in sorted(paths.items()))
