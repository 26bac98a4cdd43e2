"""Multi-modal LLM access: prompt assembly, backends and output extraction.

Three prompt kinds are built here: scene-graph generation for a video
segment, object recognition for KnowledgeNet roots, and multiple-choice
answering. Backends only need ``complete(bundle) -> str``; a fixture backend
replays recorded responses keyed by the bundle hash so full pipelines can be
rerun offline.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence, Union, runtime_checkable

import httpx

from egograph.media_plan import SegmentPlan
from egograph.resources import scene_graph_schema_path
from egograph.scene_net import format_timestamp, parse_timestamp

logger = logging.getLogger(__name__)

PROMPT_VERSION = "prompts/1.0"

SCENE_GRAPH_SYSTEM = """\
You are annotating an egocentric kitchen video segment as a scene graph.
Schema version: {schema_version}
Return ONLY a JSON object that validates against the JSON Schema below. Do not add prose or code fences.
Nodes: one Environment (the kitchen), at most one Agent (the camera wearer), EnvironmentChild
(fixed structures and large appliances), EnvironmentChildPart (movable sub-parts such as doors)
and DynamicObject (movable or manipulated items). Binary edges: Contains/IsChildOf, HasPart/IsPartOf,
InitiallyLocatedAt, and CreatedFrom (new object -> object it was made from). Actions: one entry per
interaction with the agent, optional source/target/location/tool/created participants, resulting
states, and segment-local timestamps in M:SS.

JSON Schema:
{schema}"""

OBJECT_SYSTEM = """\
You identify kitchen objects relevant to a question about an egocentric video.
Use the bounding boxes, timestamps and visual context provided.
Reply with a plain Python list of lowercase object names, e.g. ['mug', 'kettle'], and nothing else."""

ANSWER_SYSTEM = """\
You answer multiple-choice questions about an egocentric kitchen video.
Use the provided context (video, frames, scene graphs or commonsense facts).
Reply with the letter of the single best option in the form "Answer: X"."""

TEMPLATES = {
    "scene_graph": SCENE_GRAPH_SYSTEM,
    "objects": OBJECT_SYSTEM,
    "answer": ANSWER_SYSTEM,
}


def template_hash(name: str) -> str:
    text = f"{PROMPT_VERSION}\n{TEMPLATES[name]}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class PromptError(Exception):
    pass


class TagParseError(ValueError):
    pass


class FixtureMissingError(LookupError):
    pass


# -- prompt parts ------------------------------------------------------------


@dataclass(frozen=True)
class TextPart:
    text: str

    def to_dict(self) -> dict:
        return {"type": "text", "text": self.text}


@dataclass(frozen=True)
class ImageRef:
    """A single frame to extract; ``bbox`` is drawn on it by the frame tool."""

    frame_id: str
    time_s: float
    bbox: tuple[float, float, float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "type": "image",
            "frame_id": self.frame_id,
            "time_s": self.time_s,
            "bbox": None if self.bbox is None else list(self.bbox),
        }


@dataclass(frozen=True)
class VideoRef:
    manifest_id: str

    def to_dict(self) -> dict:
        return {"type": "video", "manifest_id": self.manifest_id}


Part = Union[TextPart, ImageRef, VideoRef]


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_parts: tuple[Part, ...]
    template: str = ""

    def __post_init__(self):
        if not self.user_parts:
            raise PromptError("a prompt needs at least one user part")

    def to_dict(self) -> dict:
        return {
            "template": self.template,
            "system": self.system_text,
            "user": [p.to_dict() for p in self.user_parts],
        }

    @property
    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("ascii")).hexdigest()

    def text_size(self) -> int:
        return sum(len(p.text) for p in self.user_parts if isinstance(p, TextPart))


@dataclass(frozen=True)
class ChoiceSet:
    options: tuple[str, ...]

    def __post_init__(self):
        if not 2 <= len(self.options) <= 26:
            raise ValueError(f"need 2..26 options, got {len(self.options)}")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(chr(ord("A") + i) for i in range(len(self.options)))

    def render(self) -> str:
        return "\n".join(f"{label}. {opt}" for label, opt in zip(self.labels, self.options))

    def __len__(self) -> int:
        return len(self.options)


# -- backends ----------------------------------------------------------------


@runtime_checkable
class MLLMBackend(Protocol):
    def complete(self, bundle: PromptBundle) -> str: ...


class FixtureBackend:
    """Replays responses stored as ``<bundle-hash>.txt`` files in a directory."""

    def __init__(self, directory: str | Path, fallback: MLLMBackend | None = None):
        self.directory = Path(directory)
        self.fallback = fallback

    def complete(self, bundle: PromptBundle) -> str:
        path = self.directory / f"{bundle.hash}.txt"
        if path.exists():
            return path.read_text(encoding="utf-8")
        if self.fallback is not None:
            return self.fallback.complete(bundle)
        raise FixtureMissingError(f"no fixture for prompt {bundle.hash} in {self.directory}")


def record_exchange(directory: str | Path, bundle: PromptBundle, response: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{bundle.hash}.json").write_text(
        json.dumps(bundle.to_dict(), sort_keys=True, indent=1), encoding="utf-8"
    )
    (directory / f"{bundle.hash}.txt").write_text(response, encoding="utf-8")


class RecordingBackend:
    """Wraps a backend and writes every exchange into a replay directory."""

    def __init__(self, inner: MLLMBackend, directory: str | Path):
        self.inner = inner
        self.directory = Path(directory)

    def complete(self, bundle: PromptBundle) -> str:
        response = self.inner.complete(bundle)
        record_exchange(self.directory, bundle, response)
        return response


_CHOICE_LINE = re.compile(r"^([A-Z])\. ", re.MULTILINE)


class HashChoiceBackend:
    """Offline stand-in that 'answers' by hashing the prompt.

    Picks one of the options listed in the prompt; useful to exercise
    the pipeline end to end without a model. Prompts without options get
    an empty Python list back.
    """

    def __init__(self, salt: str = ""):
        self.salt = salt

    def complete(self, bundle: PromptBundle) -> str:
        text = "\n".join(p.text for p in bundle.user_parts if isinstance(p, TextPart))
        labels = _CHOICE_LINE.findall(text)
        if not labels:
            return "[]"
        h = int(hashlib.sha256((self.salt + bundle.hash).encode()).hexdigest(), 16)
        return f"Answer: {labels[h % len(labels)]}"


def _describe_media(part: ImageRef | VideoRef) -> dict:
    if isinstance(part, VideoRef):
        return {"type": "text", "text": f"[video {part.manifest_id}]"}
    box = "" if part.bbox is None else f" with box {list(part.bbox)}"
    return {"type": "text", "text": f"[frame {part.frame_id} at {format_timestamp(part.time_s)}{box}]"}


class TransportError(RuntimeError):
    pass


class HttpChatBackend:
    """Chat-completions client (OpenAI-compatible JSON over HTTP).

    ``media_resolver`` turns image/video references into request content
    items (for instance an uploaded file URL); by default they are described
    in text. Transport errors, 429 and 5xx responses are retried with
    exponential backoff; other failures are not.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "MLLM_API_KEY",
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 1.0,
        temperature: float = 0.0,
        replay_dir: str | Path | None = None,
        media_resolver: Callable[[ImageRef | VideoRef], dict] | None = None,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.retries = retries
        self.backoff = backoff
        self.temperature = temperature
        self.replay_dir = None if replay_dir is None else Path(replay_dir)
        self.media_resolver = media_resolver or _describe_media
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_config(cls, path: str | Path, **overrides) -> HttpChatBackend:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg.update(overrides)
        return cls(**cfg)

    def request_payload(self, bundle: PromptBundle) -> dict:
        content = []
        for part in bundle.user_parts:
            content.append(part.to_dict() if isinstance(part, TextPart) else self.media_resolver(part))
        return {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": content},
            ],
        }

    def complete(self, bundle: PromptBundle) -> str:
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = self.request_payload(bundle)
        last = None
        for attempt in range(self.retries):
            try:
                resp = self._client.post(self.endpoint, json=payload, headers=headers)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise TransportError(f"server returned {resp.status_code}")
                resp.raise_for_status()
                text = resp.json()["choices"][0]["message"]["content"]
                break
            except (httpx.TransportError, TransportError) as exc:
                last = exc
                logger.warning("MLLM request attempt %d/%d failed: %s", attempt + 1, self.retries, exc)
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        else:
            raise TransportError(f"MLLM request failed after {self.retries} attempts: {last}")
        if self.replay_dir is not None:
            record_exchange(self.replay_dir, bundle, text)
        return text


def complete_many(backend: MLLMBackend, bundles: Sequence[PromptBundle], max_in_flight: int = 4) -> list[str]:
    """Run ``backend.complete`` concurrently; results keep input order."""
    if max_in_flight <= 1:
        return [backend.complete(b) for b in bundles]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(backend.complete, bundles))


# -- prompt builders ---------------------------------------------------------


def build_generation_prompt(
    segment: SegmentPlan,
    video_id: str,
    schema_path: str | Path | None = None,
) -> PromptBundle:
    path = Path(schema_path) if schema_path is not None else scene_graph_schema_path()
    try:
        schema_text = path.read_text(encoding="utf-8")
        version = json.loads(schema_text)["x-schema-version"]
    except (OSError, ValueError, KeyError) as exc:
        raise PromptError(f"cannot load scene-graph schema from {path}: {exc}") from exc
    system = SCENE_GRAPH_SYSTEM.format(schema_version=version, schema=schema_text.strip())
    note = (
        f"Segment {segment.index} of video {video_id}, covering "
        f"{format_timestamp(segment.start)}-{format_timestamp(segment.end)}. "
        "Timestamps are relative to the start of this segment. Output only JSON."
    )
    return PromptBundle(
        system, (VideoRef(segment.manifest_id(video_id)), TextPart(note)), template="scene_graph"
    )


def build_object_prompt(question_text: str, context_parts: Iterable[Part] = ()) -> PromptBundle:
    parts = (*context_parts, TextPart(f"Question: {question_text}\nList the relevant objects."))
    return PromptBundle(OBJECT_SYSTEM, parts, template="objects")


def build_answer_prompt(question_text: str, choices: ChoiceSet, context_parts: Iterable[Part] = ()) -> PromptBundle:
    parts = (*context_parts, TextPart(f"Question: {question_text}\nOptions:\n{choices.render()}"))
    return PromptBundle(ANSWER_SYSTEM, parts, template="answer")


# -- output extraction -------------------------------------------------------

_FENCE = re.compile(r"```[A-Za-z]*\s*\n?(.*?)```", re.DOTALL)
_LIST = re.compile(r"\[[^\[\]]*\]", re.DOTALL)
_QUOTED = re.compile(r"'([^'\n]*)'|\"([^\"\n]*)\"")


def parse_object_list(response: str) -> list[str]:
    """Pull the object-name list out of a model reply.

    Tolerates code fences and surrounding prose. Names are lowercased,
    stripped and de-duplicated in order. Returns ``[]`` (with a warning)
    when no list can be found.
    """
    body = "\n".join(_FENCE.findall(response)) or response
    names: list[str] | None = None
    for m in _LIST.finditer(body):
        candidate = m.group(0)
        try:
            value = ast.literal_eval(candidate)
            if isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
                names = list(value)
                break
        except (ValueError, SyntaxError, MemoryError, RecursionError):
            quoted = [a or b for a, b in _QUOTED.findall(candidate)]
            if quoted:
                names = quoted
                break
    if names is None:
        logger.warning("no object list found in model response: %.80r", response)
        return []
    out: dict[str, None] = {}
    for n in names:
        n = " ".join(n.lower().split())
        if n:
            out.setdefault(n, None)
    return list(out)


def recognize_objects(backend: MLLMBackend, context: PromptBundle) -> list[str]:
    return parse_object_list(backend.complete(context))


_ANSWER_RULES = (
    re.compile(r"(?i:answer)\s*(?:(?i:is))?\s*[:\-]?\s*\(?\b([A-Z])\b\)?"),
    re.compile(r"^\s*\(?([A-Z])(?:[).:,\s]|$)"),
    re.compile(r"\(([A-Za-z])\)"),
)


def extract_answer(response: str, choices: ChoiceSet | int) -> int | None:
    """Map a model reply to an option index, or ``None`` to abstain.

    Rules, first hit wins: an explicit ``Answer: X``; a bare leading label;
    a parenthesized label (any case); a reply equal to one option's text.
    """
    n = choices if isinstance(choices, int) else len(choices)
    if not isinstance(response, str):
        return None
    for rule in _ANSWER_RULES:
        for m in rule.finditer(response):
            idx = ord(m.group(1).upper()) - ord("A")
            if 0 <= idx < n:
                return idx
    if isinstance(choices, ChoiceSet):
        norm = " ".join(response.strip().strip(".").lower().split())
        for i, opt in enumerate(choices.options):
            if norm == " ".join(opt.lower().split()):
                return i
    return None


@dataclass
class AnswerResult:
    index: int | None
    response: str | None
    prompt_hash: str
    template_hash: str
    error: str | None = None


def answer_question(
    backend: MLLMBackend,
    question: str,
    choices: ChoiceSet,
    context_parts: Sequence[Part] = (),
) -> AnswerResult:
    """Ask the model and extract its choice. Failures become abstentions."""
    bundle = build_answer_prompt(question, choices, context_parts)
    try:
        response = backend.complete(bundle)
    except (TransportError, httpx.HTTPError) as exc:
        logger.error("no answer for prompt %s: %s", bundle.hash[:12], exc)
        return AnswerResult(None, None, bundle.hash, template_hash("answer"), error=str(exc))
    return AnswerResult(extract_answer(response, choices), response, bundle.hash, template_hash("answer"))


# -- question tags -----------------------------------------------------------

_TAG_START = re.compile(r"<(TIME|BBOX)\b")
_TIME_TAG = re.compile(r"<TIME>\s*([^<]*?)\s*</TIME>|<TIME\s+([\d:.]+)(?:\s+[^<>]*)?>")
_BBOX_TAG = re.compile(r"<BBOX>\s*([^<]*?)\s*</BBOX>|<BBOX\s+([^<>]*)>")


@dataclass(frozen=True)
class QuestionTags:
    times: tuple[float, ...] = ()
    bboxes: tuple[tuple[float, float, float, float], ...] = field(default=())


def _parse_bbox(text: str) -> tuple[float, float, float, float]:
    try:
        vals = tuple(float(v) for v in re.split(r"[,\s]+", text.strip()) if v)
    except ValueError:
        raise TagParseError(f"BBOX tag has non-numeric coordinates: {text!r}") from None
    if len(vals) != 4:
        raise TagParseError(f"BBOX tag needs 4 coordinates, got {len(vals)}: {text!r}")
    x1, y1, x2, y2 = vals
    if not all(0.0 <= v <= 1.0 for v in vals) or x2 < x1 or y2 < y1:
        raise TagParseError(f"BBOX tag must be normalized x1,y1,x2,y2 with x1<=x2, y1<=y2: {text!r}")
    return vals


def parse_tags(text: str) -> QuestionTags:
    """Read ``<TIME>..</TIME>`` and ``<BBOX>x1,y1,x2,y2</BBOX>`` tags.

    The inline forms ``<TIME 00:01:38.5 video 1>`` and ``<BBOX x1 y1 x2 y2>``
    are accepted too. Any tag that does not match the grammar raises
    :class:`TagParseError`.
    """
    times, boxes = [], []
    for m in _TAG_START.finditer(text):
        name = m.group(1).upper()
        if name == "TIME":
            tm = _TIME_TAG.match(text, m.start())
            if tm is None:
                raise TagParseError(f"malformed TIME tag at offset {m.start()}")
            raw = tm.group(1) if tm.group(1) is not None else tm.group(2)
            try:
                times.append(parse_timestamp(raw))
            except ValueError:
                raise TagParseError(f"TIME tag has an invalid time: {raw!r}") from None
        else:
            bm = _BBOX_TAG.match(text, m.start())
            if bm is None:
                raise TagParseError(f"malformed BBOX tag at offset {m.start()}")
            boxes.append(_parse_bbox(bm.group(1) if bm.group(1) is not None else bm.group(2)))
    return QuestionTags(tuple(times), tuple(boxes))


def frame_id(video_id: str, time_s: float) -> str:
    return f"{video_id}@{time_s:.3f}"


def attach_frame(question: Any) -> ImageRef | None:
    """Frame to show alongside a graph prompt, if the question pins one.

    Applies when the question names an input image (``image_time``) or has
    exactly one TIME tag; a BBOX tag adds an overlay to that frame.
    """
    tags = parse_tags(question.question_text)
    image_time = getattr(question, "image_time", None)
    if image_time is not None:
        t = float(image_time)
    elif len(tags.times) == 1:
        t = tags.times[0]
    else:
        return None
    bbox = tags.bboxes[0] if tags.bboxes else None
    return ImageRef(frame_id(question.video_id, t), t, bbox)
