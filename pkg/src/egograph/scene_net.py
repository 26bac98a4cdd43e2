"""SceneNet scene-graph documents: parsing, validation and timestamp handling.

A segment's graph is a triple of typed nodes, binary structural edges and
timestamped action hyperedges. Model output that is not valid JSON, or that
violates the schema or the referential rules below, is kept verbatim under
``raw_output`` rather than repaired.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Iterable, Sequence

from jsonschema import Draft202012Validator

from egograph.media_plan import MAX_SEGMENT_S, gaze_window
from egograph.resources import scene_graph_schema_path

logger = logging.getLogger(__name__)

NODE_KINDS = ("Agent", "Environment", "EnvironmentChild", "EnvironmentChildPart", "DynamicObject")
EDGE_KINDS = ("Contains", "IsChildOf", "HasPart", "IsPartOf", "InitiallyLocatedAt", "CreatedFrom")
PARTICIPANT_SLOTS = ("source", "target", "location", "tool")

# kind -> (family, whether the edge points parent -> child)
_HIERARCHY = {
    "Contains": ("contains", True),
    "IsChildOf": ("contains", False),
    "HasPart": ("part", True),
    "IsPartOf": ("part", False),
}

BUNDLE_FORMAT = "egograph-scene-bundle"
BUNDLE_VERSION = 1


@lru_cache(maxsize=1)
def load_schema() -> dict:
    return json.loads(scene_graph_schema_path().read_text(encoding="utf-8"))


def schema_version() -> str:
    return load_schema()["x-schema-version"]


@lru_cache(maxsize=1)
def _validator() -> Draft202012Validator:
    return Draft202012Validator(load_schema())


_TS = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*$|^\s*(\d+(?::\d{1,2}){1,2})(\.\d+)?\s*$")


def parse_timestamp(value: Any) -> float:
    """Seconds from a number, ``"SS"``, ``"M:SS"`` or ``"H:MM:SS"`` (fraction allowed)."""
    if isinstance(value, bool):
        raise ValueError(f"invalid timestamp {value!r}")
    if isinstance(value, (int, float)):
        if not math.isfinite(value):
            raise ValueError(f"invalid timestamp {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ValueError(f"invalid timestamp {value!r}")
    m = _TS.match(value)
    if m is None:
        raise ValueError(f"invalid timestamp {value!r}")
    if m.group(1) is not None:
        return float(m.group(1))
    seconds = 0.0
    for part in m.group(2).split(":"):
        seconds = seconds * 60 + int(part)
    return seconds + (float(m.group(3)) if m.group(3) else 0.0)


def format_timestamp(seconds: float) -> str:
    """``410 -> "6:50"``, ``3725 -> "1:02:05"``; fractional seconds are kept."""
    whole = int(seconds)
    frac = seconds - whole
    h, rem = divmod(whole, 3600)
    m, s = divmod(rem, 60)
    sec = f"{s:02d}"
    if frac > 1e-9:
        sec += f"{frac:.3f}".lstrip("0").rstrip("0")
    return f"{h}:{m:02d}:{sec}" if h else f"{m}:{sec}"


@dataclass(frozen=True)
class SceneNode:
    id: str
    kind: str
    description: str = ""
    initial_state: str | None = None
    articulated: bool | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "description": self.description}
        if self.initial_state is not None:
            d["initial_state"] = self.initial_state
        if self.articulated is not None:
            d["articulated"] = self.articulated
        return d


@dataclass(frozen=True)
class BinaryEdge:
    kind: str
    source: str
    target: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "from": self.source, "to": self.target}


@dataclass(frozen=True)
class ActionHyperedge:
    action: str
    agent: str
    start: float
    end: float | None = None
    source: str | None = None
    target: str | None = None
    location: str | None = None
    tool: str | None = None
    created: tuple[str, ...] = ()
    resulting_state_of_source: str | None = None
    resulting_state_of_target: str | None = None

    def participants(self) -> dict[str, str]:
        return {s: getattr(self, s) for s in PARTICIPANT_SLOTS if getattr(self, s) is not None}

    def shifted(self, offset: float) -> ActionHyperedge:
        return replace(
            self,
            start=self.start + offset,
            end=None if self.end is None else self.end + offset,
        )

    def to_dict(self, time_format=None) -> dict:
        fmt = time_format or (lambda t: t)
        ts: Any = fmt(self.start) if self.end is None else {"start": fmt(self.start), "end": fmt(self.end)}
        d: dict[str, Any] = {"action": self.action, "agent": self.agent, "timestamp": ts}
        d.update(self.participants())
        if self.created:
            d["created"] = list(self.created)
        for key in ("resulting_state_of_source", "resulting_state_of_target"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        return d


@dataclass(frozen=True)
class Violation:
    rule: str
    element: str
    message: str

    def __str__(self) -> str:
        return f"[{self.rule}] {self.element}: {self.message}"


@dataclass(frozen=True)
class SceneGraphDocument:
    """One segment's scene graph, or the raw model output it was parsed from.

    ``raw_output`` is ``None`` for parsed documents. For raw-wrapped ones it
    holds the original text; byte input is kept via ``surrogateescape`` so
    :meth:`raw_bytes` returns it unchanged.
    """

    segment_start: float = 0.0
    segment_duration: float = MAX_SEGMENT_S
    nodes: tuple[SceneNode, ...] = ()
    binary_edges: tuple[BinaryEdge, ...] = ()
    actions: tuple[ActionHyperedge, ...] = ()
    raw_output: str | None = None
    diagnostics: tuple[Violation, ...] = field(default=(), compare=False)
    globalized: bool = False

    def __post_init__(self):
        if not (0 < self.segment_duration <= MAX_SEGMENT_S):
            raise ValueError(
                f"segment_duration must be in (0, {MAX_SEGMENT_S:g}], got {self.segment_duration}"
            )
        if self.segment_start < 0:
            raise ValueError("segment_start must be nonnegative")

    @property
    def is_raw(self) -> bool:
        return self.raw_output is not None

    @property
    def segment_end(self) -> float:
        return self.segment_start + self.segment_duration

    def raw_bytes(self) -> bytes:
        if self.raw_output is None:
            raise ValueError("document is not raw-wrapped")
        return self.raw_output.encode("utf-8", "surrogateescape")

    def graph_dict(self) -> dict:
        """The graph in wire format (the shape the model is asked to emit)."""
        if self.is_raw:
            return {"raw_output": self.raw_output}
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "binary_edges": [e.to_dict() for e in self.binary_edges],
            "actions": [a.to_dict() for a in self.actions],
        }

    def to_json(self) -> str:
        return json.dumps(self.graph_dict(), ensure_ascii=False)

    def to_dict(self) -> dict:
        d = {
            "segment_start": self.segment_start,
            "segment_duration": self.segment_duration,
            "globalized": self.globalized,
        }
        d.update(self.graph_dict())
        if self.diagnostics:
            d["diagnostics"] = [
                {"rule": v.rule, "element": v.element, "message": v.message} for v in self.diagnostics
            ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneGraphDocument:
        common = dict(
            segment_start=float(d["segment_start"]),
            segment_duration=float(d["segment_duration"]),
            globalized=bool(d.get("globalized", False)),
            diagnostics=tuple(Violation(**v) for v in d.get("diagnostics", ())),
        )
        if "raw_output" in d:
            return cls(raw_output=d["raw_output"], **common)
        return replace(_build(d), **common)


def _opt_str(value) -> str | None:
    return None if value is None else str(value)


def _build(data: dict) -> SceneGraphDocument:
    nodes = tuple(
        SceneNode(
            id=n["id"],
            kind=n["kind"],
            description=n.get("description", ""),
            initial_state=n.get("initial_state"),
            articulated=n.get("articulated"),
        )
        for n in data["nodes"]
    )
    edges = tuple(BinaryEdge(e["kind"], e["from"], e["to"]) for e in data["binary_edges"])
    actions = []
    for a in data["actions"]:
        ts = a["timestamp"]
        if isinstance(ts, dict):
            start = parse_timestamp(ts["start"])
            end = None if ts.get("end") is None else parse_timestamp(ts["end"])
        else:
            start, end = parse_timestamp(ts), None
        actions.append(
            ActionHyperedge(
                action=a["action"],
                agent=a["agent"],
                start=start,
                end=end,
                created=tuple(a.get("created") or ()),
                resulting_state_of_source=_opt_str(a.get("resulting_state_of_source")),
                resulting_state_of_target=_opt_str(a.get("resulting_state_of_target")),
                **{s: a.get(s) for s in PARTICIPANT_SLOTS},
            )
        )
    return SceneGraphDocument(nodes=nodes, binary_edges=edges, actions=tuple(actions))


_FENCE = re.compile(r"^\s*```[A-Za-z]*\s*\n(.*?)\n?```\s*$", re.DOTALL)


def _wrap(raw: str, segment_start: float, segment_duration: float, diagnostics) -> SceneGraphDocument:
    return SceneGraphDocument(
        segment_start=segment_start,
        segment_duration=segment_duration,
        raw_output=raw,
        diagnostics=tuple(diagnostics),
    )


def parse_scene_graph(
    raw: str | bytes,
    segment_start: float | str = 0.0,
    segment_duration: float = MAX_SEGMENT_S,
) -> SceneGraphDocument:
    """Parse one segment's model output.

    Never raises on bad model output: anything that is not a conforming
    scene graph comes back raw-wrapped with the reasons in ``diagnostics``.
    Invalid segment bounds are a caller error and do raise ``ValueError``.
    """
    segment_start = parse_timestamp(segment_start)
    segment_duration = float(segment_duration)
    text = raw.decode("utf-8", "surrogateescape") if isinstance(raw, (bytes, bytearray)) else raw
    # validates the segment bounds up front
    SceneGraphDocument(segment_start=segment_start, segment_duration=segment_duration)

    def wrap(*diags: Violation) -> SceneGraphDocument:
        return _wrap(text, segment_start, segment_duration, diags)

    body = text
    fence = _FENCE.match(body)
    if fence:
        body = fence.group(1)
    try:
        data = json.loads(body)
    except Exception as exc:  # includes RecursionError on pathological nesting
        return wrap(Violation("invalid-json", "document", str(exc)[:200]))

    try:
        errors = sorted(_validator().iter_errors(data), key=lambda e: list(e.absolute_path))
    except Exception as exc:
        return wrap(Violation("schema", "document", f"schema check failed: {exc}"[:200]))
    if errors:
        return wrap(
            *(
                Violation("schema", "/".join(map(str, e.absolute_path)) or "document", e.message[:200])
                for e in errors[:20]
            )
        )
    try:
        doc = replace(_build(data), segment_start=segment_start, segment_duration=segment_duration)
    except (ValueError, KeyError, TypeError) as exc:
        return wrap(Violation("schema", "document", str(exc)[:200]))
    violations = validate_scene_graph(doc)
    if violations:
        return wrap(*violations)
    return doc


def validate_scene_graph(doc: SceneGraphDocument) -> list[Violation]:
    """Check the referential and structural rules; an empty list means valid."""
    if doc.is_raw:
        return [Violation("unparsed-document", "document", "document is raw-wrapped")]
    out: list[Violation] = []
    kinds: dict[str, str] = {}
    for n in doc.nodes:
        if n.id in kinds:
            out.append(Violation("duplicate-node-id", n.id, "node id used more than once"))
        elif n.kind not in NODE_KINDS:
            out.append(Violation("node-kind", n.id, f"unknown node kind {n.kind!r}"))
        kinds.setdefault(n.id, n.kind)

    n_env = sum(n.kind == "Environment" for n in doc.nodes)
    if n_env != 1:
        out.append(Violation("singleton-environment", "document", f"expected 1 Environment node, found {n_env}"))
    agents = [n.id for n in doc.nodes if n.kind == "Agent"]
    if len(agents) > 1:
        out.append(Violation("singleton-agent", "document", f"expected at most 1 Agent node, found {len(agents)}"))

    hierarchy: dict[str, set[tuple[str, str]]] = {"contains": set(), "part": set()}
    created_from: set[str] = set()
    for i, e in enumerate(doc.binary_edges):
        eid = f"edge[{i}]"
        if e.kind not in EDGE_KINDS:
            out.append(Violation("edge-kind", eid, f"unknown edge kind {e.kind!r}"))
            continue
        missing = [x for x in (e.source, e.target) if x not in kinds]
        if missing:
            out.append(Violation("edge-endpoint-missing", eid, f"unknown node(s) {', '.join(missing)}"))
            continue
        if e.kind == "CreatedFrom":
            if kinds[e.source] != "DynamicObject" or kinds[e.target] != "DynamicObject":
                out.append(
                    Violation("createdfrom-endpoint-kind", eid, "CreatedFrom must link two DynamicObject nodes")
                )
            created_from.add(e.source)
        if e.kind in _HIERARCHY:
            family, downward = _HIERARCHY[e.kind]
            hierarchy[family].add((e.source, e.target) if downward else (e.target, e.source))

    for family, pairs in hierarchy.items():
        for parent, child in sorted(pairs):
            if (child, parent) in pairs and parent < child:
                out.append(
                    Violation(
                        "inverse-edge-conflict",
                        f"{parent}|{child}",
                        f"{family} edges disagree on which node is the parent",
                    )
                )

    for i, a in enumerate(doc.actions):
        aid = f"action[{i}]"
        if kinds.get(a.agent) != "Agent":
            out.append(Violation("action-agent", aid, f"agent {a.agent!r} is not an Agent node"))
        for slot, ref in a.participants().items():
            if ref not in kinds:
                out.append(Violation("action-participant-missing", aid, f"{slot} {ref!r} is not a node"))
        for ref in a.created:
            if ref not in kinds:
                out.append(Violation("action-participant-missing", aid, f"created {ref!r} is not a node"))
            elif ref not in created_from:
                out.append(Violation("created-without-origin", aid, f"{ref!r} has no CreatedFrom edge"))
        if a.start < 0 or (a.end is not None and a.end < a.start):
            out.append(Violation("timestamp-order", aid, f"bad interval start={a.start} end={a.end}"))
    return out


def globalize_timestamps(doc: SceneGraphDocument) -> SceneGraphDocument:
    """Move action times from the segment clock to the video clock (idempotent)."""
    if doc.globalized:
        return doc
    return replace(
        doc,
        actions=tuple(a.shifted(doc.segment_start) for a in doc.actions),
        globalized=True,
    )


class SegmentOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class SceneGraphBundle:
    video_id: str
    segments: tuple[SceneGraphDocument, ...]

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "video_id": self.video_id,
            "segments": [s.to_dict() for s in self.segments],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> SceneGraphBundle:
        if d.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"not a scene bundle (format={d.get('format')!r})")
        return cls(d["video_id"], tuple(SceneGraphDocument.from_dict(s) for s in d["segments"]))

    @classmethod
    def loads(cls, text: str) -> SceneGraphBundle:
        return cls.from_dict(json.loads(text))

    def objects(self, kinds: Iterable[str] = ("DynamicObject", "EnvironmentChild", "EnvironmentChildPart")) -> list[str]:
        """Distinct object descriptions (or ids) across parsed segments, in first-seen order."""
        kinds = set(kinds)
        seen: dict[str, None] = {}
        for seg in self.segments:
            for n in seg.nodes:
                if n.kind in kinds:
                    seen.setdefault((n.description or n.id).strip().lower(), None)
        return list(seen)


def merge_segments(docs: Sequence[SceneGraphDocument], video_id: str) -> SceneGraphBundle:
    """Order globalized segments by start time, rejecting overlapping windows."""
    if any(not d.globalized for d in docs):
        raise ValueError("all segments must be globalized before merging")
    ordered = sorted(docs, key=lambda d: (d.segment_start, d.segment_duration))
    overlaps = [
        f"[{format_timestamp(a.segment_start)}, {format_timestamp(a.segment_end)}) overlaps "
        f"[{format_timestamp(b.segment_start)}, {format_timestamp(b.segment_end)})"
        for a, b in zip(ordered, ordered[1:])
        if b.segment_start < a.segment_end
    ]
    if overlaps:
        raise SegmentOverlapError("overlapping segments: " + "; ".join(overlaps))
    return SceneGraphBundle(video_id, tuple(ordered))


def render_bundle_for_prompt(
    bundle: SceneGraphBundle,
    reference_time: float | None = None,
    horizon: float | None = None,
) -> str:
    """Canonical JSON text of the bundle for inclusion in a prompt.

    With ``reference_time``, segments starting after it are dropped; adding
    ``horizon`` keeps only the ``horizon`` seconds before it (actions outside
    ``[reference_time - horizon, reference_time]`` are removed).
    """
    if horizon is not None and reference_time is None:
        raise ValueError("horizon requires a reference_time")
    lo, hi = -math.inf, math.inf
    if reference_time is not None:
        hi = float(reference_time)
        if horizon is not None:
            lo = gaze_window(reference_time, horizon)[0]

    rendered = []
    for seg in bundle.segments:
        if seg.segment_start > hi or seg.segment_end <= lo:
            continue
        entry: dict[str, Any] = {
            "segment_start": format_timestamp(seg.segment_start),
            "segment_end": format_timestamp(seg.segment_end),
        }
        if seg.is_raw:
            # undecodable bytes become U+FFFD so the prompt stays valid UTF-8
            entry["raw_output"] = seg.raw_bytes().decode("utf-8", "replace")
        else:
            entry["nodes"] = [n.to_dict() for n in seg.nodes]
            entry["binary_edges"] = [e.to_dict() for e in seg.binary_edges]
            entry["actions"] = [
                a.to_dict(format_timestamp) for a in seg.actions if lo <= a.start <= hi
            ]
        rendered.append(entry)
    return json.dumps(rendered, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
