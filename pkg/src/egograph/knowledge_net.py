"""Object-rooted commonsense knowledge graphs over an :class:`AssertionStore`.

A graph is grown breadth-first from a root concept. Each expansion step takes
the outgoing assertions of the current layer, drops those whose normalized
weight does not exceed ``threshold``, keeps the heaviest assertion per ordered
node pair and adds the newly reached concepts as the next layer. Symmetric
relations (SimilarTo, Synonym) are only followed out of the root.

Graphs are then serialized to simple root-anchored paths, rendered as text
and ranked by relevance to a kitchen context (see :mod:`egograph.domain`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from egograph._validation import check_positive_int, check_probability
from egograph.conceptnet import Assertion, AssertionStore, Concept, StoreError, relation_uri
from egograph.domain import DomainPathFilter, EmbeddingBackend
from egograph.resources import default_templates

logger = logging.getLogger(__name__)

DEFAULT_DEPTH = 3
DEFAULT_THRESHOLD = 0.7
DEFAULT_PATH_CAP = 5000


class TemplateError(LookupError):
    """A path uses a relation that has no rendering template."""


@dataclass(frozen=True)
class KnowledgeGraph:
    root: Concept
    layers: Mapping[str, int]
    edges: tuple[Assertion, ...]
    depth: int

    @property
    def nodes(self) -> list[str]:
        return sorted(self.layers)

    def layer(self, concept_id: str) -> int:
        return self.layers[concept_id]

    def edge_keys(self) -> set[tuple[str, str, str]]:
        return {e.key for e in self.edges}

    def out_edges(self) -> dict[str, list[Assertion]]:
        adj: dict[str, list[Assertion]] = {}
        for e in self.edges:
            adj.setdefault(e.start.id, []).append(e)
        for v in adj.values():
            v.sort(key=lambda e: (e.relation.id, e.end.id))
        return adj


def _beats(a: Assertion, b: Assertion) -> bool:
    # heavier wins; equal weights fall back to the smaller relation id
    if a.norm_weight != b.norm_weight:
        return a.norm_weight > b.norm_weight
    return a.relation.id < b.relation.id


def build_graph(
    store: AssertionStore,
    root: Concept | str,
    depth: int = DEFAULT_DEPTH,
    threshold: float = DEFAULT_THRESHOLD,
) -> KnowledgeGraph:
    """Grow the knowledge graph of ``root`` up to ``depth`` expansion steps.

    A root missing from the store yields a root-only graph.
    """
    depth = check_positive_int(depth, "depth")
    threshold = check_probability(threshold, "threshold")
    if isinstance(root, str):
        root = Concept.from_text(root, store.language)

    layers = {root.id: 0}
    edges: dict[tuple[str, str], Assertion] = {}
    frontier = [root.id]
    for k in range(depth):
        candidates: dict[tuple[str, str], Assertion] = {}
        for v in frontier:
            for a in store.neighbors(v, exclude_symmetric=k > 0):
                if a.norm_weight is None:
                    raise StoreError("store weights are not normalized")
                if a.norm_weight <= threshold:
                    continue
                pair = (a.start.id, a.end.id)
                best = candidates.get(pair)
                if best is None or _beats(a, best):
                    candidates[pair] = a
        frontier = []
        for pair in sorted(candidates):
            a = candidates[pair]
            edges[pair] = a
            if a.end.id not in layers:
                layers[a.end.id] = k + 1
                frontier.append(a.end.id)
        if not frontier:
            break
    return KnowledgeGraph(
        root=root,
        layers=layers,
        edges=tuple(edges[p] for p in sorted(edges)),
        depth=depth,
    )


@dataclass(frozen=True)
class SemanticPath:
    """Alternating concept/relation id sequence ``v0, r1, v1, ..., rk, vk``."""

    elements: tuple[str, ...]
    text: str | None = None
    score: float | None = None

    def __post_init__(self):
        if len(self.elements) < 3 or len(self.elements) % 2 == 0:
            raise ValueError(
                f"a path needs k >= 1 hops (odd length >= 3), got {len(self.elements)} elements"
            )

    @property
    def root(self) -> str:
        return self.elements[0]

    @property
    def nodes(self) -> tuple[str, ...]:
        return self.elements[::2]

    @property
    def relations(self) -> tuple[str, ...]:
        return self.elements[1::2]

    @property
    def hops(self) -> int:
        return len(self.elements) // 2

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "path_elements": list(self.elements),
            "text": self.text,
            "score": self.score,
        }


def extract_paths(graph: KnowledgeGraph, max_paths: int = DEFAULT_PATH_CAP) -> list[SemanticPath]:
    """All simple directed paths from the root with 1..depth hops.

    Paths come out in lexicographic order of their element ids, which is DFS
    preorder over sorted children; enumeration stops after ``max_paths``.
    """
    max_paths = check_positive_int(max_paths, "max_paths")
    adj = graph.out_edges()
    out: list[SemanticPath] = []

    def visit(elements: list[str], seen: set[str]) -> bool:
        if len(elements) // 2 >= graph.depth:
            return True
        for e in adj.get(elements[-1], ()):
            if e.end.id in seen:
                continue
            elements += [e.relation.id, e.end.id]
            out.append(SemanticPath(tuple(elements)))
            if len(out) >= max_paths:
                return False
            seen.add(e.end.id)
            keep_going = visit(elements, seen)
            seen.discard(e.end.id)
            del elements[-2:]
            if not keep_going:
                return False
        return True

    if not visit([graph.root.id], {graph.root.id}):
        logger.info("path enumeration for %s truncated at %d", graph.root.id, max_paths)
    return out


def _label(concept_id: str) -> str:
    try:
        return Concept.from_uri(concept_id).label
    except ValueError:
        return concept_id.replace("_", " ")


def render_path(path: SemanticPath, templates: Mapping[str, str] | None = None) -> str:
    """Verbalize a path, e.g. ``"dishwasher is located at kitchen, which is part of house"``."""
    if templates is None:
        templates = default_templates()
    templates = {relation_uri(k): v for k, v in templates.items()}
    text = _label(path.elements[0])
    for j, (rel, node) in enumerate(zip(path.relations, path.nodes[1:])):
        phrase = templates.get(relation_uri(rel))
        if phrase is None:
            raise TemplateError(f"no template for relation {rel}")
        text += (" " if j == 0 else ", which ") + f"{phrase} {_label(node)}"
    return " ".join(text.split())


def render_paths(paths: Iterable[SemanticPath], templates: Mapping[str, str] | None = None) -> list[SemanticPath]:
    return [replace(p, text=render_path(p, templates)) for p in paths]


class KnowledgeNet(TransformerMixin, BaseEstimator):
    """Map object names to their top-ranked, verbalized ConceptNet paths.

    ``fit`` takes a normalized :class:`AssertionStore`; ``transform`` takes an
    iterable of object names (or concepts) and returns, per object, the list
    of path texts kept by the domain filter.

    Parameters
    ----------
    depth : int, default=3
        Number of breadth-first expansion steps.
    threshold : float, default=0.7
        Edges need a normalized weight strictly above this value.
    max_paths : int, default=30
        Paths kept per object after ranking.
    path_cap : int, default=5000
        Bound on enumerated paths per graph.
    templates : mapping, optional
        Relation id to phrase; defaults to the shipped table.
    reference_sentences : list of str, optional
        In-domain sentences; defaults to the shipped kitchen set.
    encoder : EmbeddingBackend, optional
        Defaults to the offline hashing encoder.
    """

    def __init__(
        self,
        depth: int = DEFAULT_DEPTH,
        threshold: float = DEFAULT_THRESHOLD,
        max_paths: int = 30,
        path_cap: int = DEFAULT_PATH_CAP,
        templates: Mapping[str, str] | None = None,
        reference_sentences: Sequence[str] | None = None,
        encoder: EmbeddingBackend | None = None,
    ):
        self.depth = depth
        self.threshold = threshold
        self.max_paths = max_paths
        self.path_cap = path_cap
        self.templates = templates
        self.reference_sentences = reference_sentences
        self.encoder = encoder

    def fit(self, X: AssertionStore, y=None):
        if not isinstance(X, AssertionStore):
            raise TypeError(f"expected an AssertionStore, got {type(X).__name__}")
        if not X.is_normalized:
            raise StoreError("fit requires a store with normalized weights")
        check_positive_int(self.depth, "depth")
        check_probability(self.threshold, "threshold")
        check_positive_int(self.path_cap, "path_cap")
        self.store_ = X
        self.filter_ = DomainPathFilter(
            encoder=self.encoder,
            reference_sentences=self.reference_sentences,
            max_paths=self.max_paths,
        ).fit()
        return self

    def graph(self, root: Concept | str) -> KnowledgeGraph:
        check_is_fitted(self, "store_")
        return build_graph(self.store_, root, self.depth, self.threshold)

    def ranked_paths(self, root: Concept | str) -> list[SemanticPath]:
        """Scored paths of ``root`` that survive the domain filter, best first."""
        paths = render_paths(extract_paths(self.graph(root), self.path_cap), self.templates)
        return self.filter_.select(self.filter_.score(paths))

    def transform(self, X):
        check_is_fitted(self, "store_")
        return [[p.text for p in self.ranked_paths(root)] for root in X]
