"""ConceptNet assertion store: dump ingestion, neighbor index and weight normalization.

Typical usage::

    with open_dump("conceptnet-assertions-5.7.0.csv.gz") as fh:
        store = load_assertions(fh, language="en")
    qt = fit_quantile_transform(store)
    store = normalize_weights(store, qt)
    store.neighbors("/c/en/dishwasher")
"""

from __future__ import annotations

import dataclasses
import gzip
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from egograph._validation import as_weight_vector, check_positive_int

logger = logging.getLogger(__name__)

CONCEPT_PREFIX = "/c/"
RELATION_PREFIX = "/r/"

DEFAULT_RELATIONS = (
    "UsedFor",
    "PartOf",
    "HasProperty",
    "AtLocation",
    "CapableOf",
    "MadeOf",
    "HasA",
    "IsA",
    "Causes",
    "ReceivesAction",
    "SimilarTo",
    "Synonym",
)
DEFAULT_SYMMETRIC = frozenset({"/r/SimilarTo", "/r/Synonym"})

STORE_FORMAT = "egograph-assertion-store"
STORE_VERSION = 1


class StoreError(Exception):
    """Raised for invalid store operations (empty fits, bad store files)."""


def relation_uri(name: str) -> str:
    name = name.strip()
    return name if name.startswith(RELATION_PREFIX) else RELATION_PREFIX + name


@dataclass(frozen=True, order=True)
class Concept:
    id: str
    label: str
    language: str

    @classmethod
    def from_uri(cls, uri: str) -> Concept:
        """Canonicalize a concept URI, dropping part-of-speech/sense suffixes.

        ``/c/en/dishwasher/n/wn/artifact`` becomes ``/c/en/dishwasher``.
        """
        parts = uri.strip().split("/")
        # ['', 'c', lang, term, ...]
        if len(parts) < 4 or parts[0] != "" or parts[1] != "c" or not parts[2] or not parts[3]:
            raise ValueError(f"not a concept URI: {uri!r}")
        lang, term = parts[2], parts[3]
        return cls(id=f"/c/{lang}/{term}", label=term.replace("_", " "), language=lang)

    @classmethod
    def from_text(cls, text: str, language: str = "en") -> Concept:
        """Concept for a free-text object name, e.g. ``"Cutting Board"``."""
        if text.startswith(CONCEPT_PREFIX):
            return cls.from_uri(text)
        term = "_".join(text.strip().lower().split())
        if not term:
            raise ValueError("empty concept text")
        return cls.from_uri(f"/c/{language}/{term}")


@dataclass(frozen=True, order=True)
class RelationId:
    id: str
    symmetric: bool = False

    @property
    def name(self) -> str:
        return self.id[len(RELATION_PREFIX):]


@dataclass(frozen=True)
class Assertion:
    start: Concept
    relation: RelationId
    end: Concept
    raw_weight: float
    norm_weight: float | None = None

    def __post_init__(self):
        if self.start.id == self.end.id:
            raise ValueError(f"self-loop assertion on {self.start.id}")
        if self.raw_weight < 0:
            raise ValueError(f"negative weight {self.raw_weight}")
        if self.norm_weight is not None and not 0.0 <= self.norm_weight <= 1.0:
            raise ValueError(f"normalized weight {self.norm_weight} outside [0, 1]")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.start.id, self.relation.id, self.end.id)


def make_relations(
    names: Iterable[str] = DEFAULT_RELATIONS,
    symmetric: Iterable[str] = DEFAULT_SYMMETRIC,
) -> dict[str, RelationId]:
    sym = {relation_uri(s) for s in symmetric}
    out = {}
    for name in names:
        uri = relation_uri(name)
        out[uri] = RelationId(uri, uri in sym)
    return out


def read_relations_file(path: str | Path) -> dict[str, RelationId]:
    """Read a relation whitelist.

    One relation per line (``UsedFor`` or ``/r/UsedFor``); a trailing
    ``symmetric`` token marks the relation symmetric. ``#`` starts a comment.
    If no line carries the marker, SimilarTo and Synonym are symmetric.
    """
    names, sym = [], set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        names.append(tokens[0])
        if len(tokens) > 1 and tokens[1].lower() == "symmetric":
            sym.add(relation_uri(tokens[0]))
    if not sym:
        sym = set(DEFAULT_SYMMETRIC)
    return make_relations(names, sym)


@dataclass(frozen=True)
class AssertionStore:
    """Indexed, whitelisted ConceptNet assertions.

    Immutable once built; :func:`normalize_weights` returns a new store.
    """

    assertions: tuple[Assertion, ...]
    relations: Mapping[str, RelationId]
    language: str = "en"
    quantile_transform: QuantileTransform | None = None
    skipped: int = 0
    by_start: Mapping[str, tuple[int, ...]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.by_start is None:
            index: dict[str, list[int]] = {}
            for i, a in enumerate(self.assertions):
                index.setdefault(a.start.id, []).append(i)
            # deterministic neighbor order: relation id, then end id
            frozen = {
                k: tuple(sorted(v, key=lambda i: (self.assertions[i].relation.id, self.assertions[i].end.id)))
                for k, v in index.items()
            }
            object.__setattr__(self, "by_start", frozen)

    def __len__(self) -> int:
        return len(self.assertions)

    @property
    def is_normalized(self) -> bool:
        return all(a.norm_weight is not None for a in self.assertions)

    def concepts(self) -> list[str]:
        return sorted(self.by_start)

    def neighbors(self, concept: Concept | str, exclude_symmetric: bool = False) -> list[Assertion]:
        """Outgoing assertions of ``concept``, ordered by relation id then end id."""
        cid = concept.id if isinstance(concept, Concept) else concept
        out = []
        for i in self.by_start.get(cid, ()):
            a = self.assertions[i]
            if a.relation.id not in self.relations:
                continue
            if exclude_symmetric and a.relation.symmetric:
                continue
            out.append(a)
        return out

    # -- serialization -------------------------------------------------

    def dumps(self) -> str:
        """Line-delimited JSON: one header line, then one assertion per line."""
        header = {
            "format": STORE_FORMAT,
            "version": STORE_VERSION,
            "language": self.language,
            "relations": [
                {"id": r.id, "symmetric": r.symmetric} for r in sorted(self.relations.values())
            ],
            "skipped": self.skipped,
            "quantile_transform": (
                None if self.quantile_transform is None else self.quantile_transform.to_dict()
            ),
        }
        lines = [json.dumps(header, sort_keys=True)]
        for a in sorted(self.assertions, key=lambda a: a.key):
            lines.append(
                json.dumps(
                    [a.start.id, a.relation.id, a.end.id, a.raw_weight, a.norm_weight],
                    separators=(",", ":"),
                )
            )
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> AssertionStore:
        lines = text.splitlines()
        if not lines:
            raise StoreError("empty store file")
        header = json.loads(lines[0])
        if header.get("format") != STORE_FORMAT:
            raise StoreError(f"not a store file (format={header.get('format')!r})")
        if header.get("version") != STORE_VERSION:
            raise StoreError(f"unsupported store version {header.get('version')!r}")
        relations = {r["id"]: RelationId(r["id"], r["symmetric"]) for r in header["relations"]}
        qt = header.get("quantile_transform")
        assertions = []
        for line in lines[1:]:
            if not line.strip():
                continue
            s, r, e, w, nw = json.loads(line)
            assertions.append(
                Assertion(Concept.from_uri(s), relations[r], Concept.from_uri(e), w, nw)
            )
        return cls(
            assertions=tuple(assertions),
            relations=relations,
            language=header["language"],
            quantile_transform=None if qt is None else QuantileTransform.from_dict(qt),
            skipped=header.get("skipped", 0),
        )

    @classmethod
    def load(cls, path: str | Path) -> AssertionStore:
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def open_dump(path: str | Path) -> IO[str]:
    """Open a dump file as text, transparently decompressing gzip."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def _parse_row(line: str) -> tuple[str, str, str, float]:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 5:
        raise ValueError(f"expected 5 fields, got {len(fields)}")
    _, rel, start, end, meta = fields
    weight = json.loads(meta)["weight"]
    if isinstance(weight, bool) or not isinstance(weight, (int, float)):
        raise ValueError("non-numeric weight")
    return rel, start, end, float(weight)


def load_assertions(
    source: Iterable[str],
    language: str = "en",
    relations: Mapping[str, RelationId] | Iterable[str] | None = None,
) -> AssertionStore:
    """Build a store from the 5-column tab-separated ConceptNet dump.

    Rows outside ``language`` (on either end) or with a relation missing from
    the whitelist are filtered out silently. Malformed rows and self-loops
    are counted in ``store.skipped``. Duplicate (start, relation, end)
    triples keep the last row.
    """
    if relations is None:
        relations = make_relations()
    elif not isinstance(relations, Mapping):
        relations = make_relations(relations)

    kept: dict[tuple[str, str, str], Assertion] = {}
    skipped = 0
    for lineno, line in enumerate(source, 1):
        if not line.strip():
            continue
        try:
            rel, start_uri, end_uri, weight = _parse_row(line)
        except (ValueError, KeyError, TypeError) as exc:
            skipped += 1
            logger.debug("skipping malformed row %d: %s", lineno, exc)
            continue
        rel_uri = relation_uri(rel)
        if rel_uri not in relations:
            continue
        try:
            start = Concept.from_uri(start_uri)
            end = Concept.from_uri(end_uri)
        except ValueError:
            skipped += 1
            continue
        if start.language != language or end.language != language:
            continue
        try:
            a = Assertion(start, relations[rel_uri], end, weight)
        except ValueError as exc:
            skipped += 1
            logger.debug("skipping row %d: %s", lineno, exc)
            continue
        kept[a.key] = a

    if not kept:
        logger.warning("assertion store is empty (language=%s, %d malformed rows)", language, skipped)
    return AssertionStore(
        assertions=tuple(kept[k] for k in sorted(kept)),
        relations=dict(relations),
        language=language,
        skipped=skipped,
    )


# -- quantile normalization ------------------------------------------------


def _reference_from_weights(weights: np.ndarray, n_quantiles: int) -> np.ndarray:
    ordered = np.sort(weights)
    if ordered.size <= n_quantiles:
        return ordered
    # subsample evenly spaced order statistics, keeping both extremes
    idx = np.round(np.linspace(0, ordered.size - 1, n_quantiles)).astype(int)
    return ordered[idx]


def _cdf(reference: np.ndarray, values: np.ndarray) -> np.ndarray:
    n = reference.size
    if n == 1:
        return np.zeros_like(values, dtype=float)
    uniq, first = np.unique(reference, return_index=True)
    # tied values take the lowest rank of their block
    positions = first / (n - 1)
    if uniq.size == 1:
        return np.zeros_like(values, dtype=float)
    return np.clip(np.interp(values, uniq, positions), 0.0, 1.0)


@dataclass(frozen=True)
class QuantileTransform:
    """Fitted empirical CDF over raw assertion weights.

    ``transform(x)`` is the (rank - 1) / (n - 1) position of ``x`` among the
    reference weights, linearly interpolated between distinct reference
    values and clamped to [0, 1] outside the reference range.
    """

    sorted_reference: tuple[float, ...]
    n_quantiles: int

    def __post_init__(self):
        if not self.sorted_reference:
            raise StoreError("quantile transform needs at least one reference weight")
        if any(b < a for a, b in zip(self.sorted_reference, self.sorted_reference[1:])):
            raise StoreError("reference weights must be nondecreasing")

    def __call__(self, raw_weight: float) -> float:
        return float(_cdf(np.asarray(self.sorted_reference), np.asarray([raw_weight]))[0])

    def transform(self, raw_weights) -> np.ndarray:
        return _cdf(np.asarray(self.sorted_reference), np.asarray(raw_weights, dtype=float))

    def to_dict(self) -> dict:
        return {"n_quantiles": self.n_quantiles, "sorted_reference": list(self.sorted_reference)}

    @classmethod
    def from_dict(cls, d: Mapping) -> QuantileTransform:
        return cls(tuple(float(x) for x in d["sorted_reference"]), int(d["n_quantiles"]))


class QuantileWeightTransformer(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around :class:`QuantileTransform`.

    Parameters
    ----------
    n_quantiles : int, default=1000
        Maximum number of reference order statistics kept after fitting.

    Attributes
    ----------
    quantile_transform_ : QuantileTransform
    n_samples_seen_ : int
    """

    def __init__(self, n_quantiles: int = 1000):
        self.n_quantiles = n_quantiles

    def fit(self, X, y=None):
        check_positive_int(self.n_quantiles, "n_quantiles")
        w = as_weight_vector(X)
        if w.size == 0:
            raise StoreError("cannot fit a quantile transform on zero weights")
        ref = _reference_from_weights(w, self.n_quantiles)
        self.quantile_transform_ = QuantileTransform(tuple(float(x) for x in ref), self.n_quantiles)
        self.n_samples_seen_ = int(w.size)
        return self

    def transform(self, X):
        check_is_fitted(self, "quantile_transform_")
        w = as_weight_vector(X, allow_empty=True)
        out = self.quantile_transform_.transform(w)
        return out.reshape(-1, 1) if np.ndim(X) == 2 else out


def fit_quantile_transform(store: AssertionStore, n_quantiles: int = 1000) -> QuantileTransform:
    """Fit the weight normalizer on every raw weight in ``store``."""
    if len(store) == 0:
        raise StoreError("cannot fit a quantile transform on an empty store")
    weights = [a.raw_weight for a in store.assertions]
    return QuantileWeightTransformer(n_quantiles).fit(weights).quantile_transform_


def normalize_weights(store: AssertionStore, qt: QuantileTransform) -> AssertionStore:
    """Return a copy of ``store`` with ``norm_weight = qt(raw_weight)`` everywhere."""
    if len(store) == 0:
        return dataclasses.replace(store, quantile_transform=qt, by_start=store.by_start)
    norm = qt.transform([a.raw_weight for a in store.assertions])
    assertions = tuple(
        dataclasses.replace(a, norm_weight=float(w)) for a, w in zip(store.assertions, norm)
    )
    return dataclasses.replace(
        store, assertions=assertions, quantile_transform=qt, by_start=store.by_start
    )


def iter_dump_lines(path: str | Path) -> Iterator[str]:
    with open_dump(path) as fh:
        yield from fh


def build_store(
    dump: str | Path,
    language: str = "en",
    relations: Mapping[str, RelationId] | Sequence[str] | None = None,
    n_quantiles: int = 1000,
) -> AssertionStore:
    """Ingest, fit and normalize in one step."""
    store = load_assertions(iter_dump_lines(dump), language=language, relations=relations)
    if len(store) == 0:
        return store
    return normalize_weights(store, fit_quantile_transform(store, n_quantiles))
