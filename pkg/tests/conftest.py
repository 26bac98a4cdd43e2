from __future__ import annotations

import sys
from pathlib import Path

import pytest

from egograph.conceptnet import Assertion, AssertionStore, Concept, make_relations, relation_uri

TESTS = Path(__file__).parent
DATA = TESTS / "data"
sys.path.insert(0, str(TESTS))

ALL_RELATIONS = make_relations(
    ["UsedFor", "PartOf", "HasProperty", "AtLocation", "CapableOf", "MadeOf", "HasA", "IsA",
     "Causes", "ReceivesAction", "SimilarTo", "Synonym"]
)


def store_from_triples(triples) -> AssertionStore:
    """Store whose normalized weights are given directly: (start, rel, end, w)."""
    assertions = []
    for a, r, b, w in triples:
        start = Concept.from_uri(a if a.startswith("/c/") else f"/c/en/{a}")
        end = Concept.from_uri(b if b.startswith("/c/") else f"/c/en/{b}")
        assertions.append(Assertion(start, ALL_RELATIONS[relation_uri(r)], end, w, w))
    return AssertionStore(tuple(assertions), ALL_RELATIONS)


@pytest.fixture
def data_dir() -> Path:
    return DATA


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
