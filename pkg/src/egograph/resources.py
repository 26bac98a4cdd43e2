"""Access to the data files shipped with the package."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path


def data_path(name: str) -> Path:
    return Path(str(resources.files("egograph") / "data" / name))


@lru_cache(maxsize=None)
def default_templates() -> dict[str, str]:
    return json.loads(data_path("templates.json").read_text(encoding="utf-8"))


def read_sentences(path: str | Path) -> list[str]:
    """Read one sentence per line, skipping blanks and ``#`` comments."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out


def default_reference_sentences() -> list[str]:
    return read_sentences(data_path("kitchen_sentences.txt"))


def scene_graph_schema_path() -> Path:
    return data_path("scene_graph.schema.json")
