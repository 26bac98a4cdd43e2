"""Commonsense knowledge graphs and video scene graphs for multiple-choice egocentric VQA."""

from egograph.conceptnet import (
    Assertion,
    AssertionStore,
    Concept,
    QuantileTransform,
    QuantileWeightTransformer,
    RelationId,
    build_store,
    fit_quantile_transform,
    load_assertions,
    normalize_weights,
)
from egograph.domain import DomainPathFilter, HashingEncoder, filter_paths, score_paths
from egograph.knowledge_net import KnowledgeGraph, KnowledgeNet, SemanticPath, build_graph, extract_paths, render_path
from egograph.pipeline import EnsembleSelector, InferenceConfig, Mode, QuestionRecord, select_ensemble
from egograph.scene_net import SceneGraphBundle, SceneGraphDocument, parse_scene_graph, validate_scene_graph

__version__ = "0.1.0"

__all__ = [
    "Assertion",
    "AssertionStore",
    "Concept",
    "DomainPathFilter",
    "EnsembleSelector",
    "HashingEncoder",
    "InferenceConfig",
    "KnowledgeGraph",
    "KnowledgeNet",
    "Mode",
    "QuantileTransform",
    "QuantileWeightTransformer",
    "QuestionRecord",
    "RelationId",
    "SceneGraphBundle",
    "SceneGraphDocument",
    "SemanticPath",
    "build_graph",
    "build_store",
    "extract_paths",
    "filter_paths",
    "fit_quantile_transform",
    "load_assertions",
    "normalize_weights",
    "parse_scene_graph",
    "render_path",
    "score_paths",
    "select_ensemble",
    "validate_scene_graph",
]
