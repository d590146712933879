"""Ontology-guided knowledge extraction: detect stale facts, extract with
patterns and an LLM, ground, corroborate, and ingest into a triple store."""

from .candidates import CandidateFact
from .corroborator import RuleScorer, ScoredFact, ScoringConfig, consolidate, corroborate, score, select
from .errors import OdkeError
from .ingestion import LinkDecision, WinningFact, ingest_batch, ingest_stream, link_entity, validate_schema
from .normalize import NormalizationConfig, normalize
from .ontology import Ontology, OntologySnippet, SnippetBuilder, render_snippet
from .pipeline import PipelineConfig, RunMetrics, run_batch, run_stream
from .store import EntityRef, KGStore, Provenance, Triple
from .values import ObjectValue

__version__ = "0.1.0"

__all__ = [
    "CandidateFact", "EntityRef", "KGStore", "LinkDecision", "NormalizationConfig", "ObjectValue",
    "OdkeError", "Ontology", "OntologySnippet", "PipelineConfig", "Provenance", "RuleScorer",
    "RunMetrics", "ScoredFact", "ScoringConfig", "SnippetBuilder", "Triple", "WinningFact",
    "consolidate", "corroborate", "ingest_batch", "ingest_stream", "link_entity", "normalize",
    "render_snippet", "run_batch", "run_stream", "score", "select", "validate_schema",
]
