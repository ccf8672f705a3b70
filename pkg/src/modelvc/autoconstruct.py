"""Build a lineage graph from unannotated models.

Each new model is scored against every model already placed. The parent is
the one with the smallest contextual divergence, ties broken by structural
divergence and then by name. A model is placed as a root when both scores of
the best candidate are at or above ``tau``. Only provenance edges are
inferred; version edges need a human.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .diff import CONTEXTUAL, STRUCTURAL, DivergenceScore, default_key_of, divergence, index_model
from .lineage import LineageGraph
from .model import ModelGraph, serialize_model

DEFAULT_TAU = 0.9


@dataclass
class Placement:
    name: str
    parent: str | None
    scores: dict = field(default_factory=dict)     # existing node -> DivergenceScore

    @property
    def is_root(self):
        return self.parent is None

    @property
    def best(self) -> DivergenceScore | None:
        return self.scores.get(self.parent) if self.parent else None


class IndexCache:
    """Structural and contextual diff indexes per node, built once."""

    def __init__(self, key_of=default_key_of):
        self.key_of = key_of
        self._indexes: dict = {}

    def get(self, name, model: ModelGraph):
        if name not in self._indexes:
            self._indexes[name] = (index_model(model, STRUCTURAL, self.key_of),
                                   index_model(model, CONTEXTUAL, self.key_of))
        return self._indexes[name]

    def drop(self, name):
        self._indexes.pop(name, None)


def choose_parent(scores: dict, tau: float = DEFAULT_TAU):
    """Apply the placement rule to ``{name: DivergenceScore}``."""
    if not scores:
        return None
    best = min(scores, key=lambda n: (scores[n].d_contextual, scores[n].d_structural, n))
    s = scores[best]
    if s.d_contextual >= tau and s.d_structural >= tau:
        return None
    return best


def score_against(name, model, existing: dict, cache: IndexCache) -> dict:
    """Divergence of ``model`` against every ``{node: ModelGraph}`` entry."""
    mine = cache.get(name, model)
    return {other: divergence(None, None, indexes=(mine, cache.get(other, m)))
            for other, m in existing.items()}


def auto_insert(pool_model: ModelGraph, graph: LineageGraph, models: dict, tau: float = DEFAULT_TAU,
                name=None, cache: IndexCache | None = None) -> Placement:
    """Place ``pool_model`` into ``graph``; ``models`` maps the graph's node
    names to their ModelGraphs and gains the new entry."""
    cache = cache or IndexCache()
    name = name or pool_model.model_name
    scores = score_against(name, pool_model, {n: models[n] for n in graph.nodes}, cache)
    parent = choose_parent(scores, tau)
    manifest, _ = serialize_model(pool_model)
    graph.new_node(name, pool_model.model_type, hashlib.sha256(manifest).hexdigest())
    if parent is not None:
        graph.add_edge(parent, name)
    models[name] = pool_model
    return Placement(name, parent, scores)


def auto_construct(pool, tau: float = DEFAULT_TAU, key_of=default_key_of):
    """Insert the pool in the given order; returns ``(graph, placements)``.

    Pool items are ModelGraphs (named by ``model_name``) or
    ``(name, ModelGraph)`` pairs.
    """
    graph = LineageGraph()
    models: dict = {}
    cache = IndexCache(key_of)
    placements = []
    for item in pool:
        name, model = item if isinstance(item, tuple) else (item.model_name, item)
        placements.append(auto_insert(model, graph, models, tau, name, cache))
    return graph, placements


def auto_add(repo, model: ModelGraph, name=None, tau: float = DEFAULT_TAU,
             cache: IndexCache | None = None) -> Placement:
    """Repository variant: score against every stored node, then add."""
    name = name or model.model_name
    cache = cache or IndexCache(lambda ref: ref.content_key() or repo.resolve(ref).content_key())
    existing = {n: repo.load_model(n) for n in repo.node_names() if not repo.node(n).pending}
    scores = score_against(name, model, existing, cache)
    parent = choose_parent(scores, tau)
    repo.add_node(model, name, parents=[parent] if parent else [])
    return Placement(name, parent, scores)
