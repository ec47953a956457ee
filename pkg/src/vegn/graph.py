"""Heterogeneous gene/variant graph.

Genes and variants are the two node classes. Three typed edge sets connect
them: ``HAS`` (gene -> variant), ``IN`` (variant -> gene) and ``INTERACT``
(gene <-> gene, undirected, optionally weighted).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import BoundsError, DuplicationError, ReferentialError, SchemaError

BENIGN = 0
PATHOGENIC = 1
UNLABELED = None


class EdgeType(enum.Enum):
    HAS = "has"
    IN = "in"
    INTERACT = "interact"


@dataclass(frozen=True)
class VariantRecord:
    variant_id: str
    chrom: str
    pos: int
    ref_allele: str
    alt_allele: str
    gene_id: str
    features: tuple
    label: Optional[int] = UNLABELED

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(float(f) for f in self.features))
        if self.label not in (BENIGN, PATHOGENIC, UNLABELED):
            raise SchemaError(f"variant {self.variant_id}: label must be 0, 1 or None, got {self.label!r}")


def _csr(src, dst, n_src):
    """Sorted, duplicate-free neighbor lists of ``src`` nodes as (indptr, indices)."""
    if len(src):
        pairs = np.unique(np.stack([src, dst], axis=1), axis=0)
        src, dst = pairs[:, 0], pairs[:, 1]
    counts = np.bincount(src, minlength=n_src) if len(src) else np.zeros(n_src, dtype=np.intp)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.intp)
    return indptr, np.asarray(dst, dtype=np.intp)


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    """Immutable gene/variant graph with per-edge-type adjacency.

    ``neighbors(i, t)`` returns the targets of type-``t`` edges leaving node
    ``i``: the variants of a gene for ``HAS``, the gene of a variant for
    ``IN``, and the interaction partners of a gene for ``INTERACT``.
    """

    gene_ids: tuple
    variant_ids: tuple
    variant_gene: np.ndarray
    variant_features: np.ndarray
    variant_labels: np.ndarray  # -1 marks unlabeled
    gene_edges: np.ndarray  # (E, 2) with a < b
    gene_edge_weights: np.ndarray
    variant_meta: tuple = ()
    _adjacency: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for arr in (self.variant_gene, self.variant_features, self.variant_labels,
                    self.gene_edges, self.gene_edge_weights):
            arr.setflags(write=False)
        adj = {
            EdgeType.HAS: _csr(self.variant_gene, np.arange(self.variant_count), self.gene_count),
            EdgeType.IN: _csr(np.arange(self.variant_count), self.variant_gene, self.variant_count),
        }
        a, b = self.gene_edges[:, 0], self.gene_edges[:, 1]
        adj[EdgeType.INTERACT] = _csr(np.concatenate([a, b]), np.concatenate([b, a]), self.gene_count)
        self._adjacency.update(adj)

    @property
    def gene_count(self):
        return len(self.gene_ids)

    @property
    def variant_count(self):
        return len(self.variant_ids)

    @property
    def feature_dim(self):
        return self.variant_features.shape[1]

    def gene_index(self):
        return {g: i for i, g in enumerate(self.gene_ids)}

    def variant_index(self):
        return {v: i for i, v in enumerate(self.variant_ids)}

    def neighbors(self, node, edge_type):
        return neighbors(self, node, edge_type)

    def edges(self, edge_type):
        """Directed edge list ``(src, dst)`` for message passing along ``edge_type``."""
        indptr, indices = self._adjacency[edge_type]
        src = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
        return src, indices

    def interact_weights(self):
        """Weights aligned with ``edges(EdgeType.INTERACT)``."""
        src, dst = self.edges(EdgeType.INTERACT)
        lookup = {}
        for (a, b), w in zip(self.gene_edges.tolist(), self.gene_edge_weights.tolist()):
            lookup[(a, b)] = w
        return np.array([lookup[(min(s, d), max(s, d))] for s, d in zip(src.tolist(), dst.tolist())])

    def degree(self, node, edge_type):
        indptr, _ = self._adjacency[edge_type]
        return int(indptr[node + 1] - indptr[node])

    def labels_or(self, unlabeled_as):
        """Labels as floats with unlabeled rows replaced by ``unlabeled_as``."""
        y = self.variant_labels.astype(np.float64)
        y[self.variant_labels < 0] = unlabeled_as
        return y

    def records(self):
        out = []
        for i, vid in enumerate(self.variant_ids):
            meta = self.variant_meta[i] if self.variant_meta else ("", 0, "", "")
            lab = int(self.variant_labels[i])
            out.append(VariantRecord(vid, meta[0], meta[1], meta[2], meta[3],
                                     self.gene_ids[self.variant_gene[i]],
                                     tuple(self.variant_features[i]), None if lab < 0 else lab))
        return out

    def __eq__(self, other):
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        if self.gene_ids != other.gene_ids or self.variant_ids != other.variant_ids:
            return False
        pairs = [
            (self.variant_gene, other.variant_gene),
            (self.variant_features, other.variant_features),
            (self.variant_labels, other.variant_labels),
            (self.gene_edges, other.gene_edges),
            (self.gene_edge_weights, other.gene_edge_weights),
        ]
        if not all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs):
            return False
        return all(
            np.array_equal(self._adjacency[t][k], other._adjacency[t][k])
            for t in EdgeType for k in (0, 1)
        )

    __hash__ = None

    def to_dict(self):
        return {
            "gene_ids": list(self.gene_ids),
            "variant_ids": list(self.variant_ids),
            "variant_gene": self.variant_gene.tolist(),
            "variant_features": self.variant_features.tolist(),
            "feature_dim": self.feature_dim,
            "variant_labels": self.variant_labels.tolist(),
            "gene_edges": self.gene_edges.tolist(),
            "gene_edge_weights": self.gene_edge_weights.tolist(),
            "variant_meta": [list(m) for m in self.variant_meta],
        }

    @classmethod
    def from_dict(cls, d, variant_features=None, gene_edge_weights=None):
        n_v = len(d["variant_ids"])
        feats = variant_features
        if feats is None:
            feats = np.asarray(d["variant_features"], dtype=np.float64).reshape(n_v, d.get("feature_dim", -1))
        weights = gene_edge_weights
        if weights is None:
            weights = np.asarray(d["gene_edge_weights"], dtype=np.float64)
        return cls(
            gene_ids=tuple(d["gene_ids"]),
            variant_ids=tuple(d["variant_ids"]),
            variant_gene=np.asarray(d["variant_gene"], dtype=np.intp),
            variant_features=np.array(feats, dtype=np.float64),
            variant_labels=np.asarray(d["variant_labels"], dtype=np.int8),
            gene_edges=np.asarray(d["gene_edges"], dtype=np.intp).reshape(-1, 2),
            gene_edge_weights=np.array(weights, dtype=np.float64),
            variant_meta=tuple(tuple(m) for m in d.get("variant_meta", [])),
        )


def _variant_arrays(variants, gene_index, feature_dim, seen, row_offset=0):
    vgene, feats, labels, meta = [], [], [], []
    for row, rec in enumerate(variants, start=row_offset):
        if rec.variant_id in seen:
            raise DuplicationError(f"duplicate variant_id {rec.variant_id!r} (row {row})")
        seen.add(rec.variant_id)
        try:
            vgene.append(gene_index[rec.gene_id])
        except KeyError:
            raise ReferentialError(
                f"unknown gene id {rec.gene_id!r} for variant {rec.variant_id!r} (row {row})"
            ) from None
        if feature_dim is not None and len(rec.features) != feature_dim:
            raise SchemaError(
                f"variant {rec.variant_id!r} (row {row}) has {len(rec.features)} features, expected {feature_dim}"
            )
        feature_dim = len(rec.features)
        feats.append(rec.features)
        labels.append(-1 if rec.label is None else rec.label)
        meta.append((rec.chrom, int(rec.pos), rec.ref_allele, rec.alt_allele))
    return vgene, feats, labels, meta, feature_dim


def build_graph(variants: Sequence[VariantRecord], gene_edges: Iterable, gene_vocabulary: Sequence[str]):
    """Assemble a :class:`HeteroGraph` from variant rows and a gene edge list.

    ``gene_edges`` holds ``(gene_a, gene_b)`` or ``(gene_a, gene_b, weight)``
    tuples. Interactions are undirected: reversed duplicates collapse onto
    the first occurrence. Self-loops are dropped.
    """
    vocab = tuple(gene_vocabulary)
    gene_index = {}
    for i, g in enumerate(vocab):
        if g in gene_index:
            raise DuplicationError(f"duplicate gene id {g!r} in vocabulary")
        gene_index[g] = i

    vgene, feats, labels, meta, fdim = _variant_arrays(variants, gene_index, None, set())

    edges, weights, seen = [], [], set()
    for row, e in enumerate(gene_edges):
        a, b = e[0], e[1]
        w = float(e[2]) if len(e) > 2 else 1.0
        for g in (a, b):
            if g not in gene_index:
                raise ReferentialError(f"unknown gene id {g!r} in gene edge row {row}")
        if w < 0:
            raise SchemaError(f"negative edge weight {w} in gene edge row {row}")
        i, j = gene_index[a], gene_index[b]
        if i == j:
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        edges.append(key)
        weights.append(w)

    order = sorted(range(len(edges)), key=edges.__getitem__)
    return HeteroGraph(
        gene_ids=vocab,
        variant_ids=tuple(r.variant_id for r in variants),
        variant_gene=np.asarray(vgene, dtype=np.intp),
        variant_features=np.asarray(feats, dtype=np.float64).reshape(len(vgene), fdim or 0),
        variant_labels=np.asarray(labels, dtype=np.int8),
        gene_edges=np.asarray([edges[k] for k in order], dtype=np.intp).reshape(-1, 2),
        gene_edge_weights=np.asarray([weights[k] for k in order], dtype=np.float64),
        variant_meta=tuple(meta),
    )


def attach_variants(graph: HeteroGraph, new_variants: Sequence[VariantRecord]):
    """Return a new graph with ``new_variants`` added; ``graph`` is untouched."""
    new_variants = list(new_variants)
    if not new_variants:
        return graph
    fdim = graph.feature_dim if graph.variant_count else None
    vgene, feats, labels, meta, fdim = _variant_arrays(
        new_variants, graph.gene_index(), fdim, set(graph.variant_ids), row_offset=graph.variant_count
    )
    old_feats = graph.variant_features.reshape(graph.variant_count, fdim)
    return HeteroGraph(
        gene_ids=graph.gene_ids,
        variant_ids=graph.variant_ids + tuple(r.variant_id for r in new_variants),
        variant_gene=np.concatenate([graph.variant_gene, np.asarray(vgene, dtype=np.intp)]),
        variant_features=np.concatenate([old_feats, np.asarray(feats, dtype=np.float64)]),
        variant_labels=np.concatenate([graph.variant_labels, np.asarray(labels, dtype=np.int8)]),
        gene_edges=graph.gene_edges.copy(),
        gene_edge_weights=graph.gene_edge_weights.copy(),
        variant_meta=(graph.variant_meta or tuple(("", 0, "", "") for _ in graph.variant_ids)) + tuple(meta),
    )


def neighbors(graph: HeteroGraph, node: int, edge_type: EdgeType):
    """Sorted, duplicate-free targets of ``edge_type`` edges leaving ``node``."""
    indptr, indices = graph._adjacency[edge_type]
    n = len(indptr) - 1
    if not 0 <= node < n:
        kind = "variant" if edge_type is EdgeType.IN else "gene"
        raise BoundsError(f"{kind} index {node} out of range [0, {n}) for {edge_type.name}")
    return indices[indptr[node]:indptr[node + 1]].tolist()
