"""scikit-learn compatible wrapper around graph construction, training and prediction."""

from __future__ import annotations

from os import PathLike

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import io
from .errors import ContractError, SchemaError
from .graph import VariantRecord, attach_variants, build_graph
from .metrics import auroc
from .trainer import TrainConfig, train


def check_variants(X, feature_dim=None):
    """Coerce ``X`` to a list of :class:`VariantRecord`.

    ``X`` may be a sequence of records or a path to a variant TSV.
    """
    if isinstance(X, (str, PathLike)):
        X = io.parse_variant_tsv(X)
    records = list(X)
    for r in records:
        if not isinstance(r, VariantRecord):
            raise ContractError(f"expected VariantRecord rows, got {type(r).__name__}")
    if feature_dim is not None:
        for r in records:
            if len(r.features) != feature_dim:
                raise SchemaError(
                    f"variant {r.variant_id!r} has {len(r.features)} features, model was fitted on {feature_dim}")
    return records


def _with_labels(records, y):
    if y is None:
        return records
    y = list(y)
    if len(y) != len(records):
        raise ContractError(f"{len(y)} labels for {len(records)} variants")
    out = []
    for r, lab in zip(records, y):
        lab = None if lab is None or (isinstance(lab, float) and np.isnan(lab)) else int(lab)
        out.append(VariantRecord(r.variant_id, r.chrom, r.pos, r.ref_allele, r.alt_allele,
                                 r.gene_id, r.features, lab))
    return out


class VEGNClassifier(ClassifierMixin, BaseEstimator):
    """Variant pathogenicity classifier over a gene/variant graph.

    Parameters
    ----------
    genes : sequence of str, optional
        Ordered gene vocabulary. Defaults to the sorted gene ids seen in
        ``fit`` and ``gene_edges``.
    gene_edges : sequence of tuple, optional
        ``(gene_a, gene_b[, weight])`` interactions used in ``given`` mode.
    mode : {"given", "learnt"}
        Attention over the given gene graph, or FAVOR+ attention over all genes.
    random_state : int
        Seed for initialization, the train/eval split, shuffling and dropout.

    Notes
    -----
    Training is transductive: every variant passed to ``fit`` is a graph node
    even though only the training split contributes to the loss. Variants
    passed to ``predict_proba`` that are not yet in the graph are attached to
    their gene first.
    """

    def __init__(self, genes=None, gene_edges=None, mode="given", epochs=50, batch_size=20480,
                 lr=0.01, plateau_patience=2, plateau_factor=0.1, dropout=0.2, eval_fraction=0.2,
                 gene_dim=32, variant_dim=None, heads=2, rounds=1, random_features=256,
                 use_edge_weights=False, learnt_uses_given_edges=False, random_state=0):
        self.genes = genes
        self.gene_edges = gene_edges
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.dropout = dropout
        self.eval_fraction = eval_fraction
        self.gene_dim = gene_dim
        self.variant_dim = variant_dim
        self.heads = heads
        self.rounds = rounds
        self.random_features = random_features
        self.use_edge_weights = use_edge_weights
        self.learnt_uses_given_edges = learnt_uses_given_edges
        self.random_state = random_state

    def _train_config(self):
        model = {
            "gene_dim": self.gene_dim,
            "variant_dim": self.variant_dim,
            "heads": self.heads,
            "rounds": self.rounds,
            "random_features": self.random_features,
            "use_edge_weights": self.use_edge_weights,
            "learnt_uses_given_edges": self.learnt_uses_given_edges,
        }
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, initial_lr=self.lr,
            plateau_patience_epochs=self.plateau_patience, plateau_factor=self.plateau_factor,
            dropout=self.dropout, seed=int(self.random_state), mode=self.mode,
            eval_fraction=self.eval_fraction, model=model,
        )

    def fit(self, X, y=None):
        records = _with_labels(check_variants(X), y)
        if not records:
            raise ContractError("fit needs at least one variant")
        edges = list(self.gene_edges or [])
        genes = self.genes
        if genes is None:
            genes = sorted({r.gene_id for r in records} | {e[0] for e in edges} | {e[1] for e in edges})
        config = self._train_config()
        self.graph_ = build_graph(records, edges, genes)
        self.model_, self.reports_ = train(self.graph_, records, config)
        self.train_config_ = config
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = self.graph_.feature_dim
        return self

    def _graph_for(self, records):
        known = self.graph_.variant_index()
        new = [r for r in records if r.variant_id not in known]
        graph = attach_variants(self.graph_, new)
        index = graph.variant_index()
        return graph, np.array([index[r.variant_id] for r in records], dtype=np.intp)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        records = check_variants(X, self.n_features_in_)
        graph, rows = self._graph_for(records)
        p = self.model_.predict(graph)[rows]
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def score(self, X, y=None, sample_weight=None):
        """auROC of the predicted probabilities (labels from ``y`` or the records)."""
        records = check_variants(X)
        if y is None:
            y = [r.label for r in records]
        keep = [i for i, lab in enumerate(y) if lab is not None]
        p = self.predict_proba(records)[:, 1]
        return auroc(p[keep], np.asarray([y[i] for i in keep], dtype=int))

    def save(self, path):
        check_is_fitted(self, "model_")
        return io.save_checkpoint(self.model_, path, train_config=self.train_config_, graph=self.graph_)

    @classmethod
    def load(cls, path):
        ckpt = io.load_checkpoint(path)
        tc = TrainConfig.from_dict(ckpt.train_config) if ckpt.train_config else TrainConfig(
            mode=ckpt.model_config["mode"])
        mc = ckpt.model_config
        est = cls(
            genes=list(ckpt.gene_vocabulary), mode=mc["mode"], epochs=tc.epochs, batch_size=tc.batch_size,
            lr=tc.initial_lr, plateau_patience=tc.plateau_patience_epochs, plateau_factor=tc.plateau_factor,
            dropout=mc["dropout"], eval_fraction=tc.eval_fraction, gene_dim=mc["gene_dim"],
            variant_dim=mc["variant_dim"], heads=mc["heads"], rounds=mc["rounds"],
            random_features=mc["random_features"], use_edge_weights=mc["use_edge_weights"],
            learnt_uses_given_edges=mc["learnt_uses_given_edges"], random_state=mc["seed"],
        )
        est.model_ = ckpt.to_model()
        est.train_config_ = tc
        est.reports_ = []
        est.classes_ = np.array([0, 1])
        if ckpt.graph is None:
            raise SchemaError(f"{path}: checkpoint carries no graph; cannot predict")
        est.graph_ = ckpt.graph
        est.gene_edges = [(est.graph_.gene_ids[a], est.graph_.gene_ids[b], w) for (a, b), w in
                          zip(est.graph_.gene_edges.tolist(), est.graph_.gene_edge_weights.tolist())]
        est.n_features_in_ = mc["feature_dim"]
        return est
