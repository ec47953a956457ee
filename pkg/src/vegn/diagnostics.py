"""Finite-difference gradient suite on a toy graph, and the attention scaling benchmark."""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .graph import EdgeType, VariantRecord, build_graph
from .layers import (
    ModelConfig,
    VEGNModel,
    draw_omega,
    exact_softmax_attention,
    favor_attention,
    favor_feature_map,
    gat_layer,
    init_gat_params,
    init_performer_params,
    performer_attention,
)
from .trainer import bce_loss, training_labels

TOY_GENES = ["G1", "G2", "G3", "G4", "G5"]
TOY_EDGES = [("G1", "G2", 1.0), ("G2", "G3", 0.5), ("G3", "G4", 2.0), ("G1", "G4", 1.0)]
TOY_ASSIGNMENT = ["G1", "G1", "G2", "G3", "G3", "G3", "G4", "G2"]  # G5 has no variants
TOY_LABELS = [1, 0, 1, 0, None, 1, 0, 1]


def toy_graph(seed=0, feature_dim=1):
    """5 genes, 8 variants; gene G5 is isolated and variant-free."""
    rng = np.random.default_rng(seed)
    records = [
        VariantRecord(f"V{i + 1}", "chr1", 1000 + i, "A", "G", gene,
                      tuple(rng.uniform(-1.0, 1.0, size=feature_dim)), lab)
        for i, (gene, lab) in enumerate(zip(TOY_ASSIGNMENT, TOY_LABELS))
    ]
    return build_graph(records, TOY_EDGES, TOY_GENES)


def toy_model(mode="given", seed=0, **overrides):
    small = {"gene_dim": 4, "variant_dim": 6 if mode == "given" else 4, "random_features": 16, "seed": seed}
    small.update(overrides)
    return VEGNModel(ModelConfig(mode=mode, **small), len(TOY_GENES))


def _perturb(params, rng, scale=0.5):
    # default init leaves some gradients near zero; spread parameters so every path is exercised
    for p in params:
        p.data += rng.uniform(-scale, scale, size=p.shape)


def grad_check_suite(mode="given", seed=0, step=1e-5, tolerance=1e-4):
    """Reverse-mode vs central differences for each layer and the full model.

    Returns ``{check name: GradCheckReport}``.
    """
    rng = np.random.default_rng(seed)
    reports = {}

    w = Parameter(rng.uniform(-1, 1, (4, 3)), "linear.W")
    b = Parameter(rng.uniform(-1, 1, (1, 3)), "linear.b")
    x = Tensor(rng.uniform(-1, 1, (5, 4)))
    reports["linear"] = ad.grad_check(lambda: ad.sum(ad.sigmoid(x @ w + b)), [w, b], step, tolerance)

    graph = toy_graph(seed)
    xs = Parameter(rng.uniform(-1, 1, (graph.gene_count, 4)), "gat.x_src")
    xd = Parameter(rng.uniform(-1, 1, (graph.variant_count, 6)), "gat.x_dst")
    gp = init_gat_params(rng, "gat", 4, 6, 2)
    _perturb(gp.values(), rng)
    src, dst = graph.edges(EdgeType.HAS)
    reports["gat_layer"] = ad.grad_check(
        lambda: ad.sum(ad.sigmoid(gat_layer(xs, xd, src, dst, gp, 2, "gat"))),
        [xs, xd, *gp.values()], step, tolerance)

    q = Parameter(rng.uniform(-1, 1, (6, 4)), "favor.x")
    omega = draw_omega(16, 4, rng)
    reports["favor_feature_map"] = ad.grad_check(
        lambda: ad.sum(favor_feature_map(q, omega)), [q], step, tolerance)

    xg = Parameter(rng.uniform(-1, 1, (graph.gene_count, 4)), "performer.x")
    pp = init_performer_params(rng, "performer", 4)
    omega2 = draw_omega(16, 2, rng)
    reports["performer_attention"] = ad.grad_check(
        lambda: ad.sum(ad.sigmoid(performer_attention(xg, pp, omega2, 2, "performer"))),
        [xg, *pp.values()], step, tolerance)

    model = toy_model(mode, seed)
    _perturb(model.parameters(), rng)
    y = training_labels(graph)
    reports[f"model_{mode}"] = ad.grad_check(
        lambda: bce_loss(model.forward(graph), y), model.parameters(), step, tolerance)
    return reports


def attention_inputs(n, d, rng, scale=1.0):
    return tuple(rng.uniform(-scale, scale, size=(n, d)) for _ in range(3))


def relative_frobenius(approx, exact):
    return float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))


def bench_attention(gene_counts, dim=16, features=256, repeats=3, seed=0, exact_limit=4096):
    """Time FAVOR+ (and exact attention, when ``n <= exact_limit``) per gene count.

    Returns one dict per gene count with the best-of-``repeats`` wall times and
    the relative Frobenius error of FAVOR+ against exact softmax attention.
    """
    rows = []
    for n in gene_counts:
        rng = np.random.default_rng([seed, n])
        q, k, v = attention_inputs(n, dim, rng)
        omega = draw_omega(features, dim, rng)
        favor_times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            approx = favor_attention(q, k, v, omega).data
            favor_times.append(time.perf_counter() - t0)
        row = {"genes": n, "dim": dim, "features": features, "favor_seconds": min(favor_times),
               "exact_seconds": None, "rel_error": None}
        if n <= exact_limit:
            exact_times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                exact = exact_softmax_attention(q, k, v)
                exact_times.append(time.perf_counter() - t0)
            row["exact_seconds"] = min(exact_times)
            row["rel_error"] = relative_frobenius(approx, exact)
        rows.append(row)
    return rows
