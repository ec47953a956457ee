"""Model layers: typed-edge GAT, FAVOR+ linear attention, and the full VEGN forward.

One heterogeneous round updates genes from their variants (``IN``) and from
other genes (``INTERACT``), sums the type-specific outputs, and updates
variants from their genes (``HAS``). A final ``HAS`` layer flows gene state
into variants before the sigmoid classifier.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ContractError, DimensionError, NumericalDegeneracyError
from .graph import EdgeType, HeteroGraph

MODES = ("given", "learnt")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``variant_dim`` defaults to 64 in ``given`` mode and 32 in ``learnt`` mode.
    """

    mode: str = "given"
    feature_dim: int = 1
    gene_dim: int = 32
    variant_dim: Optional[int] = None
    heads: int = 2
    rounds: int = 1
    performer_layers: int = 3
    random_features: int = 256
    dropout: float = 0.2
    leaky_slope: float = ad.LEAKY_SLOPE
    use_edge_weights: bool = False
    learnt_uses_given_edges: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant_dim is None:
            self.variant_dim = 64 if self.mode == "given" else 32
        for name in ("gene_dim", "variant_dim"):
            if getattr(self, name) % self.heads:
                raise DimensionError(f"{name}={getattr(self, name)} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# parameter containers


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_gat_params(rng, prefix, src_dim, dst_dim, heads):
    """Projections for one edge type; output width ``dst_dim`` split over ``heads``."""
    width = dst_dim // heads
    return OrderedDict(
        (f"{prefix}.{name}", Parameter(value, f"{prefix}.{name}"))
        for name, value in (
            ("W_src", _uniform(rng, src_dim, (src_dim, dst_dim))),
            ("W_dst", _uniform(rng, dst_dim, (dst_dim, dst_dim))),
            ("a_src", _uniform(rng, 2 * width, (1, dst_dim))),
            ("a_dst", _uniform(rng, 2 * width, (1, dst_dim))),
            ("W_self", _uniform(rng, dst_dim, (dst_dim, dst_dim))),
        )
    )


def init_performer_params(rng, prefix, dim):
    return OrderedDict(
        (f"{prefix}.{name}", Parameter(_uniform(rng, dim, (dim, dim)), f"{prefix}.{name}"))
        for name in ("W_q", "W_k", "W_v")
    )


def draw_omega(m, d, rng):
    """``m x d`` random features: orthogonal blocks of Gaussian directions with chi norms."""
    q, r = np.linalg.qr(rng.standard_normal((-(-m // d), d, d)))
    signs = np.sign(np.diagonal(r, axis1=1, axis2=2))
    blocks = np.transpose(q * signs[:, None, :], (0, 2, 1))
    directions = blocks.reshape(-1, d)[:m]
    norms = np.linalg.norm(rng.standard_normal((m, d)), axis=1)
    return directions * norms[:, None]


def _head_blocks(dim, heads):
    width = dim // heads
    return (np.arange(dim)[:, None] // width == np.arange(heads)[None, :]).astype(np.float64)


# ---------------------------------------------------------------------------
# GAT


def gat_layer(x_src, x_dst, src, dst, params, heads=2, prefix=None, edge_bias=None,
              slope=ad.LEAKY_SLOPE, attention_out=None):
    """Multi-head graph attention along one directed edge list.

    For destination ``i`` and head ``h``: ``e_ij = leaky_relu(a_dst.W_dst x_i +
    a_src.W_src x_j)``, softmax over incoming edges, message ``sum_j alpha_ij
    W_src x_j``. Heads are concatenated and combined with the self path as
    ``leaky_relu(x_i W_self + message)``. Destinations without incoming edges
    get the self path only.

    ``params`` maps ``W_src``, ``W_dst``, ``a_src``, ``a_dst``, ``W_self``
    (optionally under ``prefix.``) to tensors. When ``attention_out`` is a
    list, the per-edge attention array (E x heads) is appended to it.
    """
    key = (lambda n: f"{prefix}.{n}") if prefix else (lambda n: n)
    W_src, W_dst, a_src, a_dst, W_self = (params[key(n)] for n in ("W_src", "W_dst", "a_src", "a_dst", "W_self"))
    x_src, x_dst = ad.as_tensor(x_src), ad.as_tensor(x_dst)
    if x_src.shape[1] != W_src.shape[0] or x_dst.shape[1] != W_dst.shape[0]:
        raise DimensionError(
            f"GAT width mismatch: src {x_src.shape} vs W_src {W_src.shape}, dst {x_dst.shape} vs W_dst {W_dst.shape}"
        )
    n_dst = x_dst.shape[0]
    dim = W_dst.shape[1]
    blocks = Tensor(_head_blocks(dim, heads))

    hs = x_src @ W_src
    hd = x_dst @ W_dst
    s_src = (hs * a_src) @ blocks
    s_dst = (hd * a_dst) @ blocks
    logits = ad.leaky_relu(ad.take_rows(s_dst, dst) + ad.take_rows(s_src, src), slope)
    if edge_bias is not None:
        logits = logits + Tensor(np.asarray(edge_bias, dtype=np.float64).reshape(-1, 1))
    alpha = ad.segment_softmax(logits, dst, n_dst)
    if attention_out is not None:
        attention_out.append(alpha.data.copy())
    messages = ad.take_rows(hs, src) * (alpha @ ad.transpose(blocks))
    agg = ad.segment_sum(messages, dst, n_dst)
    return ad.leaky_relu(x_dst @ W_self + agg, slope)


# ---------------------------------------------------------------------------
# FAVOR+


def favor_feature_map(x, omega, stabilizer=None):
    """Positive random features for the softmax kernel.

    ``phi(x) = exp(omega x - |x|^2 / 2 - c) / sqrt(m)`` so that
    ``E[phi(q).phi(k)] = exp(q.k)`` when ``c = 0``. ``stabilizer`` picks the
    constant ``c``: ``None`` (zero), ``"row"`` (per-row max of ``omega x``) or
    ``"global"`` (max over the whole matrix). The constant is not
    differentiated; normalized attention is invariant to it.
    """
    x = ad.as_tensor(x)
    omega = np.asarray(omega, dtype=np.float64)
    if x.shape[1] != omega.shape[1]:
        raise DimensionError(f"feature map width mismatch: x {x.shape} vs omega {omega.shape}")
    m = omega.shape[0]
    proj = x @ Tensor(omega.T)
    half_sq = ad.sum(x * x, axis=1, keepdims=True) * 0.5
    arg = proj - half_sq
    if stabilizer == "row":
        arg = arg - Tensor(proj.data.max(axis=1, keepdims=True))
    elif stabilizer == "global":
        arg = arg - Tensor(proj.data.max() if proj.size else 0.0)
    elif stabilizer is not None:
        raise ContractError(f"unknown stabilizer {stabilizer!r}")
    return ad.exp(arg) * (1.0 / math.sqrt(m))


def favor_attention(q, k, v, omega):
    """Linear-time approximation of ``softmax(q k^T / sqrt(d)) v``.

    Evaluates ``D^-1 phi(Q) (phi(K)^T V)`` without forming an ``n x n`` matrix.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    scale = q.shape[1] ** -0.25
    qp = favor_feature_map(q * scale, omega, stabilizer="row")
    kp = favor_feature_map(k * scale, omega, stabilizer="global")
    kt = ad.transpose(kp)
    kv = kt @ v
    ksum = kt @ Tensor(np.ones((k.shape[0], 1)))
    denom = qp @ ksum
    if denom.size and denom.data.min() < 1e-30:
        raise NumericalDegeneracyError(
            f"FAVOR+ normalizer fell to {denom.data.min():.3e}; random features collapsed"
        )
    return (qp @ kv) / denom


def exact_softmax_attention(q, k, v):
    """Quadratic reference: ``softmax(q k^T / sqrt(d)) v`` in plain numpy."""
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    s = q @ k.T / math.sqrt(q.shape[1])
    s -= s.max(axis=1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def performer_attention(x, params, omega, heads=2, prefix=None, dropout=0.0, training=False,
                        rng=None, qk_out=None):
    """One multi-head FAVOR+ self-attention layer with a residual connection."""
    key = (lambda n: f"{prefix}.{n}") if prefix else (lambda n: n)
    x = ad.as_tensor(x)
    W_q, W_k, W_v = params[key("W_q")], params[key("W_k")], params[key("W_v")]
    if x.shape[1] != W_q.shape[0]:
        raise DimensionError(f"performer width mismatch: x {x.shape} vs W_q {W_q.shape}")
    q, k, v = x @ W_q, x @ W_k, x @ W_v
    width = W_q.shape[1] // heads
    outs = []
    for h in range(heads):
        lo, hi = h * width, (h + 1) * width
        qh, kh, vh = ad.slice_cols(q, lo, hi), ad.slice_cols(k, lo, hi), ad.slice_cols(v, lo, hi)
        if qk_out is not None:
            qk_out.append((qh.data.copy(), kh.data.copy()))
        outs.append(favor_attention(qh, kh, vh, omega))
    att = ad.concat(outs, axis=1) if heads > 1 else outs[0]
    att = ad.dropout(att, dropout, rng, training)
    return x + att


def hetero_aggregate(per_type):
    """Sum edge-type-specific representations of the same node class."""
    per_type = list(per_type)
    if not per_type:
        raise ContractError("hetero_aggregate needs at least one representation")
    shape = per_type[0].shape
    out = per_type[0]
    for t in per_type[1:]:
        if t.shape != shape:
            raise DimensionError(f"edge-type outputs disagree in shape: {shape} vs {t.shape}")
        out = out + t
    return out


# ---------------------------------------------------------------------------
# full model


class VEGNModel:
    """Parameters and forward pass of the heterogeneous gene/variant network."""

    def __init__(self, config: ModelConfig, gene_count: int):
        self.config = config
        self.gene_count = gene_count
        rng = np.random.default_rng(config.seed)
        c = config
        p = OrderedDict()
        p["gene_embeddings"] = Parameter(rng.standard_normal((gene_count, c.gene_dim)) * 0.1, "gene_embeddings")
        p["variant_proj.weight"] = Parameter(
            _uniform(rng, c.feature_dim, (c.feature_dim, c.variant_dim)), "variant_proj.weight")
        p["variant_proj.bias"] = Parameter(
            _uniform(rng, c.feature_dim, (1, c.variant_dim)), "variant_proj.bias")
        self.buffers = OrderedDict()
        for r in range(c.rounds):
            p.update(init_gat_params(rng, f"round{r}.in", c.variant_dim, c.gene_dim, c.heads))
            if self.uses_given_edges:
                p.update(init_gat_params(rng, f"round{r}.interact", c.gene_dim, c.gene_dim, c.heads))
            if c.mode == "learnt":
                for layer in range(c.performer_layers):
                    prefix = f"round{r}.performer{layer}"
                    p.update(init_performer_params(rng, prefix, c.gene_dim))
            p.update(init_gat_params(rng, f"round{r}.has", c.gene_dim, c.variant_dim, c.heads))
        p.update(init_gat_params(rng, "final.has", c.gene_dim, c.variant_dim, c.heads))
        p["head.weight"] = Parameter(_uniform(rng, c.variant_dim, (c.variant_dim, 1)), "head.weight")
        p["head.bias"] = Parameter(np.zeros((1, 1)), "head.bias")
        self.params = p
        if c.mode == "learnt":
            self.reseed_omega(np.random.default_rng([c.seed, 1]))

    @property
    def uses_given_edges(self):
        return self.config.mode == "given" or self.config.learnt_uses_given_edges

    def reseed_omega(self, rng):
        c = self.config
        width = c.gene_dim // c.heads
        for r in range(c.rounds):
            for layer in range(c.performer_layers):
                self.buffers[f"round{r}.performer{layer}.omega"] = draw_omega(c.random_features, width, rng)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        ad.zero_grad(self.params.values())

    def n_parameters(self):
        return int(np.sum([p.size for p in self.params.values()]))

    def forward(self, graph: HeteroGraph, training=False, rng=None, attention=None):
        """Predicted pathogenicity probabilities, shape ``(variant_count, 1)``.

        ``attention``, if a dict, receives per-layer GAT attention and Performer
        query/key projections for interpretation.
        """
        c = self.config
        p = self.params
        if graph.gene_count != self.gene_count:
            raise DimensionError(
                f"graph has {graph.gene_count} genes but the embedding table has {self.gene_count}")
        if graph.feature_dim != c.feature_dim:
            raise DimensionError(f"graph has {graph.feature_dim} variant features, model expects {c.feature_dim}")
        if training and c.mode == "learnt" and c.dropout > 0 and rng is None:
            raise ContractError("training forward with dropout needs an rng")

        has_src, has_dst = graph.edges(EdgeType.HAS)
        in_src, in_dst = graph.edges(EdgeType.IN)
        int_src, int_dst = graph.edges(EdgeType.INTERACT)
        bias = np.log(graph.interact_weights() + 1e-12) if c.use_edge_weights and len(int_src) else None

        def cap(name):
            if attention is None:
                return None
            return attention.setdefault(name, [])

        xg = p["gene_embeddings"]
        xv = Tensor(graph.variant_features) @ p["variant_proj.weight"] + p["variant_proj.bias"]
        for r in range(c.rounds):
            per_type = [gat_layer(xv, xg, in_src, in_dst, p, c.heads, f"round{r}.in",
                                  slope=c.leaky_slope, attention_out=cap(f"round{r}.in"))]
            if self.uses_given_edges:
                per_type.append(gat_layer(xg, xg, int_src, int_dst, p, c.heads, f"round{r}.interact",
                                          edge_bias=bias, slope=c.leaky_slope,
                                          attention_out=cap(f"round{r}.interact")))
            if c.mode == "learnt":
                h = xg
                for layer in range(c.performer_layers):
                    prefix = f"round{r}.performer{layer}"
                    h = performer_attention(h, p, self.buffers[f"{prefix}.omega"], c.heads, prefix,
                                            c.dropout, training, rng, qk_out=cap(prefix))
                per_type.append(h)
            new_g = hetero_aggregate(per_type)
            new_v = gat_layer(xg, xv, has_src, has_dst, p, c.heads, f"round{r}.has",
                              slope=c.leaky_slope, attention_out=cap(f"round{r}.has"))
            xg, xv = new_g, new_v
        xv = gat_layer(xg, xv, has_src, has_dst, p, c.heads, "final.has",
                       slope=c.leaky_slope, attention_out=cap("final.has"))
        return ad.sigmoid(xv @ p["head.weight"] + p["head.bias"])

    def predict(self, graph):
        return self.forward(graph).data[:, 0].copy()


def model_forward(graph, model: VEGNModel, training=False, rng=None):
    """Per-variant probabilities as a ``(variant_count, 1)`` tensor."""
    return model.forward(graph, training=training, rng=rng)
