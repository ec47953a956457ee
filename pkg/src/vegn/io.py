"""File formats: variant/edge TSVs, gene lists, checkpoints, predictions, attention export.

Checkpoint layout (little-endian)::

    b"VEGN" | u32 version | u64 metadata length | metadata JSON (utf-8)
    | float64 tensor payloads in metadata order | u32 CRC-32 of all preceding bytes
"""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
import os
import struct
import tempfile
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CapabilityError, IncompatibleCheckpointError, IntegrityError, RowError, SchemaError
from .graph import EdgeType, HeteroGraph, VariantRecord
from .layers import ModelConfig, VEGNModel

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("variant_id", "chrom", "pos", "ref", "alt", "gene_id", "label")
FEATURE_PREFIX = "feat_"
MAGIC = b"VEGN"
FORMAT_VERSION = 1
EXACT_ATTENTION_LIMIT = 4096

_LABELS = {"0": 0, "1": 1, "NA": None}


@contextmanager
def _open_text(source, mode="r"):
    if hasattr(source, "read") or hasattr(source, "write"):
        yield source
    else:
        with open(source, mode, newline="") as fh:
            yield fh


def _name(source):
    return getattr(source, "name", None) if not isinstance(source, (str, os.PathLike)) else str(source)


# ---------------------------------------------------------------------------
# variant tables


def parse_variant_tsv(source):
    """Read a variant table; ``label`` is ``0``, ``1`` or ``NA`` (unlabeled)."""
    path = _name(source)
    with _open_text(source) as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path or 'input'}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path or 'input'}: missing required column(s) {', '.join(missing)}")
        feat_cols = [i for i, h in enumerate(header) if h.startswith(FEATURE_PREFIX)]
        if not feat_cols:
            raise SchemaError(f"{path or 'input'}: no feature columns (prefix {FEATURE_PREFIX!r})")
        col = {h: i for i, h in enumerate(header)}
        records = []
        for line, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise SchemaError(
                    f"{path or 'input'}:{line}: {len(row)} fields, header declares {len(header)}")
            try:
                pos = int(row[col["pos"]])
            except ValueError:
                raise RowError(f"unparseable position {row[col['pos']]!r}", line, path) from None
            try:
                feats = tuple(float(row[i]) for i in feat_cols)
            except ValueError as exc:
                raise RowError(f"unparseable feature value ({exc})", line, path) from None
            if not all(math.isfinite(f) for f in feats):
                raise RowError("non-finite feature value", line, path)
            raw_label = row[col["label"]].strip()
            if raw_label not in _LABELS:
                raise RowError(f"label must be 0, 1 or NA, got {raw_label!r}", line, path)
            records.append(VariantRecord(
                variant_id=row[col["variant_id"]],
                chrom=row[col["chrom"]],
                pos=pos,
                ref_allele=row[col["ref"]],
                alt_allele=row[col["alt"]],
                gene_id=row[col["gene_id"]],
                features=feats,
                label=_LABELS[raw_label],
            ))
    return records


def variant_feature_names(source):
    with _open_text(source) as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
    return [h for h in header if h.startswith(FEATURE_PREFIX)]


def write_variant_tsv(records, dest, feature_names=None):
    records = list(records)
    n_feat = len(records[0].features) if records else len(feature_names or ["feat_0"])
    if feature_names is None:
        feature_names = [f"{FEATURE_PREFIX}{i}" for i in range(n_feat)]
    header = ["variant_id", "chrom", "pos", "ref", "alt", "gene_id", *feature_names, "label"]
    with _open_text(dest, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for r in records:
            label = "NA" if r.label is None else str(r.label)
            fields = [r.variant_id, r.chrom, str(r.pos), r.ref_allele, r.alt_allele, r.gene_id,
                      *(repr(float(f)) for f in r.features), label]
            fh.write("\t".join(fields) + "\n")


# ---------------------------------------------------------------------------
# gene edges and vocabulary


def parse_gene_edges(source, return_dropped=False):
    """Read ``gene_a, gene_b[, weight]`` rows; self-loops are dropped with a warning.

    A first row reading ``gene_a gene_b [weight]`` is treated as a header.
    """
    path = _name(source)
    edges, dropped = [], 0
    with _open_text(source) as fh:
        for line, raw in enumerate(fh, start=1):
            text = raw.rstrip("\r\n")
            if not text.strip() or text.startswith("#"):
                continue
            parts = text.split("\t")
            if line == 1 and parts[:2] == ["gene_a", "gene_b"]:
                continue
            if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
                raise RowError(f"expected gene_a<TAB>gene_b[<TAB>weight], got {len(parts)} field(s)", line, path)
            weight = 1.0
            if len(parts) == 3 and parts[2].strip():
                try:
                    weight = float(parts[2])
                except ValueError:
                    raise RowError(f"unparseable weight {parts[2]!r}", line, path) from None
                if not math.isfinite(weight) or weight < 0:
                    raise RowError(f"weight must be finite and nonnegative, got {parts[2]!r}", line, path)
            if parts[0] == parts[1]:
                dropped += 1
                continue
            edges.append((parts[0], parts[1], weight))
    if dropped:
        log.warning("dropped %d self-loop edge(s) from %s", dropped, path or "gene edges")
    return (edges, dropped) if return_dropped else edges


def write_gene_edges(edges, dest):
    with _open_text(dest, "w") as fh:
        fh.write("gene_a\tgene_b\tweight\n")
        for e in edges:
            w = e[2] if len(e) > 2 else 1.0
            fh.write(f"{e[0]}\t{e[1]}\t{float(w)!r}\n")


def parse_gene_list(source):
    """Gene vocabulary: one id per line (first tab field), order preserved."""
    genes = []
    with _open_text(source) as fh:
        for raw in fh:
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            genes.append(text.split("\t")[0])
    return genes


def write_gene_list(genes, dest):
    with _open_text(dest, "w") as fh:
        for g in genes:
            fh.write(f"{g}\n")


def load_config(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    version: int
    model_config: dict
    gene_vocabulary: list
    params: dict
    buffers: dict
    train_config: Optional[dict] = None
    graph: Optional[HeteroGraph] = None
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_model(self):
        config = ModelConfig(**self.model_config)
        model = VEGNModel(config, len(self.gene_vocabulary))
        for name, value in self.params.items():
            if name not in model.params:
                raise IncompatibleCheckpointError(f"checkpoint parameter {name!r} unknown to this model")
            if model.params[name].shape != value.shape:
                raise IncompatibleCheckpointError(
                    f"parameter {name!r} has shape {value.shape}, model expects {model.params[name].shape}")
            model.params[name].data[...] = value
        missing = set(model.params) - set(self.params)
        if missing:
            raise IncompatibleCheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
        model.buffers.clear()
        model.buffers.update({k: v.copy() for k, v in self.buffers.items()})
        return model


def _pack(meta, arrays):
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    data = head + body
    return data + struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)


def save_checkpoint(model: VEGNModel, path, train_config=None, graph: Optional[HeteroGraph] = None,
                    gene_vocabulary=None, seed=None):
    """Atomically write a self-describing checkpoint (write to temp, then rename)."""
    if gene_vocabulary is None:
        if graph is None:
            raise SchemaError("save_checkpoint needs a graph or an explicit gene vocabulary")
        gene_vocabulary = list(graph.gene_ids)
    tensors, arrays = [], []
    for kind, source in (("param", {k: p.data for k, p in model.params.items()}), ("buffer", model.buffers)):
        for name, arr in source.items():
            tensors.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            arrays.append(arr)
    graph_meta = None
    if graph is not None:
        graph_meta = graph.to_dict()
        for key in ("variant_features", "gene_edge_weights"):
            arr = getattr(graph, key)
            graph_meta.pop(key)
            tensors.append({"name": f"graph.{key}", "kind": "graph", "shape": list(arr.shape)})
            arrays.append(arr)
    if train_config is not None and hasattr(train_config, "to_dict"):
        train_config = train_config.to_dict()
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config,
        "gene_vocabulary": list(gene_vocabulary),
        "tensors": tensors,
        "graph": graph_meta,
        "seed": seed if seed is not None else model.config.seed,
    }
    data = _pack(meta, arrays)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 4 + 12 + 4 or data[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a VEGN checkpoint (bad magic or too short)")
    version, meta_len = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise IntegrityError(f"{path}: checksum mismatch (file truncated or corrupted)")
    try:
        meta = json.loads(data[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable metadata block") from exc
    offset = 16 + meta_len
    expected = offset + 8 * sum(int(np.prod(t["shape"])) for t in meta["tensors"]) + 4
    if expected != len(data):
        raise IntegrityError(f"{path}: payload length {len(data)} bytes, metadata implies {expected}")
    params, buffers, graph_arrays = {}, {}, {}
    for t in meta["tensors"]:
        n = int(np.prod(t["shape"]))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(t["shape"])
        offset += 8 * n
        {"param": params, "buffer": buffers, "graph": graph_arrays}[t["kind"]][t["name"]] = arr
    graph = None
    if meta.get("graph") is not None:
        graph = HeteroGraph.from_dict(
            meta["graph"],
            variant_features=graph_arrays["graph.variant_features"],
            gene_edge_weights=graph_arrays["graph.gene_edge_weights"],
        )
    return Checkpoint(
        version=version,
        model_config=meta["model_config"],
        gene_vocabulary=meta["gene_vocabulary"],
        params=params,
        buffers=buffers,
        train_config=meta.get("train_config"),
        graph=graph,
        seed=meta.get("seed"),
    )


# ---------------------------------------------------------------------------
# predictions and reports


def write_predictions(variant_ids, scores, labels, dest):
    """One JSON object per line: ``variant_id``, ``score``, echoed ``label``."""
    with _open_text(dest, "w") as fh:
        for vid, s, lab in zip(variant_ids, scores, labels):
            lab = None if lab is None or (isinstance(lab, (int, np.integer)) and lab < 0) else int(lab)
            fh.write(json.dumps({"variant_id": vid, "score": float(s), "label": lab}) + "\n")


def read_jsonl(source):
    out = []
    path = _name(source)
    with _open_text(source) as fh:
        for line, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                out.append(json.loads(raw))
            except json.JSONDecodeError as exc:
                raise RowError(f"invalid JSON ({exc.msg})", line, path) from None
    return out


def write_reports(reports, dest):
    with _open_text(dest, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


# ---------------------------------------------------------------------------
# attention export


@dataclass
class AttentionExport:
    """Ranked attention per (layer, head, query node)."""

    records: list

    def to_jsonl(self):
        buf = _io.StringIO()
        for rec in self.records:
            buf.write(json.dumps(rec) + "\n")
        return buf.getvalue()

    def write(self, dest):
        with _open_text(dest, "w") as fh:
            fh.write(self.to_jsonl())


_LAYER_EDGES = {"in": EdgeType.IN, "interact": EdgeType.INTERACT, "has": EdgeType.HAS}


def _ranked(ids, weights, top_k):
    order = sorted(range(len(weights)), key=lambda i: (-weights[i], i))[:top_k]
    return [[ids[i], float(weights[i])] for i in order]


def export_attention(model: VEGNModel, graph: HeteroGraph, top_k=5, queries=None,
                     exact_limit=EXACT_ATTENTION_LIMIT) -> AttentionExport:
    """Top-``top_k`` attention neighbors for every query node, per layer and head.

    GAT layers export their softmax weights over incoming edges. Performer
    layers are recomputed as exact softmax attention from the same queries and
    keys, which requires materializing ``|G| x |G|``; above ``exact_limit``
    genes this raises :class:`CapabilityError`.
    """
    if model.config.mode == "learnt" and graph.gene_count > exact_limit:
        raise CapabilityError(
            f"learnt-mode attention export recomputes exact |G|x|G| attention; "
            f"{graph.gene_count} genes exceeds the limit of {exact_limit}")
    captured = {}
    model.forward(graph, attention=captured)
    gene_ids, variant_ids = graph.gene_ids, graph.variant_ids
    wanted = None if queries is None else set(queries)
    records = []
    for layer, payload in captured.items():
        kind = layer.split(".")[-1]
        if kind in _LAYER_EDGES:
            edge_type = _LAYER_EDGES[kind]
            alpha = payload[0]
            src, dst = graph.edges(edge_type)
            src_ids = variant_ids if edge_type is EdgeType.IN else gene_ids
            dst_ids = gene_ids if edge_type in (EdgeType.IN, EdgeType.INTERACT) else variant_ids
            order = np.argsort(dst, kind="stable")
            bounds = np.searchsorted(dst[order], np.arange(len(dst_ids) + 1))
            for node in range(len(dst_ids)):
                if wanted is not None and dst_ids[node] not in wanted:
                    continue
                edges = order[bounds[node]:bounds[node + 1]]
                nbr = [src_ids[j] for j in src[edges].tolist()]
                for h in range(alpha.shape[1]):
                    records.append({
                        "layer": layer, "edge_type": edge_type.value, "head": h,
                        "query": dst_ids[node],
                        "neighbors": _ranked(nbr, alpha[edges, h].tolist(), top_k),
                    })
        else:
            for h, (q, k) in enumerate(payload):
                scale = q.shape[1] ** -0.5
                s = (q @ k.T) * scale
                s -= s.max(axis=1, keepdims=True)
                w = np.exp(s)
                w /= w.sum(axis=1, keepdims=True)
                for node in range(len(gene_ids)):
                    if wanted is not None and gene_ids[node] not in wanted:
                        continue
                    records.append({
                        "layer": layer, "edge_type": "learnt", "head": h, "query": gene_ids[node],
                        "neighbors": _ranked(gene_ids, w[node].tolist(), top_k),
                    })
    return AttentionExport(records)
