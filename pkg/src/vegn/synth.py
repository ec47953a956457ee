"""Synthetic gene/variant data with planted module structure.

Genes are partitioned into modules, each module is pathogenic or benign, and
gene-gene edges are dense inside modules and sparse across them. A variant's
label is its gene's status (flipped with some probability) and its single
feature is the status plus Gaussian noise, so neighbors in the graph carry
information the feature alone lacks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ContractError
from .graph import VariantRecord

_BASES = np.array(list("ACGT"))


@dataclass
class SynthConfig:
    gene_count: int = 100
    variants_per_gene: float = 10.0
    gene_edge_probability: float = 0.2
    cross_edge_probability: float = 0.001
    module_count: int = 5
    feature_noise_sd: float = 1.0
    label_flip_probability: float = 0.1
    pathogenic_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("gene_edge_probability", "cross_edge_probability",
                     "label_flip_probability", "pathogenic_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must be in [0, 1], got {v}")
        if self.gene_count < 1 or self.module_count < 1 or self.module_count > self.gene_count:
            raise ContractError("need 1 <= module_count <= gene_count")
        if self.variants_per_gene <= 0 or self.feature_noise_sd < 0:
            raise ContractError("variants_per_gene must be > 0 and feature_noise_sd >= 0")

    def to_dict(self):
        return asdict(self)


class SynthData(NamedTuple):
    variants: list
    gene_edges: list
    genes: list
    gene_status: dict
    gene_module: dict


def generate(config: SynthConfig) -> SynthData:
    rng = np.random.default_rng(config.seed)
    n, k = config.gene_count, config.module_count
    genes = [f"GENE{i:05d}" for i in range(n)]

    module_of = np.empty(n, dtype=np.intp)
    for mod, members in enumerate(np.array_split(rng.permutation(n), k)):
        module_of[members] = mod
    n_path = int(np.floor(k * config.pathogenic_fraction + 0.5))
    module_status = np.zeros(k, dtype=np.int64)
    module_status[rng.permutation(k)[:n_path]] = 1
    status = module_status[module_of]

    edges = []
    for mod in range(k):
        members = np.sort(np.flatnonzero(module_of == mod))
        if len(members) < 2:
            continue
        ii, jj = np.triu_indices(len(members), k=1)
        keep = rng.random(len(ii)) < config.gene_edge_probability
        edges.extend(zip(members[ii[keep]].tolist(), members[jj[keep]].tolist()))
    cross_pairs = n * (n - 1) // 2 - sum(
        c * (c - 1) // 2 for c in np.bincount(module_of, minlength=k).tolist())
    n_cross = rng.binomial(cross_pairs, config.cross_edge_probability) if cross_pairs else 0
    seen = set()
    while len(seen) < n_cross:
        a, b = rng.integers(n, size=2).tolist()
        if module_of[a] == module_of[b]:
            continue
        seen.add((min(a, b), max(a, b)))
    edges.extend(sorted(seen))
    gene_edges = [(genes[a], genes[b], 1.0) for a, b in edges]

    counts = rng.poisson(config.variants_per_gene, size=n)
    total = int(counts.sum())
    gene_of = np.repeat(np.arange(n), counts)
    flips = rng.random(total) < config.label_flip_probability
    labels = np.where(flips, 1 - status[gene_of], status[gene_of])
    noise = rng.normal(0.0, config.feature_noise_sd, size=total) if config.feature_noise_sd > 0 else 0.0
    feats = status[gene_of] + noise
    chroms = rng.integers(1, 23, size=total)
    positions = rng.integers(1, 250_000_000, size=total)
    ref_idx = rng.integers(4, size=total)
    alt_idx = (ref_idx + rng.integers(1, 4, size=total)) % 4

    variants = [
        VariantRecord(
            variant_id=f"VAR{i:06d}",
            chrom=f"chr{chroms[i]}",
            pos=int(positions[i]),
            ref_allele=str(_BASES[ref_idx[i]]),
            alt_allele=str(_BASES[alt_idx[i]]),
            gene_id=genes[gene_of[i]],
            features=(float(feats[i]),),
            label=int(labels[i]),
        )
        for i in range(total)
    ]
    return SynthData(
        variants=variants,
        gene_edges=gene_edges,
        genes=genes,
        gene_status={g: int(s) for g, s in zip(genes, status)},
        gene_module={g: int(m) for g, m in zip(genes, module_of)},
    )


def write(data: SynthData, out_dir, feature_name="feat_score"):
    """Write ``variants.tsv``, ``gene_edges.tsv``, ``genes.txt`` and ``truth.tsv``."""
    from . import io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_variant_tsv(data.variants, out / "variants.tsv", feature_names=[feature_name])
    io.write_gene_edges(data.gene_edges, out / "gene_edges.tsv")
    io.write_gene_list(data.genes, out / "genes.txt")
    with open(out / "truth.tsv", "w") as fh:
        fh.write("gene_id\tmodule\tstatus\n")
        for g in data.genes:
            fh.write(f"{g}\t{data.gene_module[g]}\t{data.gene_status[g]}\n")
    return out
