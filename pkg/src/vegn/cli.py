"""Command-line interface: ``vegn <subcommand> [flags]``.

On failure, a single line ``error: <ErrorClass>: <message>`` goes to stderr
and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import secrets
import sys
from pathlib import Path

import numpy as np

from . import io, synth
from .diagnostics import bench_attention, grad_check_suite
from .errors import VEGNError
from .estimator import VEGNClassifier
from .graph import attach_variants, build_graph
from .metrics import auroc
from .trainer import TrainConfig, train

log = logging.getLogger("vegn")


def _seed(args):
    if args.seed is None:
        args.seed = secrets.randbelow(2**31)
        print(f"seed: {args.seed}", file=sys.stderr)
    return args.seed


def cmd_train(args):
    seed = _seed(args)
    cfg = io.load_config(args.config) if args.config else {}
    cfg["seed"] = seed
    if args.mode:
        cfg["mode"] = args.mode
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    config = TrainConfig.from_dict(cfg)
    records = io.parse_variant_tsv(args.variants)
    edges = io.parse_gene_edges(args.gene_edges) if args.gene_edges else []
    genes = io.parse_gene_list(args.genes) if args.genes else sorted(
        {r.gene_id for r in records} | {e[0] for e in edges} | {e[1] for e in edges})
    graph = build_graph(records, edges, genes)

    report_fh = open(args.report, "w") if args.report else None
    try:
        def on_epoch(rep):
            if report_fh:
                report_fh.write(rep.to_json() + "\n")
                report_fh.flush()
            log.info("epoch %d train_loss %.5f eval_loss %s lr %g", rep.epoch, rep.train_loss, rep.eval_loss, rep.lr)

        model, reports = train(graph, records, config, on_epoch=on_epoch)
    finally:
        if report_fh:
            report_fh.close()
    io.save_checkpoint(model, args.out, train_config=config, graph=graph, seed=seed)
    last = reports[-1] if reports else None
    print(json.dumps({"checkpoint": str(args.out), "epochs": len(reports),
                      "eval_auroc": last.eval_auroc if last else None}))
    return 0


def cmd_predict(args):
    est = VEGNClassifier.load(args.model)
    records = io.parse_variant_tsv(args.variants)
    p = est.predict_proba(records)[:, 1]
    io.write_predictions([r.variant_id for r in records], p, [r.label for r in records], args.out)
    return 0


def cmd_eval(args):
    preds = io.read_jsonl(args.predictions)
    if args.labels:
        labels = {r.variant_id: r.label for r in io.parse_variant_tsv(args.labels)}
    else:
        labels = {p["variant_id"]: p.get("label") for p in preds}
    scores, ys = [], []
    for p in preds:
        lab = labels.get(p["variant_id"])
        if lab is None:
            continue
        scores.append(p["score"])
        ys.append(int(lab))
    value = auroc(np.asarray(scores), np.asarray(ys, dtype=int))
    print(json.dumps({"auroc": value, "n": len(ys), "n_positive": int(sum(ys))}))
    return 0


def cmd_attention(args):
    est = VEGNClassifier.load(args.model)
    graph = est.graph_
    if args.variants:
        known = graph.variant_index()
        graph = attach_variants(graph, [r for r in io.parse_variant_tsv(args.variants) if r.variant_id not in known])
    queries = args.queries.split(",") if args.queries else None
    export = io.export_attention(est.model_, graph, args.top_k, queries=queries)
    export.write(args.out)
    return 0


def cmd_synth(args):
    cfg = synth.SynthConfig(
        gene_count=args.gene_count, variants_per_gene=args.variants_per_gene,
        gene_edge_probability=args.gene_edge_probability, cross_edge_probability=args.cross_edge_probability,
        module_count=args.module_count, feature_noise_sd=args.feature_noise_sd,
        label_flip_probability=args.label_flip_probability, pathogenic_fraction=args.pathogenic_fraction,
        seed=_seed(args),
    )
    data = synth.generate(cfg)
    out = synth.write(data, args.out_dir)
    print(json.dumps({"out_dir": str(out), "genes": len(data.genes), "variants": len(data.variants),
                      "gene_edges": len(data.gene_edges)}))
    return 0


def cmd_bench(args):
    counts = [int(x) for x in args.genes.split(",")]
    rows = bench_attention(counts, args.dim, args.features, args.repeats, seed=_seed(args),
                           exact_limit=args.exact_limit)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_grad_check(args):
    reports = grad_check_suite(args.mode, seed=_seed(args), tolerance=args.tolerance)
    worst = 0.0
    for name, rep in reports.items():
        worst = max(worst, rep.max_error)
        print(f"{name}\t{rep.max_error:.3e}\t{'pass' if rep.passed else 'FAIL'}")
    print(f"max_rel_err\t{worst:.3e}")
    return 0 if all(r.passed for r in reports.values()) else 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (printed to stderr when omitted)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vegn", description="Variant effect prediction with graph neural networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--variants", required=True, type=Path)
    p.add_argument("--gene-edges", type=Path)
    p.add_argument("--genes", type=Path, help="gene vocabulary, one id per line")
    p.add_argument("--mode", choices=("given", "learnt"))
    p.add_argument("--config", type=Path, help="JSON with TrainConfig fields")
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--report", type=Path, help="per-epoch reports as JSON lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="score variants with a checkpoint")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--variants", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="auROC of a predictions file")
    p.add_argument("--predictions", required=True, type=Path)
    p.add_argument("--labels", type=Path, help="variant TSV with labels; default: labels echoed in predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention", parents=[common], help="export top-k attention weights")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--variants", type=Path, help="extra variants to attach before export")
    p.add_argument("--queries", help="comma-separated node ids to export (default: all)")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_attention)

    defaults = synth.SynthConfig()
    p = sub.add_parser("synth", parents=[common], help="generate a planted synthetic dataset")
    p.add_argument("--gene-count", type=int, default=defaults.gene_count)
    p.add_argument("--variants-per-gene", type=float, default=defaults.variants_per_gene)
    p.add_argument("--gene-edge-probability", type=float, default=defaults.gene_edge_probability)
    p.add_argument("--cross-edge-probability", type=float, default=defaults.cross_edge_probability)
    p.add_argument("--module-count", type=int, default=defaults.module_count)
    p.add_argument("--feature-noise-sd", type=float, default=defaults.feature_noise_sd)
    p.add_argument("--label-flip-probability", type=float, default=defaults.label_flip_probability)
    p.add_argument("--pathogenic-fraction", type=float, default=defaults.pathogenic_fraction)
    p.add_argument("--out-dir", required=True, type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench-attention", parents=[common], help="FAVOR+ vs exact attention: error and wall time")
    p.add_argument("--genes", default="1000,2000,4000", help="comma-separated gene counts")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--features", type=int, default=256)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--exact-limit", type=int, default=4096)
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite on a toy graph")
    p.add_argument("--mode", choices=("given", "learnt"), default="given")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VEGNError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
