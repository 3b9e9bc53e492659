"""``ctxppi`` command-line entry point.

Every subcommand reads a :class:`~ctxppi.config.RunConfig` (file plus
``--key value`` overrides) and writes only under ``--out``::

    <out>/synth/         raw synthetic tables, labels, ground_truth.json
    <out>/graph/         knowledge-graph bundle
    <out>/summary.json   data summary
    <out>/pretrain/      model.ckpt, train_report.json, link_metrics.csv,
                         proteins.tsv, cells.tsv
    <out>/finetune/      mlp.ckpt, scores.csv, rankings.json,
                         context_metrics.csv, split.json
    <out>/analysis/      similarity CSV/SVG files, marker_contrast.csv
    <out>/compare/       comparison.csv, comparison.json, per-method context metrics
    <out>/report.md

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import analysis, baseline, finetune, kg, pretrain, synth
from .checkpoint import Checkpoint, check_resume, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .errors import (
    CorruptCheckpoint, CtxPpiError, GeneNotFound, InsufficientContexts, MissingParent,
    ParseError, ResumeMismatch, SpecError, UnsupportedVersion,
)
from .model import EmbeddingTable, ModelParams

log = logging.getLogger("ctxppi")

COMMANDS = ("build-graph", "synth", "pretrain", "finetune", "analyze", "compare", "report")

# errors that mean the user handed us something unusable
INPUT_ERRORS = (
    ConfigError, ParseError, MissingParent, SpecError, CorruptCheckpoint,
    UnsupportedVersion, ResumeMismatch, FileNotFoundError,
)


class InputMissing(CtxPpiError):
    def __init__(self, what, path):
        self.path = path
        super().__init__(f"{what} not found: {path}")


def _require(path, what):
    if path is None:
        raise ConfigError(f"no {what} configured")
    if not Path(path).exists():
        raise InputMissing(what, path)
    return Path(path)


def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _graph_dir(cfg):
    return cfg.graph_dir or cfg.out / "graph"


def _load_graph(cfg):
    d = _require(_graph_dir(cfg), "graph bundle")
    if not kg.bundle_exists(d):
        raise InputMissing("graph bundle", d / "context_nodes.tsv")
    return kg.read_bundle(d)


def _load_embeddings(cfg):
    d = cfg.out / "pretrain"
    prot = _require(d / "proteins.tsv", "protein embeddings (run pretrain first)")
    cells = _require(d / "cells.tsv", "cell embeddings (run pretrain first)")
    return EmbeddingTable.from_tsv(prot, cells)


def _labels_path(cfg):
    if cfg.labels_path is not None:
        return _require(cfg.labels_path, "label file")
    return _require(cfg.out / "synth" / "labels.tsv", "label file (set labels_path)")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg):
    bundle = synth.generate(cfg.synthetic_spec(), cfg.seed)
    bundle.write(cfg.out / "synth")
    graph = bundle.knowledge_graph()
    kg.write_bundle(graph, _graph_dir(cfg))
    _write(cfg.out / "summary.json", kg.summarize(graph).to_json())
    print(f"synthetic bundle: {len(graph.contexts)} contexts, "
          f"{graph.n_protein_representations} protein representations")


def cmd_build_graph(cfg):
    paths = {
        "global PPI file": cfg.ppi_path,
        "DEG file": cfg.deg_path,
        "ligand-receptor file": cfg.lr_path,
        "hierarchy file": cfg.hierarchy_path,
    }
    for what, p in paths.items():
        _require(p, what)
    global_ppi = kg.read_global_ppi(cfg.ppi_path)
    graph, rejected = kg.build_knowledge_graph(
        global_ppi, kg.read_deg_table(cfg.deg_path), kg.read_lr_table(cfg.lr_path),
        kg.read_hierarchy(cfg.hierarchy_path), min_nodes=cfg.min_nodes,
    )
    for cid, size in rejected.items():
        print(f"warning: context {cid} dropped (largest component {size} nodes)", file=sys.stderr)
    kg.write_bundle(graph, _graph_dir(cfg))
    summary = kg.summarize(graph)
    _write(cfg.out / "summary.json", summary.to_json())
    print(summary.to_json(), end="")


def _checkpoint_from_state(cfg, state):
    return Checkpoint(
        config_hash=cfg.config_hash(),
        params=state.params.arrays,
        epoch=state.epoch,
        adam=state.adam,
        rng_state=state.rng_state,
        best_params=None if state.best_params is None else state.best_params.arrays,
        meta={
            "best_valid": state.best_valid,
            "best_epoch": state.best_epoch,
            "losses": state.losses,
            "valid_auroc": state.valid_auroc,
        },
    )


def _state_from_checkpoint(ckpt):
    meta = ckpt.meta
    return pretrain.TrainState(
        epoch=ckpt.epoch,
        params=ModelParams(ckpt.params),
        adam=ckpt.adam,
        rng_state=ckpt.rng_state,
        best_valid=meta["best_valid"],
        best_epoch=meta["best_epoch"],
        best_params=None if ckpt.best_params is None else ModelParams(ckpt.best_params),
        losses=list(meta["losses"]),
        valid_auroc=list(meta["valid_auroc"]),
    )


def cmd_pretrain(cfg):
    graph = _load_graph(cfg)
    out = cfg.out / "pretrain"
    ckpt_path = out / "model.ckpt"
    resume = None
    if cfg.resume:
        ckpt = load_checkpoint(_require(ckpt_path, "checkpoint to resume from"))
        check_resume(ckpt, cfg.config_hash())
        resume = _state_from_checkpoint(ckpt)
        print(f"resuming from epoch {ckpt.epoch}")
    mc, tc = cfg.model_config(), cfg.train_config()
    best, report = pretrain.train(graph, mc, tc, resume=resume)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, _checkpoint_from_state(cfg, report.final_state))
    doc = report.to_dict()
    doc["config_hash"] = cfg.config_hash()
    _write(out / "train_report.json", json.dumps(doc, indent=2) + "\n")
    _write(out / "link_metrics.csv", report.metrics_csv())
    pretrain.embed(graph, best, mc, report.split).to_tsv(out / "proteins.tsv", out / "cells.tsv")
    if report.aborted:
        raise RuntimeError("training stopped on a non-finite loss; best parameters were saved")
    print(f"epochs {report.epochs_run}, best epoch {report.best_epoch}, "
          f"mean test AUROC {report.mean_test('auroc')}")


def _finetune(table, labels, cfg):
    data = finetune.build_finetune_dataset(table, labels)
    return finetune.train_mlp(data, cfg.mlp_config(), seed=cfg.seed)


def cmd_finetune(cfg):
    table = _load_embeddings(cfg)
    labels = finetune.read_labels(_labels_path(cfg))
    result = _finetune(table, labels, cfg)
    out = cfg.out / "finetune"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "mlp.ckpt", Checkpoint(
        cfg.config_hash(), result.params.arrays, epoch=cfg.mlp_epochs,
        meta={"kind": "mlp", "hidden": cfg.mlp_hidden},
    ))
    genes = sorted(labels.as_mapping())
    _write(out / "scores.csv", finetune.scores_csv(finetune.score_all(table, result.params, genes)))
    _write(out / "rankings.json", finetune.rankings_json(table, result.params, genes))
    per_context = finetune.evaluate_contexts(table, result.params, labels, result.split.test_genes)
    _write(out / "context_metrics.csv", finetune.context_metrics_csv(per_context))
    _write(out / "split.json", json.dumps({
        "train": sorted(result.split.train_genes),
        "test": sorted(result.split.test_genes),
    }, indent=2) + "\n")
    print(f"train accuracy {result.train_accuracy:.4f}; "
          f"{len(result.split.test_genes)} held-out genes")


def _safe_name(s):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", s)


def _default_genes(table, k=3):
    ranked = sorted(table.genes, key=lambda g: (-len(table.contexts_of(g)), g))
    return ranked[:k]


def cmd_analyze(cfg):
    table = _load_embeddings(cfg)
    out = cfg.out / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    try:
        cells = analysis.cell_similarity(table)
        _write(out / "cell_similarity.csv", cells.to_csv())
        _write(out / "cell_similarity.svg", cells.to_svg("cell nodes"))
    except InsufficientContexts as exc:
        print(f"warning: cell similarity skipped: {exc}", file=sys.stderr)
    for gene in cfg.genes or _default_genes(table):
        try:
            sim = analysis.protein_context_similarity(gene, table)
        except InsufficientContexts as exc:
            print(f"warning: {exc}", file=sys.stderr)
            continue
        stem = f"protein_{_safe_name(gene)}"
        _write(out / f"{stem}.csv", sim.to_csv())
        _write(out / f"{stem}.svg", sim.to_svg(gene))
    _write(out / "marker_contrast.csv", analysis.marker_contrast_csv(analysis.marker_contrast(table)))
    print(f"analysis written to {out}")


def cmd_compare(cfg):
    graph = _load_graph(cfg)
    table = _load_embeddings(cfg)
    labels = finetune.read_labels(_labels_path(cfg))
    dim = cfg.baseline_dim or table.dim
    rw = baseline.replicate_into_contexts(
        baseline.random_walk_embeddings(graph.global_ppi, dim, cfg.seed), table)
    ours = _finetune(table, labels, cfg)
    theirs = _finetune(rw, labels, cfg)
    if ours.split.test_genes != theirs.split.test_genes:
        raise RuntimeError("gene splits differ between methods")
    test = ours.split.test_genes
    m_ours = finetune.evaluate_contexts(table, ours.params, labels, test)
    m_rw = finetune.evaluate_contexts(rw, theirs.params, labels, test)
    report = analysis.compare_models(m_ours, m_rw)
    out = cfg.out / "compare"
    _write(out / "comparison.csv", report.to_csv("contextual", "random_walk"))
    _write(out / "comparison.json", report.to_json())
    _write(out / "contextual_metrics.csv", finetune.context_metrics_csv(m_ours))
    _write(out / "random_walk_metrics.csv", finetune.context_metrics_csv(m_rw))
    print(report.to_csv("contextual", "random_walk"), end="")


def _mean_column(path, column):
    with open(path, newline="") as fh:
        vals = [float(r[column]) for r in csv.DictReader(fh) if r.get(column)]
    return sum(vals) / len(vals) if vals else None


def cmd_report(cfg):
    lines = ["# Run report", ""]
    summary = cfg.out / "summary.json"
    if summary.exists():
        s = json.loads(summary.read_text())
        lines += ["## Knowledge graph", ""]
        lines += [f"- {k}: {v}" for k, v in s.items()]
        lines.append("")
    tr = cfg.out / "pretrain" / "train_report.json"
    if tr.exists():
        r = json.loads(tr.read_text())
        lines += ["## Pretraining", "",
                  f"- epochs run: {r['epochs_run']}",
                  f"- best epoch: {r['best_epoch']}",
                  f"- mean test AUROC: {r['mean_test_auroc']}",
                  f"- config hash: {r.get('config_hash')}", ""]
    cm = cfg.out / "finetune" / "context_metrics.csv"
    if cm.exists():
        lines += ["## Fine-tuning (held-out genes, mean over contexts)", ""]
        for col in ("auroc", "auprc", "ap5", "ap10"):
            lines.append(f"- {col}: {_mean_column(cm, col)}")
        lines.append("")
    t2 = cfg.out / "compare" / "comparison.json"
    if t2.exists():
        lines += ["## Contextual vs random-walk embeddings (% of contexts won)", ""]
        for name, row in json.loads(t2.read_text()).items():
            lines.append(f"- {name}: {row['percentage']} ({row['wins']}/{row['total']})")
        lines.append("")
    if len(lines) == 2:
        raise InputMissing("run artifacts", cfg.out)
    text = "\n".join(lines)
    _write(cfg.out / "report.md", text)
    print(text, end="")


HANDLERS = {
    "build-graph": cmd_build_graph,
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="ctxppi",
        allow_abbrev=False,
        description="Context-specific protein embeddings over a two-level knowledge graph.",
        epilog="Any RunConfig setting can be overridden with --key value, e.g. --epochs 20.",
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="flat key = value run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = []
        for key in ("seed", "out", "threads"):
            v = getattr(args, key)
            if v is not None:
                overrides += [f"--{key}", str(v)]
        cfg = load_config(args.config, overrides + rest, validate=False)
        cfg.validate(need_seed=args.command != "report")
        with threadpool_limits(limits=cfg.threads):
            HANDLERS[args.command](cfg)
    except (InputMissing, GeneNotFound) as exc:
        print(f"ctxppi {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as exc:
        print(f"ctxppi {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"ctxppi {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
