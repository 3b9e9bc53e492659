"""
Pretraining embeddings and ranking contexts for a gene
======================================================

Link prediction on every subtype graph trains one set of weights shared by
all subtypes. A small classifier on the frozen embeddings then scores each
(subtype, gene) pair, which gives every labelled gene a ranking of the
subtypes it is active in.
"""

import numpy as np

from ctxppi.finetune import (
    MlpConfig, RiskLabelSet, build_finetune_dataset, evaluate_contexts, rank_contexts, train_mlp,
)
from ctxppi.model import ModelConfig
from ctxppi.pretrain import TrainConfig, embed, train
from ctxppi.synth import SyntheticSpec, generate

bundle = generate(SyntheticSpec(n_proteins=300, n_contexts=5, n_blocks=6, blocks_per_context=2,
                                n_positive=25, n_negative=25), seed=0)
graph = bundle.knowledge_graph()

# pretraining keeps the parameters of the best validation epoch
model_config = ModelConfig(latent_dim=16, seed=0)
params, report = train(graph, model_config, TrainConfig(epochs=40, seed=0))
print(f"best epoch {report.best_epoch}, mean test AUROC {report.mean_test('auroc'):.3f}")
print(report.metrics_csv())

# frozen embeddings, one row per (subtype, protein)
table = embed(graph, params, model_config, report.split)
print("embedding table:", table.n_protein_entries, "rows of width", table.dim)

# the classifier splits by gene, so no gene is seen in both train and test
labels = RiskLabelSet.from_mapping(bundle.labels)
result = train_mlp(build_finetune_dataset(table, labels), MlpConfig(epochs=200), seed=0)
per_context = evaluate_contexts(table, result.params, labels, result.split.test_genes)
auprc = [m["auprc"] for m in per_context.values() if m is not None]
print(f"held-out AUPRC averaged over subtypes: {np.mean(auprc):.3f}")

# subtypes ranked for one held-out risk gene
gene = sorted(g for g in result.split.test_genes if g in labels.positives)[0]
for s in rank_contexts(gene, table, result.params):
    print(f"{gene} in {s.context_id}: {s.score:.3f}")
