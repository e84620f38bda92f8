# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Training MCCF and looking at its hidden space
#
# A scaled-down model on a small generated set, so this runs in about a
# minute on one core.  The acceptance suite uses the full-size defaults.

# %%
from dataclasses import replace

import numpy as np

from mccf.model import ModelConfig
from mccf.pca import pca_project
from mccf.synth import GenConfig, generate_dataset
from mccf.train import TrainConfig, ablation_run, hidden_features, prepare, raw_input_matrix, train

records, graph = generate_dataset(GenConfig(n_clicks=4000, seed=2))
model_cfg = replace(ModelConfig(), embed_dim=32, wd_hidden=(64, 32), ffn_dim=32, graph_dim=16,
                    fusion_hidden=32, proj_dims=(32, 16))
prep = prepare(records, graph, model_cfg)
print(len(prep.train), "train /", len(prep.test), "test")

# %% [markdown]
# One run of the combined objective (NT-Xent plus cross entropy).

# %%
cfg = TrainConfig(epochs=5, runs=2)
params, history = train(prep.train, prep.graph, prep.model_config, cfg)
print("epoch losses", np.round(history, 4))

# %% [markdown]
# Ablations: each variant zeroes one modality block before fusion.

# %%
table = ablation_run(prep, cfg)
for v, rep in table.reports.items():
    print(f"{v:6s} auc {rep.mean['auc']:.4f}  f1 {rep.mean['f1']:.4f}")

# %% [markdown]
# Two principal components of the raw inputs versus the fusion layer.  The
# ratio of between-class distance to spread is a rough separability score.

# %%
def separation(P, labels):
    a, b = P[labels == 1], P[labels == 0]
    return np.linalg.norm(a.mean(0) - b.mean(0)) / np.sqrt(a.var(0).sum() + b.var(0).sum())


labels = prep.test.labels
for name, X in (("input", raw_input_matrix(prep.test, prep.graph, prep.model_config.page_vocab)),
                ("hidden", hidden_features(params, prep.test, prep.graph))):
    res = pca_project(X, 2)
    print(name, "explained", np.round(res.variances, 3), "separation", round(separation(res.projections, labels), 3))
