# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Quickstart: triplet extraction on a toy corpus
#
# We fit the default tiny encoder to a handful of sentences, inspect the
# extracted (aspect, opinion, sentiment) triples, and look at how the
# matching threshold trades precision for recall.
# A full run takes about half a minute on one CPU core.

# %%
import numpy as np
import torch

from aste.corpus import compute_stats, example_sentences, make_synthetic_fixture
from aste.evaluation import diagnostics, evaluate, predict, run_model, tau_curve
from aste.model import ModelConfig
from aste.pair_stage import DualProjection, export_search_space
from aste.training import TrainConfig, Trainer

torch.set_num_threads(1)

# %% [markdown]
# ## Data
#
# Two hand-written restaurant sentences plus eight synthetic ones.

# %%
data = example_sentences() + make_synthetic_fixture(1, 8)
for s in data[:2]:
    print(" ".join(s.words))
    for t in s.triplets:
        print("   ", t.aspect.text(s.words), "|", t.opinion.text(s.words), "|", t.polarity.name)
compute_stats(data)

# %% [markdown]
# ## Fit
#
# Training on the same sentences we evaluate on; this is a smoke test of
# capacity, not of generalization. The matching threshold is re-tuned on
# the dev split after every epoch.

# %%
trainer = Trainer(ModelConfig(), TrainConfig(seed=0, batch_size=4))
trainer.fit(data, data, min_epochs=130, max_epochs=130, early_stopping=False)
model = trainer.model.eval()
print("tau_test", model.config.pair.tau_test, "tau_train", model.config.pair.tau_train)
evaluate(model, data)

# %%
s = data[1]
for p in predict(s, model):
    print(p.aspect_span.text(s.words), "|", p.opinion_span.text(s.words), "|", p.polarity.name)

# %% [markdown]
# Per-stage diagnostics isolate where errors come from.

# %%
diagnostics(model, data)

# %% [markdown]
# ## Threshold sweep
#
# Pairs are kept when their similarity exceeds the threshold, so recall can
# only fall as it rises.

# %%
grid = np.linspace(-6, 6, 25)
curve = tau_curve(model, data, grid)
print(curve.to_text())

# %% [markdown]
# ## Search space
#
# 2-D PCA of every aspect and opinion vector in one sentence. Gold phrases
# should sit apart from the rest.

# %%
res = run_model(model, [s], float("inf"))[0]
projections = [
    DualProjection(sp, res.aspect_vecs[k] if bool(res.aspect_allowed[k]) else None, res.opinion_vecs[k])
    for k, sp in enumerate(res.spans)
]
points = export_search_space(projections, s.words, [(t.aspect, t.opinion) for t in s.triplets])
[(p.role, p.span_text, round(p.x, 2), round(p.y, 2)) for p in points if p.gold_validity == "valid"]
