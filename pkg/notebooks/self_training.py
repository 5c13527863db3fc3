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
# # Self-training from sentence-level sentiment
#
# A trained extractor labels unannotated sentences that carry only a
# sentence sentiment. Each extracted triple keeps its spans but takes the
# sentence's sentiment. A student then trains in three phases: pseudo
# data only, pseudo plus gold, gold only.

# %%
import torch

from aste.corpus import Polarity, ScExample, example_sentences, make_synthetic_fixture
from aste.evaluation import evaluate
from aste.model import ModelConfig
from aste.pretraining import pseudo_label, staged_train
from aste.training import TrainConfig, Trainer

torch.set_num_threads(1)

# %% [markdown]
# ## Teacher
#
# A model fitted to ten sentences is enough to show the mechanics.

# %%
gold = example_sentences() + make_synthetic_fixture(1, 8)
trainer = Trainer(ModelConfig(), TrainConfig(seed=0, batch_size=4))
trainer.fit(gold, gold, min_epochs=130, max_epochs=130, early_stopping=False)
teacher = trainer.archive(gold)
evaluate(teacher.model, gold)

# %% [markdown]
# ## Pseudo labels
#
# Every sentence is marked neutral here, so any triple the teacher finds
# comes back with NEU.

# %%
sc = [ScExample(s.words, Polarity.NEUTRAL) for s in gold]
pseudo = pseudo_label(sc, teacher, source_corpus="toy")
print(len(pseudo), "of", len(sc), "sentences labelled")
p = pseudo[0]
[(t.aspect.text(p.sentence.words), t.opinion.text(p.sentence.words), t.polarity.name) for t in p.sentence.triplets]

# %% [markdown]
# ## Staged student
#
# Each phase keeps its best-on-dev weights before the next begins.

# %%
student = staged_train(gold, gold, pseudo, (10, 10, 10), TrainConfig(seed=1, batch_size=4), ModelConfig())
student.phases, student.val_metrics
