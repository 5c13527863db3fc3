import dataclasses
import math

import pytest
import torch

from aste.corpus import example_sentences, make_synthetic_fixture
from aste.model import ASTEModel, ModelConfig, sentence_features
from aste.pair_stage import PairStageConfig
from conftest import small_config


def with_pair(cfg: ModelConfig, **kw) -> ModelConfig:
    return dataclasses.replace(cfg, pair=dataclasses.replace(cfg.pair, **kw))


def test_features_example():
    s = example_sentences()[1]
    f = sentence_features(s, 8)
    index = f.index()
    assert len(f.spans) == 8 * 8 - 28
    assert sum(f.gold_valid) == 3
    got = {(f.spans[i].text(s.words), f.spans[j].text(s.words), c) for i, j, c in f.gold_pairs}
    assert got == {("menu", "limited", 2), ("menu", "extremely pricy", 2)}
    assert f.gold_aspects == (index[s.triplets[0].aspect],)


def test_teacher_forcing_injects_gold(small_model):
    sents = example_sentences()
    out = small_model(sents, tau=math.inf, teacher_forcing=True, return_results=True)
    for res in out.results:
        got = {(res.spans[i], res.spans[j]) for i, j in res.pairs}
        gold = {(t.aspect, t.opinion) for t in res.sentence.triplets}
        assert got == gold
        assert all(bool(res.aspect_allowed[res.spans.index(t.aspect)]) for t in res.sentence.triplets)
    plain = small_model(sents, tau=math.inf, return_results=True)
    assert all(r.pairs == [] for r in plain.results)


def test_loss_parts_sum_and_sign(small_model):
    small_model.train()
    out = small_model(example_sentences() + make_synthetic_fixture(0, 4), tau=0.0, teacher_forcing=True)
    assert set(out.parts) == {"aste", "span_sel", "ao", "crf"}
    assert all(float(v.detach()) >= 0 for v in out.parts.values())
    assert float(out.total.detach()) == pytest.approx(sum(float(v.detach()) for v in out.parts.values()), rel=1e-6)


def test_cap_keeps_gold_pairs():
    model = ASTEModel(with_pair(small_config(), max_pairs=3), seed=0)
    model.eval()
    out = model(example_sentences(), tau=-math.inf, teacher_forcing=True, return_results=True)
    for res in out.results:
        assert len(res.pairs) == 3
        got = {(res.spans[i], res.spans[j]) for i, j in res.pairs}
        assert {(t.aspect, t.opinion) for t in res.sentence.triplets} <= got
        assert res.pairs == sorted(res.pairs)


def test_batch_composition_does_not_change_results(small_model):
    data = make_synthetic_fixture(2, 5)
    together = small_model(data, tau=0.0, compute_loss=False, return_results=True).results
    for s, res in zip(data, together):
        alone = small_model([s], tau=0.0, compute_loss=False, return_results=True).results[0]
        assert torch.allclose(alone.sim, res.sim, atol=1e-5)
        assert torch.allclose(alone.validity_logits, res.validity_logits, atol=1e-5)


def test_descent_reduces_loss():
    torch.manual_seed(0)
    model = ASTEModel(dataclasses.replace(small_config(), dropout=0.0), seed=0)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    batch = example_sentences()
    first = None
    for _ in range(15):
        opt.zero_grad()
        out = model(batch, tau=0.0, teacher_forcing=True)
        out.total.backward()
        opt.step()
        first = float(out.total.detach()) if first is None else first
    assert float(model(batch, tau=0.0, teacher_forcing=True).total.detach()) < first


def test_no_pruning_lets_every_span_be_aspect():
    cfg = dataclasses.replace(small_config(), span=dataclasses.replace(small_config().span, pruning_enabled=False))
    model = ASTEModel(cfg, seed=0)
    res = model(example_sentences(), tau=0.0, compute_loss=False, return_results=True).results
    assert all(bool(r.aspect_allowed.all()) for r in res)


def test_config_round_trip():
    cfg = small_config(pair=PairStageConfig(ao_convention="negatives_only"))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_seeded_construction():
    a, b = ASTEModel(small_config(), seed=4), ASTEModel(small_config(), seed=4)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
