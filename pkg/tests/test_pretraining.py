import json

import pytest
import torch

from aste.corpus import Polarity, ScExample, Sentence, example_sentences, make_synthetic_fixture, parse_aste_file
from aste.evaluation import predict_batch
from aste.pretraining import (
    LanguageMismatchError,
    PseudoLabeledSentence,
    pseudo_label,
    staged_train,
    write_pseudo_corpus,
)
from aste.training import TrainConfig, train
from conftest import small_config

GOLD = make_synthetic_fixture(5, 12)
DEV = make_synthetic_fixture(6, 6)
QUICK = TrainConfig(batch_size=4, seed=1)


def flip(p: Polarity) -> Polarity:
    return Polarity.NEGATIVE if p is Polarity.POSITIVE else Polarity.POSITIVE


@pytest.fixture(scope="module")
def teacher(overfit_trainer, overfit_fixture):
    return overfit_trainer.archive(overfit_fixture)


@pytest.fixture(scope="module")
def sc_corpus(overfit_fixture):
    # sentiment labels deliberately disagree with the teacher's polarities
    out = [ScExample(s.words, flip(s.triplets[0].polarity)) for s in overfit_fixture]
    return out + [ScExample(("zzz", "qqq"), Polarity.NEUTRAL)]


def test_substitution_invariant(teacher, sc_corpus):
    pseudo = pseudo_label(sc_corpus, teacher, source_corpus="sc-test")
    assert 0 < len(pseudo) <= len(sc_corpus)
    by_words = {ex.words: ex.sentence_sentiment for ex in sc_corpus}
    for p in pseudo:
        assert p.sentence.triplets
        assert all(t.polarity is by_words[p.sentence.words] for t in p.sentence.triplets)
        assert p.provenance["source_corpus"] == "sc-test"


def test_spans_come_from_teacher(teacher, sc_corpus):
    pseudo = {p.sentence.words: p for p in pseudo_label(sc_corpus, teacher)}
    sents = [Sentence(ex.words) for ex in sc_corpus]
    for s, preds in zip(sents, predict_batch(sents, teacher.model)):
        if not preds:
            assert s.words not in pseudo
            continue
        got = {(t.aspect, t.opinion) for t in pseudo[s.words].sentence.triplets}
        assert got == {(p.aspect_span, p.opinion_span) for p in preds}


def test_language_mismatch(teacher, sc_corpus):
    with pytest.raises(LanguageMismatchError):
        pseudo_label(sc_corpus, teacher, language="xx")
    assert pseudo_label(sc_corpus[:1], teacher, language=teacher.model_config.encoder.language) is not None


def test_sidecar(teacher, sc_corpus, tmp_path):
    pseudo = pseudo_label(sc_corpus, teacher, source_corpus="sc", teacher_id="t0")
    sidecar = write_pseudo_corpus(tmp_path / "pseudo.txt", pseudo)
    assert sidecar.name == "pseudo.txt.provenance.json"
    meta = json.loads(sidecar.read_text())
    assert meta == {"teacher_archive_id": "t0", "source_corpus": "sc", "n_sentences": len(pseudo)}
    back = parse_aste_file(tmp_path / "pseudo.txt")
    assert [s.triplets for s in back] == [p.sentence.triplets for p in pseudo]


def test_gold_only_schedule_equals_plain_training():
    staged = staged_train(GOLD, DEV, [], phases=(0, 0, 2), config=QUICK, model_config=small_config())
    cfg = TrainConfig(min_epochs=2, max_epochs=2, batch_size=4, seed=1)
    plain = train(GOLD, DEV, cfg, small_config())
    for a, b in zip(staged.model.state_dict().values(), plain.model.state_dict().values()):
        assert torch.equal(a, b)
    assert staged.provenance["phases"] == {"pretrain": 0, "mixed": 0, "gold": 2}


def test_three_phases_recorded():
    pseudo = [PseudoLabeledSentence(s) for s in example_sentences()]
    arch = staged_train(GOLD, DEV, pseudo, phases=(1, 1, 1), config=QUICK, model_config=small_config())
    assert [p["phase"] for p in arch.phases] == ["pretrain", "mixed", "gold"]
    assert [r["phase"] for r in arch.history] == ["pretrain", "mixed", "gold"]
    assert arch.provenance["n_pseudo"] == 2


@pytest.mark.parametrize("phases", [(1, 1), (0, 0, 0), (-1, 1, 1)])
def test_bad_phases(phases):
    with pytest.raises(ValueError):
        staged_train(GOLD, DEV, [], phases=phases, config=QUICK, model_config=small_config())


def test_missing_pseudo_corpus():
    with pytest.raises(ValueError, match="pseudo"):
        staged_train(GOLD, DEV, [], phases=(1, 0, 1), config=QUICK, model_config=small_config())
