"""Pseudo-labelled ASTE data from sentence-level sentiment corpora and the
pretrain / mixed / gold-only training schedule."""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import GoldTriplet, ScExample, Sentence, write_aste_file
from .evaluation import predict_batch
from .model import ModelConfig
from .training import ModelArchive, TrainConfig, Trainer

log = logging.getLogger(__name__)

DEFAULT_PHASES = (20, 20, 10)
PHASE_NAMES = ("pretrain", "mixed", "gold")


class LanguageMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class PseudoLabeledSentence:
    sentence: Sentence
    provenance: dict = field(default_factory=dict, hash=False, compare=False)


def pseudo_label(sc_corpus: Sequence[ScExample], teacher: ModelArchive, language: str | None = None,
                 source_corpus: str = "", teacher_id: str = "") -> list[PseudoLabeledSentence]:
    """Run the teacher over sentiment-classification text and relabel every
    extracted triple with the sentence's gold sentiment.

    Sentences where the teacher finds nothing are dropped.
    """
    teacher_lang = teacher.model_config.encoder.language
    if language is not None and language != teacher_lang:
        raise LanguageMismatchError(f"corpus language {language!r} but teacher encoder is {teacher_lang!r}")
    sentences = [Sentence(ex.words, (), f"{source_corpus or 'sc'}:{k}") for k, ex in enumerate(sc_corpus)]
    preds = predict_batch(sentences, teacher.model)
    provenance = {"teacher_archive_id": teacher_id or teacher.backbone_id, "source_corpus": source_corpus}
    out = []
    for ex, sent, found in zip(sc_corpus, sentences, preds):
        if not found:
            continue
        triplets = {GoldTriplet(p.aspect_span, p.opinion_span, ex.sentence_sentiment) for p in found}
        triplets = sorted(triplets, key=lambda t: (t.aspect.start, t.aspect.end, t.opinion.start, t.opinion.end))
        out.append(PseudoLabeledSentence(Sentence(sent.words, tuple(triplets), sent.sentence_id), provenance))
    return out


def write_pseudo_corpus(path: str | Path, corpus: Sequence[PseudoLabeledSentence]) -> Path:
    """ASTE-format file plus ``<path>.provenance.json``; returns the sidecar path."""
    path = Path(path)
    write_aste_file(path, [p.sentence for p in corpus])
    sidecar = path.with_name(path.name + ".provenance.json")
    provenance = corpus[0].provenance if corpus else {}
    sidecar.write_text(json.dumps({**provenance, "n_sentences": len(corpus)}, indent=2, sort_keys=True) + "\n")
    return sidecar


def staged_train(gold_train: Sequence[Sentence], gold_dev: Sequence[Sentence],
                 pseudo: Sequence[PseudoLabeledSentence | Sentence], phases: Sequence[int] = DEFAULT_PHASES,
                 config: TrainConfig = TrainConfig(), model_config: ModelConfig = ModelConfig()) -> ModelArchive:
    """Pseudo-only, then pseudo + gold, then gold-only training of one model.

    ``phases`` gives the epoch count of each phase; a zero-length phase is
    skipped, so ``(0, 0, E)`` is plain gold training for E epochs. Each
    phase keeps its best-on-dev parameters.
    """
    phases = tuple(int(p) for p in phases)
    if len(phases) != 3:
        raise ValueError("phases must give three epoch counts (pretrain, mixed, gold)")
    if any(p < 0 for p in phases) or not any(phases):
        raise ValueError("phase lengths must be non-negative and not all zero")
    if not gold_train or not gold_dev:
        raise ValueError("empty gold split")
    pseudo_sents = [p.sentence if isinstance(p, PseudoLabeledSentence) else p for p in pseudo]
    if not pseudo_sents and (phases[0] or phases[1]):
        raise ValueError("empty pseudo-labelled corpus")

    data = {"pretrain": pseudo_sents, "mixed": pseudo_sents + list(gold_train), "gold": list(gold_train)}
    trainer = Trainer(model_config, config)
    for name, n in zip(PHASE_NAMES, phases):
        if n == 0:
            continue
        log.info("phase %s: %d epochs on %d sentences", name, n, len(data[name]))
        trainer.fit(data[name], gold_dev, min_epochs=n, max_epochs=n, phase=name)
    archive = trainer.archive(gold_dev)
    archive.provenance = {"phases": dict(zip(PHASE_NAMES, phases)), "n_pseudo": len(pseudo_sents)}
    return archive
