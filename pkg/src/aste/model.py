"""The full extraction network: encoder -> spans -> pair search -> pair
transformer -> 4-way classifier, batched over sentences."""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .corpus import Sentence, WordSpan
from .encoder import EncoderSpec, Pooling, TinySpec, build_encoder
from .pair_stage import DualProjector, PairStageConfig, contrastive_loss_tensor, pair_mask
from .span_stage import (
    BioCRF,
    SpanStageConfig,
    SpanValidityHead,
    augment_tagged_spans,
    dice_loss_from_logits,
    enumerate_spans,
    gold_bio,
    pool_spans,
)
from .triplet_stage import (
    N_CLASSES,
    PairEmbedder,
    TripletStageConfig,
    build_contextualizer,
    distance_bucket,
    focal_loss_from_logits,
)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec(tiny_spec=TinySpec()))
    span: SpanStageConfig = field(default_factory=SpanStageConfig)
    pair: PairStageConfig = field(default_factory=PairStageConfig)
    triplet: TripletStageConfig = field(default_factory=TripletStageConfig)
    dropout: float = 0.1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["pooling"] = self.encoder.pooling.value
        d["pair"]["ao_convention"] = self.pair.ao_convention.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d["encoder"])
        if enc.get("tiny_spec") is not None:
            enc["tiny_spec"] = TinySpec(**enc["tiny_spec"])
        enc["pooling"] = Pooling(enc.get("pooling", "first_subword"))
        trip = dict(d["triplet"])
        trip["distance_edges"] = tuple(trip["distance_edges"])
        return cls(
            EncoderSpec(**enc),
            SpanStageConfig(**d["span"]),
            PairStageConfig(**d["pair"]),
            TripletStageConfig(**trip),
            d.get("dropout", 0.1),
        )


@dataclass(frozen=True)
class SentenceFeatures:
    """Gold-derived, parameter-free per-sentence tensors inputs."""

    spans: tuple[WordSpan, ...]
    gold_valid: tuple[bool, ...]
    gold_pairs: tuple[tuple[int, int, int], ...]  # (aspect idx, opinion idx, class id)
    gold_aspects: tuple[int, ...]
    bio: tuple[int, ...]

    def index(self) -> dict[WordSpan, int]:
        return {sp: k for k, sp in enumerate(self.spans)}


@functools.lru_cache(maxsize=200_000)
def sentence_features(sentence: Sentence, max_len: int) -> SentenceFeatures:
    spans = tuple(enumerate_spans(len(sentence.words), max_len))
    index = {sp: k for k, sp in enumerate(spans)}
    gold_spans = {t.aspect for t in sentence.triplets} | {t.opinion for t in sentence.triplets}
    pairs = tuple(
        (index[t.aspect], index[t.opinion], t.polarity.class_id)
        for t in sentence.triplets
        if t.aspect in index and t.opinion in index and t.aspect != t.opinion
    )
    return SentenceFeatures(
        spans,
        tuple(sp in gold_spans for sp in spans),
        pairs,
        tuple(sorted({i for i, _, _ in pairs})),
        tuple(gold_bio(sentence).ids()),
    )


@dataclass
class SentenceResult:
    """Detached per-sentence intermediates, for inference and diagnostics."""

    sentence: Sentence
    spans: list[WordSpan]
    validity_logits: torch.Tensor  # (S,)
    aspect_allowed: torch.Tensor  # (S,) bool
    sim: torch.Tensor  # (S, S)
    pairs: list[tuple[int, int]]
    class_probs: torch.Tensor  # (P, 4)
    summary: torch.Tensor  # (d,)
    aspect_vecs: torch.Tensor  # (S, d_p)
    opinion_vecs: torch.Tensor  # (S, d_p)


@dataclass
class ForwardOutput:
    total: torch.Tensor
    parts: dict[str, torch.Tensor]
    results: list[SentenceResult] | None = None


class ASTEModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.encoder = build_encoder(config.encoder, seed)
            d = self.encoder.width
            p = config.dropout
            self.validity = SpanValidityHead(d, p)
            self.crf = BioCRF(d)
            self.projector = DualProjector(d, p)
            self.pair_embedder = PairEmbedder(d, self.projector.d_out, config.triplet, p)
            self.contextualizer = build_contextualizer(self.pair_embedder.d_t, config.triplet, p)
            self.classifier = nn.Linear(self.pair_embedder.d_t, N_CLASSES)

    @property
    def width(self) -> int:
        return self.encoder.width

    def _select_pairs(self, sel: torch.Tensor, sim: torch.Tensor, gold: torch.Tensor) -> list[tuple[int, int]]:
        """Selected (i, j) in row-major order, capped at ``max_pairs`` keeping
        gold pairs first and then the most similar ones."""
        idx = torch.nonzero(sel)
        cap = self.config.pair.max_pairs
        if idx.shape[0] > cap:
            is_gold = gold[idx[:, 0], idx[:, 1]]
            scores = sim[idx[:, 0], idx[:, 1]]
            key = torch.where(is_gold, torch.full_like(scores, float("inf")), scores)
            keep = torch.sort(key, descending=True, stable=True).indices[:cap]
            idx = idx[torch.sort(keep).values]
        return [(int(i), int(j)) for i, j in idx.tolist()]

    def forward(
        self,
        sentences: list[Sentence],
        *,
        tau: float,
        teacher_forcing: bool = False,
        compute_loss: bool = True,
        return_results: bool = False,
    ) -> ForwardOutput:
        cfg = self.config
        L = cfg.span.max_span_length
        feats = [sentence_features(s, L) for s in sentences]
        enc = self.encoder([s.words for s in sentences])
        E, wmask, summary = enc.word_embeddings, enc.word_mask, enc.sentence_embedding
        Bn, N, _ = E.shape
        S = max(len(f.spans) for f in feats)
        dev = E.device

        starts = torch.zeros(Bn, S, dtype=torch.long)
        lengths = torch.ones(Bn, S, dtype=torch.long)
        smask = torch.zeros(Bn, S, dtype=torch.bool)
        gold_valid = torch.zeros(Bn, S)
        gold_cls = torch.zeros(Bn, S, S, dtype=torch.long)
        bio = torch.zeros(Bn, N, dtype=torch.long)
        for b, f in enumerate(feats):
            k = len(f.spans)
            starts[b, :k] = torch.tensor([sp.start for sp in f.spans])
            lengths[b, :k] = torch.tensor([sp.length for sp in f.spans])
            smask[b, :k] = True
            gold_valid[b, :k] = torch.tensor(f.gold_valid, dtype=torch.float)
            for i, j, c in f.gold_pairs:
                gold_cls[b, i, j] = c
            bio[b, : len(f.bio)] = torch.tensor(f.bio)
        gold = gold_cls > 0

        R = pool_spans(E, starts, lengths, L)
        valid_logits = self.validity(R)

        if cfg.span.pruning_enabled:
            aspect_allowed = torch.zeros(Bn, S, dtype=torch.bool)
            decoded = self.crf.decode(E.detach(), wmask)
            for b, (f, tags) in enumerate(zip(feats, decoded)):
                index = f.index()
                for sp in augment_tagged_spans(tags, len(tags.tags)):
                    if sp in index:
                        aspect_allowed[b, index[sp]] = True
        else:
            aspect_allowed = smask.clone()
        if teacher_forcing:
            for b, f in enumerate(feats):
                aspect_allowed[b, list(f.gold_aspects)] = True
        aspect_allowed &= smask

        A, O = self.projector(R)
        sim = A @ O.transpose(1, 2)
        sel = pair_mask(sim.detach(), aspect_allowed, smask, tau)
        if teacher_forcing:
            sel |= gold & aspect_allowed[:, :, None]
        pair_lists = [self._select_pairs(sel[b], sim[b].detach(), gold[b]) for b in range(Bn)]

        P = max(len(p) for p in pair_lists)
        logits = None
        if P > 0:
            bi = torch.zeros(Bn, P, dtype=torch.long)
            ii = torch.zeros(Bn, P, dtype=torch.long)
            jj = torch.zeros(Bn, P, dtype=torch.long)
            buckets = torch.zeros(Bn, P, dtype=torch.long)
            pvalid = torch.zeros(Bn, P, dtype=torch.bool)
            edges = cfg.triplet.distance_edges
            for b, (f, plist) in enumerate(zip(feats, pair_lists)):
                bi[b] = b
                for k, (i, j) in enumerate(plist):
                    ii[b, k], jj[b, k] = i, j
                    buckets[b, k] = distance_bucket(f.spans[i], f.spans[j], edges)
                pvalid[b, : len(plist)] = True
            X = self.pair_embedder(A[bi, ii], O[bi, jj], summary[:, None, :], buckets)
            rows = torch.tensor([b for b in range(Bn) if pair_lists[b]])
            ctx = self.contextualizer(X[rows], ~pvalid[rows])
            logits = X.new_zeros(Bn, P, N_CLASSES)
            logits = logits.index_copy(0, rows, self.classifier(ctx))

        zero = E.new_zeros(())
        if compute_loss:
            dice = (dice_loss_from_logits(valid_logits, gold_valid, cfg.span.dice_alpha,
                                          cfg.span.dice_gamma) * smask).sum(-1)
            ao = contrastive_loss_tensor(
                sim, aspect_allowed, smask, gold, cfg.pair.n_hard_negatives,
                cfg.pair.lambda_const, cfg.pair.ao_convention,
            )
            crf = self.crf.nll(E, bio, wmask)
            aste = E.new_zeros(Bn)
            if logits is not None:
                tgt = gold_cls[bi, ii, jj]
                fl = focal_loss_from_logits(logits, tgt, cfg.triplet.focal_gamma)
                aste = (fl * pvalid).sum(-1)
            parts = {"aste": aste.mean(), "span_sel": dice.mean(), "ao": ao.mean(), "crf": crf.mean()}
            total = parts["aste"] + parts["span_sel"] + parts["ao"] + parts["crf"]
        else:
            parts, total = {}, zero

        results = None
        if return_results:
            results = []
            probs = torch.softmax(logits, -1).detach() if logits is not None else None
            for b, (s, f, plist) in enumerate(zip(sentences, feats, pair_lists)):
                k = len(f.spans)
                results.append(SentenceResult(
                    s, list(f.spans), valid_logits[b, :k].detach(), aspect_allowed[b, :k],
                    sim[b, :k, :k].detach(), plist,
                    probs[b, : len(plist)] if probs is not None else torch.zeros(0, N_CLASSES),
                    summary[b].detach(), A[b, :k].detach(), O[b, :k].detach(),
                ))
        return ForwardOutput(total, parts, results)
