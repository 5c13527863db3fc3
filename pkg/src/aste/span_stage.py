"""Span candidates: enumeration, max-pooled representations, the Dice-loss
validity head and CRF-based pruning of aspect candidates."""

from __future__ import annotations

import enum
import itertools
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import torch
from torch import nn

from .corpus import Sentence, WordSpan
from .layers import block_stack

log = logging.getLogger(__name__)

FORBIDDEN = -1.0e4  # score added to transitions that would break BIO well-formedness


@dataclass(frozen=True)
class SpanStageConfig:
    max_span_length: int = 8
    dice_alpha: float = 0.7
    dice_gamma: float = 1.0
    pruning_enabled: bool = True

    def __post_init__(self):
        if self.max_span_length < 1:
            raise ValueError("max_span_length must be >= 1")
        if self.dice_alpha < 0 or self.dice_gamma <= 0:
            raise ValueError("need dice_alpha >= 0 and dice_gamma > 0")


class SideMask(str, enum.Enum):
    ASPECT_AND_OPINION = "aspect_and_opinion"
    OPINION_ONLY = "opinion_only"


@dataclass
class SpanCandidate:
    span: WordSpan
    repr: torch.Tensor
    validity_logit: float
    side_mask: SideMask

    @property
    def can_be_aspect(self) -> bool:
        return self.side_mask is SideMask.ASPECT_AND_OPINION


# ---------------------------------------------------------------------------
# Enumeration and pooling


def enumerate_spans(n_words: int, max_len: int) -> list[WordSpan]:
    """All contiguous spans up to ``max_len`` words, ordered by (start, length)."""
    if n_words < 1 or max_len < 1:
        raise ValueError("n_words and max_len must be >= 1")
    return [
        WordSpan(s, s + k - 1)
        for s in range(n_words)
        for k in range(1, min(max_len, n_words - s) + 1)
    ]


def pool_span(words_repr: torch.Tensor, span: WordSpan) -> torch.Tensor:
    if span.end >= words_repr.shape[0]:
        raise IndexError(f"span {span} outside {words_repr.shape[0]} rows")
    return words_repr[span.start : span.end + 1].max(dim=0).values


def pool_spans(
    word_emb: torch.Tensor, starts: torch.Tensor, lengths: torch.Tensor, max_len: int
) -> torch.Tensor:
    """Batched max-pooling.

    ``word_emb`` is (B, N, d); ``starts``/``lengths`` are (B, S) index
    tensors (lengths >= 1). Returns (B, S, d). Uses the running maximum
    M_k[s] = max(M_{k-1}[s], e[s+k-1]) so the cost is O(L * N * d).
    """
    B, N, d = word_emb.shape
    L = min(max_len, N)
    levels = [word_emb]
    for k in range(2, L + 1):
        prev = levels[-1]
        grown = torch.maximum(prev[:, : N - k + 1], word_emb[:, k - 1 :])
        pad = word_emb.new_full((B, k - 1, d), float("-inf"))
        levels.append(torch.cat([grown, pad], dim=1))
    stacked = torch.stack(levels, dim=1).reshape(B, L * N, d)
    flat = ((lengths.clamp(1, L) - 1) * N + starts).clamp(0, L * N - 1)
    out = stacked.gather(1, flat.unsqueeze(-1).expand(-1, -1, d))
    # padded span slots may pick -inf rows; keep them finite
    return torch.where(torch.isfinite(out), out, torch.zeros_like(out))


# ---------------------------------------------------------------------------
# Validity head and Dice loss


class SpanValidityHead(nn.Module):
    """Blocks d -> d/2 -> d/4 -> d/8, then a single logit."""

    def __init__(self, d: int, dropout: float = 0.1):
        super().__init__()
        widths = [d, max(d // 2, 1), max(d // 4, 1), max(d // 8, 1)]
        self.blocks = block_stack(widths, dropout)
        self.out = nn.Linear(widths[-1], 1)

    def forward(self, span_repr: torch.Tensor) -> torch.Tensor:
        return self.out(self.blocks(span_repr)).squeeze(-1)


def span_validity(span_repr: torch.Tensor, head: nn.Module) -> torch.Tensor:
    return torch.sigmoid(head(span_repr))


def dice_loss(z_hat, z, alpha: float = 0.7, gamma: float = 1.0):
    """Self-adjusting Dice loss ``1 - DSC`` per element."""
    if not isinstance(z_hat, torch.Tensor):
        z_hat = torch.as_tensor(z_hat, dtype=torch.get_default_dtype())
    z = torch.as_tensor(z, dtype=z_hat.dtype)
    q = (1 - z_hat).pow(alpha) * z_hat
    return 1 - (2 * q * z + gamma) / (q + z + gamma)


def dice_loss_from_logits(logits: torch.Tensor, z: torch.Tensor, alpha: float = 0.7,
                          gamma: float = 1.0) -> torch.Tensor:
    """Same as :func:`dice_loss` with ``z_hat = sigmoid(logits)``.

    ``1 - z_hat`` is taken as ``sigmoid(-logits)`` so the ``(1 - z_hat)^alpha``
    factor keeps a finite gradient for confident predictions.
    """
    q = torch.sigmoid(-logits).pow(alpha) * torch.sigmoid(logits)
    z = z.to(logits.dtype)
    return 1 - (2 * q * z + gamma) / (q + z + gamma)


def dice_loss_grad(z_hat: float, z: float, alpha: float = 0.7, gamma: float = 1.0) -> float:
    """Closed-form d(dice_loss)/d(z_hat)."""
    q = (1 - z_hat) ** alpha * z_hat
    dq = (1 - z_hat) ** alpha - alpha * z_hat * (1 - z_hat) ** (alpha - 1) if z_hat < 1 else float("-inf")
    denom = q + z + gamma
    d_dsc_dq = (2 * z * denom - (2 * q * z + gamma)) / denom**2
    return -d_dsc_dq * dq


# ---------------------------------------------------------------------------
# BIO tagging with a linear-chain CRF

TAGS = ("O", "B", "I")
O, B, I = 0, 1, 2


@dataclass(frozen=True)
class BioTags:
    tags: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))
        prev = "O"
        for t in self.tags:
            if t not in TAGS:
                raise ValueError(f"unknown tag {t!r}")
            if t == "I" and prev == "O":
                raise ValueError(f"I follows O or sequence start in {self.tags}")
            prev = t

    @classmethod
    def from_ids(cls, ids: Iterable[int]) -> "BioTags":
        return cls(tuple(TAGS[i] for i in ids))

    def ids(self) -> list[int]:
        return [TAGS.index(t) for t in self.tags]

    def phrases(self) -> list[WordSpan]:
        spans, start = [], None
        for i, t in enumerate(self.tags):
            if t == "B" or (t == "I" and start is None):
                if start is not None:
                    spans.append(WordSpan(start, i - 1))
                start = i
            elif t == "O" and start is not None:
                spans.append(WordSpan(start, i - 1))
                start = None
        if start is not None:
            spans.append(WordSpan(start, len(self.tags) - 1))
        return spans


def gold_bio(sentence: Sentence) -> BioTags:
    """BIO over both aspect and opinion phrases; aspects win on overlap."""
    tags = ["O"] * len(sentence.words)
    opinions = {t.opinion for t in sentence.triplets}
    aspects = {t.aspect for t in sentence.triplets}
    for a in aspects:
        for o in opinions:
            if a.overlaps(o):
                log.debug("%s: aspect %s overlaps opinion %s", sentence.sentence_id, a, o)
    for span in sorted(opinions) + sorted(aspects):
        tags[span.start] = "B"
        for i in range(span.start + 1, span.end + 1):
            tags[i] = "I"
        # the remainder of a partly overwritten phrase starts afresh
        if span.end + 1 < len(tags) and tags[span.end + 1] == "I":
            tags[span.end + 1] = "B"
    return BioTags(tuple(tags))


def bio_constraints(dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Additive transition/start penalties forbidding O->I and start->I."""
    trans = torch.zeros(3, 3, dtype=dtype)
    trans[O, I] = FORBIDDEN
    start = torch.zeros(3, dtype=dtype)
    start[I] = FORBIDDEN
    return trans, start


def viterbi_decode(emissions: torch.Tensor, transitions: torch.Tensor,
                   start: torch.Tensor, end: torch.Tensor) -> list[int]:
    """Best tag sequence for one sentence; ``transitions[i, j]`` scores i -> j."""
    mask = torch.ones(1, emissions.shape[0], dtype=torch.bool)
    return viterbi_decode_batch(emissions[None], mask, transitions, start, end)[0]


def viterbi_decode_batch(emissions: torch.Tensor, mask: torch.Tensor, transitions: torch.Tensor,
                         start: torch.Tensor, end: torch.Tensor) -> list[list[int]]:
    Bsz, N, K = emissions.shape
    score = start[None] + emissions[:, 0]
    pointers = []
    identity = torch.arange(K).expand(Bsz, K)
    for t in range(1, N):
        cand = score[:, :, None] + transitions[None] + emissions[:, t, None, :]
        best, arg = cand.max(dim=1)
        on = mask[:, t, None]
        score = torch.where(on, best, score)
        pointers.append(torch.where(on, arg, identity))
    score = score + end[None]
    last = score.argmax(dim=1)
    path = [last]
    for ptr in reversed(pointers):
        last = ptr.gather(1, last[:, None]).squeeze(1)
        path.append(last)
    path = torch.stack(path[::-1], dim=1)
    lengths = mask.sum(dim=1).tolist()
    return [path[b, : lengths[b]].tolist() for b in range(Bsz)]


def crf_sequence_score(emissions, tags, mask, transitions, start, end) -> torch.Tensor:
    """Unnormalised score of ``tags`` (B, N); padded positions ignored."""
    Bsz, N, _ = emissions.shape
    maskf = mask.to(emissions.dtype)
    em = emissions.gather(2, tags[..., None]).squeeze(-1)
    score = start[tags[:, 0]] + em[:, 0]
    if N > 1:
        trans = transitions[tags[:, :-1], tags[:, 1:]]
        score = score + ((trans + em[:, 1:]) * maskf[:, 1:]).sum(dim=1)
    last = tags.gather(1, (mask.sum(dim=1, keepdim=True) - 1).clamp(min=0)).squeeze(1)
    return score + end[last]


def crf_log_partition(emissions, mask, transitions, start, end) -> torch.Tensor:
    alpha = start[None] + emissions[:, 0]
    for t in range(1, emissions.shape[1]):
        nxt = torch.logsumexp(alpha[:, :, None] + transitions[None], dim=1) + emissions[:, t]
        alpha = torch.where(mask[:, t, None], nxt, alpha)
    return torch.logsumexp(alpha + end[None], dim=1)


class BioCRF(nn.Module):
    """Linear-chain CRF tagger over word representations."""

    def __init__(self, d: int):
        super().__init__()
        self.emission = nn.Linear(d, 3)
        self.transitions = nn.Parameter(torch.zeros(3, 3))
        self.start = nn.Parameter(torch.zeros(3))
        self.end = nn.Parameter(torch.zeros(3))
        trans_c, start_c = bio_constraints()
        self.register_buffer("trans_constraint", trans_c, persistent=False)
        self.register_buffer("start_constraint", start_c, persistent=False)

    def scores(self, words_repr: torch.Tensor):
        em = self.emission(words_repr)
        trans = self.transitions + self.trans_constraint.to(em.dtype)
        start = self.start + self.start_constraint.to(em.dtype)
        return em, trans, start, self.end

    def nll(self, words_repr: torch.Tensor, tags: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        em, trans, start, end = self.scores(words_repr)
        return crf_log_partition(em, mask, trans, start, end) - crf_sequence_score(
            em, tags, mask, trans, start, end
        )

    @torch.no_grad()
    def decode(self, words_repr: torch.Tensor, mask: torch.Tensor) -> list[BioTags]:
        em, trans, start, end = self.scores(words_repr)
        return [BioTags.from_ids(p) for p in viterbi_decode_batch(em, mask, trans, start, end)]


def crf_tag(words_repr: torch.Tensor, crf: BioCRF) -> BioTags:
    mask = torch.ones(1, words_repr.shape[0], dtype=torch.bool)
    return crf.decode(words_repr[None], mask)[0]


def augment_tagged_spans(tags: BioTags, n_words: int) -> list[WordSpan]:
    """Each tagged phrase plus its one-word extensions to the left/right/both."""
    out = set()
    for p in tags.phrases():
        for ds, de in itertools.product((0, -1), (0, 1)):
            s, e = max(p.start + ds, 0), min(p.end + de, n_words - 1)
            out.add(WordSpan(s, e))
    return sorted(out, key=lambda sp: (sp.start, sp.length))


def build_candidates(
    spans: Sequence[WordSpan],
    span_reprs: torch.Tensor,
    validity_logits: torch.Tensor,
    config: SpanStageConfig,
    tagged: Iterable[WordSpan] = (),
    forced_aspects: Iterable[WordSpan] = (),
) -> list[SpanCandidate]:
    """Attach side masks: every span may be an opinion; only tagger spans
    (after augmentation) and ``forced_aspects`` may be aspects when pruning
    is on."""
    aspect_ok = set(tagged) | set(forced_aspects)
    out = []
    for k, span in enumerate(spans):
        both = not config.pruning_enabled or span in aspect_ok
        out.append(
            SpanCandidate(
                span,
                span_reprs[k],
                float(validity_logits[k]),
                SideMask.ASPECT_AND_OPINION if both else SideMask.OPINION_ONLY,
            )
        )
    return out
