"""Pair embeddings, the order-invariant pair transformer, the 4-way
(invalid/positive/negative/neutral) classifier and the focal loss."""

from __future__ import annotations

import bisect
import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch
from torch import nn

from .corpus import CLASS_NAMES, Polarity, WordSpan
from .layers import linear_block
from .pair_stage import PairCandidate

N_CLASSES = 4
INVALID = 0
DEFAULT_DISTANCE_EDGES = (-8, -4, -1, 0, 3, 7)


@dataclass(frozen=True)
class TripletStageConfig:
    n_heads: int = 4
    n_layers: int = 1
    focal_gamma: float = 2.0
    distance_edges: tuple[int, ...] = DEFAULT_DISTANCE_EDGES
    distance_dim: int | None = None
    use_pair_transformer: bool = True

    def __post_init__(self):
        object.__setattr__(self, "distance_edges", tuple(int(e) for e in self.distance_edges))
        if list(self.distance_edges) != sorted(set(self.distance_edges)):
            raise ValueError("distance_edges must be strictly increasing")
        if self.n_heads < 1 or self.n_layers < 1:
            raise ValueError("n_heads and n_layers must be >= 1")

    @property
    def n_buckets(self) -> int:
        return len(self.distance_edges) + 1

    def dims(self, d: int, d_p: int) -> tuple[int, int, int]:
        """(d_dist, d_in, d_t) for encoder width d and projection width d_p.

        Unless fixed, d_dist is the smallest width >= 8 making d_in a
        multiple of 4 * n_heads, so d_t = d_in / 4 splits evenly over heads.
        """
        base = 2 * d_p + d
        if self.distance_dim is not None:
            d_dist = self.distance_dim
        else:
            step = 4 * self.n_heads
            d_dist = 8
            while (base + d_dist) % step:
                d_dist += 1
        d_in = base + d_dist
        if d_in % 4:
            raise ValueError(f"pair input width {d_in} not divisible by 4")
        d_t = d_in // 4
        if d_t % self.n_heads:
            raise ValueError(f"pair width {d_t} not divisible by {self.n_heads} heads")
        return d_dist, d_in, d_t


def signed_gap(aspect: WordSpan, opinion: WordSpan) -> int:
    """Words strictly between the spans; negative when the opinion comes
    first, 0 for adjacent or overlapping spans."""
    if opinion.start > aspect.end:
        return opinion.start - aspect.end - 1
    if opinion.end < aspect.start:
        return -(aspect.start - opinion.end - 1)
    return 0


def distance_bucket(aspect: WordSpan, opinion: WordSpan,
                    edges: Sequence[int] = DEFAULT_DISTANCE_EDGES) -> int:
    """Bucket index; edges are the inclusive upper bounds of all but the
    last bucket, so the default yields {<=-8, -7..-4, -3..-1, 0, 1..3, 4..7, >=8}."""
    return bisect.bisect_left(list(edges), signed_gap(aspect, opinion))


@dataclass
class TripletPrediction:
    aspect_span: WordSpan
    opinion_span: WordSpan
    class_probs: tuple[float, ...]

    @property
    def predicted_class(self) -> int:
        return max(range(N_CLASSES), key=lambda c: (self.class_probs[c], -c))

    @property
    def polarity(self) -> Polarity | None:
        c = self.predicted_class
        return None if c == INVALID else Polarity.from_class_id(c)

    @property
    def max_prob(self) -> float:
        return max(self.class_probs)

    @property
    def label(self) -> str:
        return CLASS_NAMES[self.predicted_class]


class PairEmbedder(nn.Module):
    """[aspect; opinion; sentence summary; distance embedding] -> d_t."""

    def __init__(self, d: int, d_p: int, config: TripletStageConfig, dropout: float = 0.1):
        super().__init__()
        d_dist, d_in, d_t = config.dims(d, d_p)
        self.d_in, self.d_t = d_in, d_t
        self.distance = nn.Embedding(config.n_buckets, d_dist)
        self.reduce = linear_block(d_in, d_t, dropout)

    def forward(self, aspect_vecs, opinion_vecs, summary, buckets) -> torch.Tensor:
        summary = summary.expand(*aspect_vecs.shape[:-1], summary.shape[-1])
        x = torch.cat([aspect_vecs, opinion_vecs, summary, self.distance(buckets)], dim=-1)
        return self.reduce(x)


class PerPairHead(nn.Module):
    """Ablation: the pair transformer without attention, i.e. each pair
    goes through LN(x + FF(x)) on its own."""

    def __init__(self, d_t: int, n_layers: int, dropout: float = 0.1):
        super().__init__()
        self.ff = nn.ModuleList(
            nn.Sequential(nn.Linear(d_t, 2 * d_t), nn.ReLU(), nn.Dropout(dropout), nn.Linear(2 * d_t, d_t))
            for _ in range(n_layers)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(d_t) for _ in range(n_layers))

    def forward(self, x, padding_mask=None):
        for ff, norm in zip(self.ff, self.norms):
            x = norm(x + ff(x))
        return x


class PairContextualizer(nn.Module):
    """Bidirectional transformer over the set of candidate pairs; no
    positional encoding, so it is permutation equivariant."""

    def __init__(self, d_t: int, config: TripletStageConfig, dropout: float = 0.1):
        super().__init__()
        layer = nn.TransformerEncoderLayer(
            d_t, config.n_heads, dim_feedforward=2 * d_t, dropout=dropout, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, config.n_layers, enable_nested_tensor=False)

    def forward(self, x: torch.Tensor, padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.encoder(x, src_key_padding_mask=padding_mask)


def build_contextualizer(d_t: int, config: TripletStageConfig, dropout: float = 0.1) -> nn.Module:
    if config.use_pair_transformer:
        return PairContextualizer(d_t, config, dropout)
    return PerPairHead(d_t, config.n_layers, dropout)


def assemble_pair_embedding(pair: PairCandidate, sentence_summary: torch.Tensor,
                            embedder: PairEmbedder, edges: Sequence[int] = DEFAULT_DISTANCE_EDGES
                            ) -> torch.Tensor:
    bucket = torch.tensor(distance_bucket(pair.aspect_span, pair.opinion_span, edges))
    return embedder(pair.aspect_vec, pair.opinion_vec, sentence_summary, bucket)


def contextualize_pairs(embeddings: Sequence[torch.Tensor], contextualizer: nn.Module) -> list[torch.Tensor]:
    if not embeddings:
        raise ValueError("need at least one pair embedding")
    out = contextualizer(torch.stack(embeddings)[None])[0]
    return list(out)


def classify_pairs(contextualized: Sequence[torch.Tensor], classifier: nn.Module,
                   pairs: Sequence[tuple[WordSpan, WordSpan]]) -> list[TripletPrediction]:
    if not contextualized:
        return []
    probs = torch.softmax(classifier(torch.stack(contextualized)), dim=-1)
    return [
        TripletPrediction(a, o, tuple(float(p) for p in row))
        for (a, o), row in zip(pairs, probs.detach().cpu())
    ]


# ---------------------------------------------------------------------------
# Focal loss

EPS = 1e-12


def focal_loss(p_c, gamma: float = 2.0):
    """-(1 - p)^gamma * ln(p) for the probability ``p_c`` of the gold class."""
    if isinstance(p_c, torch.Tensor):
        p = p_c.clamp(min=EPS)
        return -(1 - p).pow(gamma) * torch.log(p)
    p = max(float(p_c), EPS)
    return -((1 - p) ** gamma) * math.log(p)


def focal_loss_grad(p_c: float, gamma: float = 2.0) -> float:
    """Closed-form d(focal_loss)/d(p_c)."""
    p = max(float(p_c), EPS)
    lead = gamma * (1 - p) ** (gamma - 1) * math.log(p) if gamma else 0.0
    return lead - (1 - p) ** gamma / p


def focal_loss_from_logits(logits: torch.Tensor, gold: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Per-row focal loss computed through log-softmax."""
    logp = torch.log_softmax(logits, dim=-1).gather(-1, gold[..., None]).squeeze(-1)
    p = logp.exp()
    return -(1 - p).pow(gamma) * logp
