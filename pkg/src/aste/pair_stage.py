"""Aspect/opinion dual projections, threshold matching in the induced inner
product space and the hard-negative contrastive matching loss."""

from __future__ import annotations

import csv
import enum
from collections.abc import Collection, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import WordSpan
from .layers import block_stack
from .span_stage import SpanCandidate

_NEG = -1.0e9  # stands in for -inf inside masked reductions


class AoConvention(str, enum.Enum):
    """How the positive enters the matching-loss softmax.

    ``negatives_only``: -log(exp(pos) / sum_neg exp(neg)); unbounded below.
    ``with_positive``: -log(exp(pos) / (exp(pos) + sum_neg exp(neg))); >= 0.
    """

    NEGATIVES_ONLY = "negatives_only"
    WITH_POSITIVE = "with_positive"


@dataclass(frozen=True)
class PairStageConfig:
    tau_train: float = float("-inf")
    tau_test: float = 0.0
    n_hard_negatives: int = 4
    lambda_const: float = 0.0
    ao_convention: AoConvention = AoConvention.WITH_POSITIVE
    max_pairs: int = 64

    def __post_init__(self):
        object.__setattr__(self, "ao_convention", AoConvention(self.ao_convention))
        if self.tau_test < self.tau_train:
            raise ValueError("tau_test must be >= tau_train")
        if self.n_hard_negatives < 1:
            raise ValueError("n_hard_negatives must be >= 1")
        if self.max_pairs < 1:
            raise ValueError("max_pairs must be >= 1")


@dataclass
class DualProjection:
    span: WordSpan
    aspect_vec: torch.Tensor | None
    opinion_vec: torch.Tensor


@dataclass
class PairCandidate:
    aspect_span: WordSpan
    opinion_span: WordSpan
    similarity: float
    aspect_vec: torch.Tensor
    opinion_vec: torch.Tensor


class DualProjector(nn.Module):
    """Two stacks d -> d/2 -> d/4 -> d/2.

    The last layer is a bare affine map: projected vectors must be able to
    take either sign, and a LayerNorm over sparse ReLU outputs collapses
    many spans onto one constant vector.
    """

    def __init__(self, d: int, dropout: float = 0.1):
        super().__init__()
        self.d_out = max(d // 2, 1)
        self.aspect = self._stack(d, dropout)
        self.opinion = self._stack(d, dropout)

    def _stack(self, d: int, dropout: float) -> nn.Sequential:
        h1, h2 = max(d // 2, 1), max(d // 4, 1)
        return nn.Sequential(block_stack([d, h1, h2], dropout), nn.Linear(h2, self.d_out))

    def forward(self, span_reprs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.aspect(span_reprs), self.opinion(span_reprs)


def project(candidates: Sequence[SpanCandidate], projector: DualProjector) -> list[DualProjection]:
    if not candidates:
        return []
    reprs = torch.stack([c.repr for c in candidates])
    A, O = projector(reprs)
    return [
        DualProjection(c.span, A[k] if c.can_be_aspect else None, O[k])
        for k, c in enumerate(candidates)
    ]


# ---------------------------------------------------------------------------
# Threshold matching


def match_pairs(projections: Sequence[DualProjection], tau: float) -> list[PairCandidate]:
    """All (aspect i, opinion j) with a_i . o_j > tau, ordered by (i, j).

    A span is never paired with itself.
    """
    aspects = [(i, p) for i, p in enumerate(projections) if p.aspect_vec is not None]
    if not aspects or not projections:
        return []
    A = torch.stack([p.aspect_vec for _, p in aspects])
    O = torch.stack([p.opinion_vec for p in projections])
    sim = A @ O.T
    out = []
    for (row, (i, pa)) in enumerate(aspects):
        hits = torch.nonzero(sim[row] > tau).flatten().tolist()
        for j in hits:
            if j == i:
                continue
            po = projections[j]
            out.append(PairCandidate(pa.span, po.span, float(sim[row, j]), pa.aspect_vec, po.opinion_vec))
    return out


def pair_mask(sim: torch.Tensor, aspect_mask: torch.Tensor, opinion_mask: torch.Tensor,
              tau: float) -> torch.Tensor:
    """Tensor form of :func:`match_pairs` on (..., S, S) similarities."""
    S = sim.shape[-1]
    eye = torch.eye(S, dtype=torch.bool, device=sim.device)
    valid = aspect_mask[..., :, None] & opinion_mask[..., None, :] & ~eye
    return valid & (sim > tau)


def mine_hard_negatives(scores: torch.Tensor, allowed: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` highest-scoring allowed entries of a 1-D score
    vector; ties go to the lower index (candidate order)."""
    masked = torch.where(allowed, scores, torch.full_like(scores, float("-inf")))
    order = torch.sort(masked, descending=True, stable=True).indices
    n = int(min(k, int(allowed.sum())))
    return order[:n]


# ---------------------------------------------------------------------------
# Contrastive matching loss


def _topk_logsumexp(sim: torch.Tensor, allowed: torch.Tensor, k: int) -> torch.Tensor:
    masked = torch.where(allowed, sim, torch.full_like(sim, _NEG))
    top = torch.sort(masked, dim=-1, descending=True, stable=True).values[..., :k]
    return torch.logsumexp(top, dim=-1)


def _term(numerator: torch.Tensor, lse_neg: torch.Tensor, convention: AoConvention) -> torch.Tensor:
    if convention is AoConvention.NEGATIVES_ONLY:
        return lse_neg - numerator
    return nn.functional.softplus(lse_neg - numerator)


def contrastive_loss_tensor(
    sim: torch.Tensor,
    aspect_mask: torch.Tensor,
    opinion_mask: torch.Tensor,
    gold: torch.Tensor,
    n_hard_negatives: int = 4,
    lambda_const: float = 0.0,
    convention: AoConvention = AoConvention.WITH_POSITIVE,
) -> torch.Tensor:
    """Matching loss for similarity matrices ``sim`` (..., S, S).

    ``sim[i, j]`` is aspect i against opinion j, ``gold[i, j]`` marks gold
    pairs. Each aspect-side span contributes one term per gold partner
    (or one constant-numerator term if it has none), with the
    ``n_hard_negatives`` most similar non-partner opinions in the
    denominator; opinions are handled symmetrically. Terms without any
    available negative are dropped. Returns the per-matrix sum.
    """
    convention = AoConvention(convention)
    S = sim.shape[-1]
    eye = torch.eye(S, dtype=torch.bool, device=sim.device)
    k = min(n_hard_negatives, S)
    am, om = aspect_mask[..., :, None], opinion_mask[..., None, :]
    gold = gold & am & om & ~eye
    negs = am & om & ~eye & ~gold
    lam = torch.full_like(sim[..., 0], lambda_const)

    # aspect side: rows
    has_row = negs.any(-1)
    lse_row = _topk_logsumexp(sim, negs, k)
    pos_row = _term(sim, lse_row[..., :, None], convention)
    row_pos = torch.where(gold & has_row[..., :, None], pos_row, torch.zeros_like(sim)).sum((-1, -2))
    inval_row = aspect_mask & ~gold.any(-1) & has_row
    row_inv = torch.where(inval_row, _term(lam, lse_row, convention), torch.zeros_like(lam)).sum(-1)

    # opinion side: columns
    simT, negsT, goldT = sim.transpose(-1, -2), negs.transpose(-1, -2), gold.transpose(-1, -2)
    has_col = negsT.any(-1)
    lse_col = _topk_logsumexp(simT, negsT, k)
    pos_col = _term(simT, lse_col[..., :, None], convention)
    col_pos = torch.where(goldT & has_col[..., :, None], pos_col, torch.zeros_like(simT)).sum((-1, -2))
    inval_col = opinion_mask & ~goldT.any(-1) & has_col
    col_inv = torch.where(inval_col, _term(lam, lse_col, convention), torch.zeros_like(lam)).sum(-1)

    return row_pos + row_inv + col_pos + col_inv


def contrastive_loss(
    projections: Sequence[DualProjection],
    gold_pairs: Collection[tuple[WordSpan, WordSpan]],
    config: PairStageConfig,
) -> torch.Tensor:
    spans = [p.span for p in projections]
    index = {sp: k for k, sp in enumerate(spans)}
    width = projections[0].opinion_vec.shape[-1]
    A = torch.stack([
        p.aspect_vec if p.aspect_vec is not None else p.opinion_vec.new_zeros(width)
        for p in projections
    ])
    O = torch.stack([p.opinion_vec for p in projections])
    aspect_mask = torch.tensor([p.aspect_vec is not None for p in projections])
    opinion_mask = torch.ones(len(projections), dtype=torch.bool)
    gold = torch.zeros(len(spans), len(spans), dtype=torch.bool)
    for a, o in gold_pairs:
        if a in index and o in index:
            gold[index[a], index[o]] = True
    return contrastive_loss_tensor(
        A @ O.T, aspect_mask, opinion_mask, gold,
        config.n_hard_negatives, config.lambda_const, config.ao_convention,
    )


# ---------------------------------------------------------------------------
# Search-space export


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class SearchPoint:
    x: float
    y: float
    role: str  # "aspect" | "opinion"
    gold_validity: str  # "valid" | "invalid"
    span_text: str


def pca_2d(X: np.ndarray) -> np.ndarray:
    """Project rows of X on the two leading principal components.

    Component signs are fixed so the largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    centred = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:2]
    flip = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * flip[:, None]
    out = centred @ comps.T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def export_search_space(
    projections: Sequence[DualProjection],
    words: Sequence[str],
    gold_pairs: Iterable[tuple[WordSpan, WordSpan]] = (),
) -> list[SearchPoint]:
    """PCA of all aspect and opinion vectors of one sentence, labelled by
    role and by whether the span is a gold phrase of that role."""
    gold_pairs = list(gold_pairs)
    gold_aspects = {a for a, _ in gold_pairs}
    gold_opinions = {o for _, o in gold_pairs}
    vecs, meta = [], []
    for p in projections:
        if p.aspect_vec is not None:
            vecs.append(p.aspect_vec.detach().cpu().numpy())
            meta.append(("aspect", p.span in gold_aspects, p.span))
        vecs.append(p.opinion_vec.detach().cpu().numpy())
        meta.append(("opinion", p.span in gold_opinions, p.span))
    if len(vecs) < 2 or len({v.tobytes() for v in vecs}) < 2:
        raise DegenerateGeometryError("need at least two distinct vectors for PCA")
    xy = pca_2d(np.stack(vecs))
    return [
        SearchPoint(float(x), float(y), role, "valid" if valid else "invalid", span.text(words))
        for (x, y), (role, valid, span) in zip(xy, meta)
    ]


def write_point_table(path: str | Path, points: Iterable[SearchPoint]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["x", "y", "role", "gold_validity", "span_text"])
        for p in points:
            w.writerow([f"{p.x:.6f}", f"{p.y:.6f}", p.role, p.gold_validity, p.span_text])
