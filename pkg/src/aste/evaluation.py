"""Inference, exact-match metrics, intermediate diagnostics and threshold
selection."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .corpus import GoldTriplet, Sentence, WordSpan
from .pair_stage import match_pairs, project
from .span_stage import SpanCandidate
from .triplet_stage import (
    INVALID,
    TripletPrediction,
    assemble_pair_embedding,
    classify_pairs,
    contextualize_pairs,
)

EVAL_BATCH = 32


@dataclass(frozen=True)
class MetricReport:
    precision: float
    recall: float
    f1: float
    n_gold: int
    n_pred: int
    n_correct: int

    @classmethod
    def from_counts(cls, n_gold: int, n_pred: int, n_correct: int) -> "MetricReport":
        p = n_correct / n_pred if n_pred else 0.0
        r = n_correct / n_gold if n_gold else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f, n_gold, n_pred, n_correct)

    def as_dict(self) -> dict:
        return asdict(self)


def f1_from_pr(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass(frozen=True)
class DiagnosticsReport:
    span_binary: MetricReport
    pair_layer: MetricReport
    final_4class: MetricReport
    final_binary: MetricReport
    overall: MetricReport

    def as_dict(self) -> dict:
        return {k: v.as_dict() for k, v in self.__dict__.items()}

    def to_text(self) -> str:
        lines = []
        for name, rep in self.__dict__.items():
            lines.append(f"{name}\t{rep.precision:.4f}\t{rep.recall:.4f}\t{rep.f1:.4f}")
        return "component\tprecision\trecall\tf1\n" + "\n".join(lines) + "\n"


def _as_keys(triplets: Iterable) -> set[tuple[WordSpan, WordSpan, object]]:
    out = set()
    for t in triplets:
        if isinstance(t, GoldTriplet):
            out.add((t.aspect, t.opinion, t.polarity))
        elif isinstance(t, TripletPrediction):
            out.add((t.aspect_span, t.opinion_span, t.polarity))
        else:
            out.add(tuple(t))
    return out


def triplet_prf(gold: Sequence[Iterable], pred: Sequence[Iterable]) -> MetricReport:
    """Micro-averaged exact-match P/R/F1; ``gold[k]`` and ``pred[k]`` hold
    the triplets of sentence k."""
    if len(gold) != len(pred):
        raise ValueError("gold and pred must cover the same sentences")
    n_gold = n_pred = n_correct = 0
    for g, p in zip(gold, pred):
        gk, pk = _as_keys(g), _as_keys(p)
        n_gold += len(gk)
        n_pred += len(pk)
        n_correct += len(gk & pk)
    return MetricReport.from_counts(n_gold, n_pred, n_correct)


def overlap_filter(preds: Sequence[TripletPrediction]) -> list[TripletPrediction]:
    """Greedy, most probable first: drop a prediction whose aspect overlaps
    an accepted aspect or whose opinion overlaps an accepted opinion."""
    order = sorted(
        preds,
        key=lambda p: (-p.max_prob, p.aspect_span.start, p.aspect_span.length,
                       p.opinion_span.start, p.opinion_span.length),
    )
    kept: list[TripletPrediction] = []
    for p in order:
        if any(p.aspect_span.overlaps(k.aspect_span) or p.opinion_span.overlaps(k.opinion_span)
               for k in kept):
            continue
        kept.append(p)
    return kept


# ---------------------------------------------------------------------------
# Inference


def _eval_mode(model):
    was = model.training
    model.eval()
    return was


@torch.no_grad()
def run_model(model, sentences: Sequence[Sentence], tau: float, teacher_forcing: bool = False):
    """Per-sentence intermediate results in evaluation mode."""
    was = _eval_mode(model)
    try:
        results = []
        for k in range(0, len(sentences), EVAL_BATCH):
            out = model(list(sentences[k : k + EVAL_BATCH]), tau=tau, teacher_forcing=teacher_forcing,
                        compute_loss=False, return_results=True)
            results.extend(out.results)
        return results
    finally:
        model.train(was)


def predictions_from_result(res, filter_overlaps: bool = True) -> list[TripletPrediction]:
    preds = []
    for (i, j), probs in zip(res.pairs, res.class_probs.tolist()):
        p = TripletPrediction(res.spans[i], res.spans[j], tuple(probs))
        if p.predicted_class != INVALID:
            preds.append(p)
    return overlap_filter(preds) if filter_overlaps else preds


def predict_batch(sentences: Sequence[Sentence], model, tau: float | None = None) -> list[list[TripletPrediction]]:
    tau = model.config.pair.tau_test if tau is None else tau
    return [predictions_from_result(r) for r in run_model(model, sentences, tau)]


def predict(sentence: Sentence, model, tau: float | None = None) -> list[TripletPrediction]:
    return predict_batch([sentence], model, tau)[0]


@torch.no_grad()
def predict_from_candidates(candidates: Sequence[SpanCandidate], summary: torch.Tensor, model,
                            tau: float) -> list[TripletPrediction]:
    """Unbatched pipeline on an explicit candidate list (no pair cap)."""
    was = _eval_mode(model)
    try:
        pairs = match_pairs(project(candidates, model.projector), tau)
        if not pairs:
            return []
        edges = model.config.triplet.distance_edges
        emb = [assemble_pair_embedding(p, summary, model.pair_embedder, edges) for p in pairs]
        ctx = contextualize_pairs(emb, model.contextualizer)
        preds = classify_pairs(ctx, model.classifier, [(p.aspect_span, p.opinion_span) for p in pairs])
        return overlap_filter([p for p in preds if p.predicted_class != INVALID])
    finally:
        model.train(was)


def evaluate(model, sentences: Sequence[Sentence], tau: float | None = None) -> MetricReport:
    preds = predict_batch(sentences, model, tau)
    return triplet_prf([s.triplets for s in sentences], preds)


def write_predictions(path: str | Path, sentences: Sequence[Sentence],
                      predictions: Sequence[Sequence[TripletPrediction]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s, preds in zip(sentences, predictions):
            for p in preds:
                fh.write(json.dumps({
                    "sentence_id": s.sentence_id,
                    "aspect": [p.aspect_span.start, p.aspect_span.end],
                    "opinion": [p.opinion_span.start, p.opinion_span.end],
                    "polarity": p.polarity.value,
                    "prob": round(p.max_prob, 6),
                }) + "\n")


# ---------------------------------------------------------------------------
# Diagnostics


def diagnostics(model, sentences: Sequence[Sentence], tau: float | None = None) -> DiagnosticsReport:
    """Span head, pair layer and final-classifier quality on gated pairs."""
    tau = model.config.pair.tau_test if tau is None else tau
    results = run_model(model, sentences, tau)
    span = [0, 0, 0]  # gold, pred, correct
    pair = [0, 0, 0]
    binary = [0, 0, 0]
    n_gated = n_right = 0
    pred_sets = []
    for res in results:
        s = res.sentence
        gold_spans = {t.aspect for t in s.triplets} | {t.opinion for t in s.triplets}
        gold_pairs = {(t.aspect, t.opinion): t.polarity.class_id for t in s.triplets}

        predicted = (res.validity_logits > 0).tolist()
        for sp, hit in zip(res.spans, predicted):
            g = sp in gold_spans
            span[0] += g
            span[1] += hit
            span[2] += g and hit
        # gold spans longer than max_span_length are never candidates
        span[0] += len({sp for sp in gold_spans if sp not in set(res.spans)})

        pair[0] += len(gold_pairs)
        pair[1] += len(res.pairs)
        binary[0] += len(gold_pairs)
        for (i, j), probs in zip(res.pairs, res.class_probs.tolist()):
            key = (res.spans[i], res.spans[j])
            truth = gold_pairs.get(key, INVALID)
            guess = max(range(len(probs)), key=lambda c: (probs[c], -c))
            pair[2] += truth != INVALID
            n_gated += 1
            n_right += guess == truth
            binary[1] += guess != INVALID
            binary[2] += guess != INVALID and truth != INVALID
        pred_sets.append(predictions_from_result(res))

    acc = MetricReport(*(3 * [n_right / n_gated if n_gated else 0.0]), n_gated, n_gated, n_right)
    return DiagnosticsReport(
        MetricReport.from_counts(*span),
        MetricReport.from_counts(*pair),
        acc,
        MetricReport.from_counts(*binary),
        triplet_prf([s.triplets for s in sentences], pred_sets),
    )


# ---------------------------------------------------------------------------
# Threshold curves


@dataclass(frozen=True)
class TauCurve:
    taus: tuple[float, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.taus)

    def to_text(self) -> str:
        rows = ["tau\tprecision\trecall"]
        rows += [f"{t:.6f}\t{p:.6f}\t{r:.6f}" for t, p, r in zip(self.taus, self.precision, self.recall)]
        return "\n".join(rows) + "\n"


def _pair_scores(results) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Similarities of all admissible pairs, similarities of the gold ones
    among them, and the total number of gold pairs."""
    all_sims, gold_sims, n_gold = [], [], 0
    for res in results:
        index = {sp: k for k, sp in enumerate(res.spans)}
        S = len(res.spans)
        valid = res.aspect_allowed[:, None] & ~torch.eye(S, dtype=torch.bool)
        gold = torch.zeros(S, S, dtype=torch.bool)
        pairs = {(t.aspect, t.opinion) for t in res.sentence.triplets}
        n_gold += len(pairs)
        for a, o in pairs:
            if a in index and o in index:
                gold[index[a], index[o]] = True
        all_sims.append(res.sim.double()[valid])
        gold_sims.append(res.sim.double()[valid & gold])
    cat = lambda xs: torch.cat(xs) if xs else torch.zeros(0, dtype=torch.float64)  # noqa: E731
    return cat(all_sims), cat(gold_sims), n_gold


def tau_curve_from_results(results, grid: Sequence[float]) -> TauCurve:
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("empty tau grid")
    if grid != sorted(grid):
        raise ValueError("tau grid must be sorted ascending")
    sims, gsims, n_gold = _pair_scores(results)
    taus = torch.tensor(grid, dtype=torch.float64)
    n_pred = (sims[None, :] > taus[:, None]).sum(-1).double()
    n_correct = (gsims[None, :] > taus[:, None]).sum(-1).double()
    prec = torch.where(n_pred > 0, n_correct / n_pred.clamp(min=1), torch.zeros_like(n_pred))
    rec = n_correct / n_gold if n_gold else torch.zeros_like(n_correct)
    return TauCurve(tuple(grid), tuple(prec.tolist()), tuple(rec.tolist()))


def tau_curve(model, sentences: Sequence[Sentence], grid: Sequence[float],
              teacher_forced: bool = False) -> TauCurve:
    """Pair-layer precision/recall of threshold matching at each tau.

    Similarities are computed once; the pair cap is not applied here.
    ``teacher_forced`` admits gold aspects as aspect candidates.
    """
    if not len(grid):
        raise ValueError("empty tau grid")
    return tau_curve_from_results(run_model(model, sentences, math.inf, teacher_forced), grid)


def adaptive_tau_grid(results, n: int = 50) -> list[float]:
    """Grid over the upper tail of the pair-similarity distribution.

    Quantile levels are log-spaced towards the top, where the few true
    pairs among many candidates sit.
    """
    sims, _, _ = _pair_scores(results)
    if sims.numel() == 0:
        return [0.0]
    levels = 1 - torch.logspace(-4, math.log10(0.5), n, dtype=torch.float64)
    grid = torch.quantile(sims, levels.clamp(0, 1)).tolist()
    return sorted(set(grid))


def curve_intersection(curve: TauCurve) -> int:
    """Grid index where |P - R| is smallest (highest tau on ties)."""
    gaps = [abs(p - r) for p, r in zip(curve.precision, curve.recall)]
    best = min(gaps)
    return max(k for k, g in enumerate(gaps) if g == best)


def select_tau(curve: TauCurve, knee: float = 0.02) -> float:
    """Start at the P/R intersection and walk to lower tau while each step
    loses less than ``knee`` precision; return the last accepted tau."""
    if len(curve) < 3:
        raise ValueError("need at least 3 curve samples")
    k = curve_intersection(curve)
    while k > 0 and curve.precision[k] - curve.precision[k - 1] < knee:
        k -= 1
    return curve.taus[k]


def tune_tau(model, sentences: Sequence[Sentence], grid: Sequence[float] | None = None,
             knee: float = 0.02) -> tuple[float, TauCurve]:
    """Pick the test threshold on validation data with :func:`select_tau`."""
    results = run_model(model, sentences, math.inf)
    grid = adaptive_tau_grid(results) if grid is None else grid
    curve = tau_curve_from_results(results, grid)
    if len(curve) < 3:
        return curve.taus[0], curve
    return select_tau(curve, knee), curve
