import itertools
import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from aste.corpus import Sentence, WordSpan, example_sentences, parse_aste_line
from aste.span_stage import (
    BioCRF,
    BioTags,
    SideMask,
    SpanStageConfig,
    SpanValidityHead,
    augment_tagged_spans,
    bio_constraints,
    build_candidates,
    crf_log_partition,
    crf_sequence_score,
    crf_tag,
    dice_loss,
    dice_loss_from_logits,
    dice_loss_grad,
    enumerate_spans,
    gold_bio,
    pool_span,
    pool_spans,
    span_validity,
    viterbi_decode,
)


def brute_force_spans(n, L):
    return {(s, e) for s in range(n) for e in range(s, n) if e - s + 1 <= L}


class TestEnumeration:
    @pytest.mark.parametrize("n,L", [(n, L) for n in range(1, 13) for L in range(1, n + 1)])
    def test_count_law(self, n, L):
        spans = enumerate_spans(n, L)
        assert len(spans) == n * L - L * (L - 1) // 2
        assert {(s.start, s.end) for s in spans} == brute_force_spans(n, L)

    def test_order(self):
        assert enumerate_spans(3, 2) == [WordSpan(0, 0), WordSpan(0, 1), WordSpan(1, 1),
                                         WordSpan(1, 2), WordSpan(2, 2)]

    def test_short_sentence(self):
        assert len(enumerate_spans(2, 8)) == 3

    @pytest.mark.parametrize("n,L", [(0, 3), (3, 0)])
    def test_invalid(self, n, L):
        with pytest.raises(ValueError):
            enumerate_spans(n, L)


class TestPooling:
    def test_max_pool(self):
        e = torch.tensor([[1.0, 5.0], [3.0, 2.0], [0.0, 9.0]])
        assert torch.equal(pool_span(e, WordSpan(0, 1)), torch.tensor([3.0, 5.0]))
        with pytest.raises(IndexError):
            pool_span(e, WordSpan(2, 3))

    @given(st.integers(1, 9), st.integers(1, 5), st.integers(0, 2**16))
    def test_batched_equals_loop(self, n, L, seed):
        g = torch.Generator().manual_seed(seed)
        e = torch.randn(2, n, 4, generator=g)
        spans = enumerate_spans(n, L)
        starts = torch.tensor([[sp.start for sp in spans]] * 2)
        lengths = torch.tensor([[sp.length for sp in spans]] * 2)
        out = pool_spans(e, starts, lengths, L)
        for b in range(2):
            for k, sp in enumerate(spans):
                assert torch.equal(out[b, k], pool_span(e[b], sp))


class TestDice:
    def test_hand_value(self):
        # q = 0.5^0.7 * 0.5; 1 - (2q + 1) / (q + 2)
        q = 0.5**0.7 * 0.5
        half = torch.tensor(0.5, dtype=torch.float64)
        assert float(dice_loss(half, 1.0)) == pytest.approx(1 - (2 * q + 1) / (q + 2), abs=1e-12)
        assert float(dice_loss(0.5, 1.0, 0.7, 1.0)) == pytest.approx(0.2999, abs=1e-3)

    def test_gold_negative_zero_prediction(self):
        assert float(dice_loss(0.0, 0.0)) == pytest.approx(0.0)

    def test_logits_route(self):
        x = torch.linspace(-6, 6, 25, dtype=torch.float64)
        for z in (0.0, 1.0):
            zt = torch.full_like(x, z)
            assert torch.allclose(dice_loss_from_logits(x, zt), dice_loss(torch.sigmoid(x), zt), atol=1e-12)

    @given(st.floats(0.01, 0.99), st.sampled_from([0.0, 1.0]), st.floats(0.1, 1.5), st.floats(0.1, 2.0))
    def test_grad_matches_central_difference(self, zh, z, alpha, gamma):
        h = 1e-6
        fd = (float(dice_loss(torch.tensor(zh + h, dtype=torch.float64), z, alpha, gamma))
              - float(dice_loss(torch.tensor(zh - h, dtype=torch.float64), z, alpha, gamma))) / (2 * h)
        assert dice_loss_grad(zh, z, alpha, gamma) == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_logit_gradcheck(self):
        x = torch.randn(12, dtype=torch.float64, requires_grad=True)
        z = (torch.rand(12) > 0.5).double()
        assert torch.autograd.gradcheck(lambda v: dice_loss_from_logits(v, z).sum(), (x,))

    @given(st.floats(0.0, 1.0), st.sampled_from([0.0, 1.0]))
    def test_bounded(self, zh, z):
        v = float(dice_loss(zh, z))
        assert -1e-12 <= v <= 1


class TestHead:
    def test_shapes(self):
        head = SpanValidityHead(32)
        assert [m.out_features for m in head.blocks.modules() if isinstance(m, torch.nn.Linear)] == [16, 8, 4]
        out = span_validity(torch.randn(5, 32), head)
        assert out.shape == (5,) and ((out > 0) & (out < 1)).all()


class TestBio:
    def test_gold_example(self):
        s1, s2 = example_sentences()
        assert gold_bio(s1).tags == ("O", "B", "O", "B", "O", "O", "B", "O", "B", "O")
        assert gold_bio(s2).tags == ("O", "B", "O", "B", "O", "B", "I", "O")

    def test_aspect_wins_overlap(self):
        s = parse_aste_line("a b c d####[([1, 2], [2, 3], 'POS')]")
        assert gold_bio(s).tags == ("O", "B", "I", "B")

    def test_invalid_sequences(self):
        with pytest.raises(ValueError):
            BioTags(("I", "O"))
        with pytest.raises(ValueError):
            BioTags(("B", "O", "I"))
        with pytest.raises(ValueError):
            BioTags(("X",))

    def test_phrases(self):
        assert BioTags(("B", "I", "B", "O", "B")).phrases() == [WordSpan(0, 1), WordSpan(2, 2), WordSpan(4, 4)]

    def test_ids_round_trip(self):
        t = BioTags(("O", "B", "I"))
        assert t.ids() == [0, 1, 2] and BioTags.from_ids(t.ids()) == t


def _exhaustive_best(em, trans, start, end):
    n = em.shape[0]
    best, arg = -math.inf, None
    for seq in itertools.product(range(3), repeat=n):
        s = start[seq[0]] + em[0, seq[0]]
        for t in range(1, n):
            s = s + trans[seq[t - 1], seq[t]] + em[t, seq[t]]
        s = float(s + end[seq[-1]])
        if s > best:
            best, arg = s, list(seq)
    return arg, best


def _params(g, n):
    em = torch.randn(n, 3, generator=g, dtype=torch.float64) * 2
    trans = torch.randn(3, 3, generator=g, dtype=torch.float64)
    start = torch.randn(3, generator=g, dtype=torch.float64)
    end = torch.randn(3, generator=g, dtype=torch.float64)
    tc, sc = bio_constraints(torch.float64)
    return em, trans + tc, start + sc, end


class TestCRF:
    @pytest.mark.parametrize("seed", range(50))
    def test_viterbi_is_exhaustive_argmax(self, seed):
        g = torch.Generator().manual_seed(seed)
        for n in range(1, 7):
            em, trans, start, end = _params(g, n)
            path = viterbi_decode(em, trans, start, end)
            _, best = _exhaustive_best(em, trans, start, end)
            score = crf_sequence_score(em[None], torch.tensor([path]), torch.ones(1, n, dtype=torch.bool),
                                       trans, start, end)
            assert float(score) == pytest.approx(best, abs=1e-9)
            BioTags.from_ids(path)  # never violates the constraints

    @pytest.mark.parametrize("seed", range(5))
    def test_partition_is_logsumexp_over_paths(self, seed):
        g = torch.Generator().manual_seed(seed)
        n = 5
        em, trans, start, end = _params(g, n)
        mask = torch.ones(1, n, dtype=torch.bool)
        scores = [
            crf_sequence_score(em[None], torch.tensor([seq]), mask, trans, start, end)
            for seq in itertools.product(range(3), repeat=n)
        ]
        ref = torch.logsumexp(torch.cat(scores), 0)
        assert float(crf_log_partition(em[None], mask, trans, start, end)) == pytest.approx(float(ref), abs=1e-9)

    def test_padding_ignored(self):
        g = torch.Generator().manual_seed(0)
        em, trans, start, end = _params(g, 6)
        mask = torch.tensor([[True] * 4 + [False] * 2])
        full = crf_log_partition(em[None, :4], torch.ones(1, 4, dtype=torch.bool), trans, start, end)
        assert torch.allclose(crf_log_partition(em[None], mask, trans, start, end), full)

    def test_nll_non_negative_and_trainable(self):
        torch.manual_seed(0)
        crf = BioCRF(8)
        x = torch.randn(2, 5, 8)
        tags = torch.tensor([[0, 1, 2, 0, 1], [1, 0, 0, 0, 0]])
        mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
        nll = crf.nll(x, tags, mask)
        assert (nll >= 0).all()
        opt = torch.optim.Adam(crf.parameters(), lr=0.1)
        for _ in range(100):
            opt.zero_grad()
            crf.nll(x, tags, mask).sum().backward()
            opt.step()
        decoded = crf.decode(x, mask)
        assert decoded[0].ids() == [0, 1, 2, 0, 1] and decoded[1].ids() == [1, 0, 0]

    def test_crf_tag_single(self):
        crf = BioCRF(4)
        assert len(crf_tag(torch.randn(7, 4), crf).tags) == 7


class TestCandidates:
    def test_augmentation(self):
        spans = augment_tagged_spans(BioTags(("O", "B", "O", "O")), 4)
        assert spans == [WordSpan(0, 1), WordSpan(0, 2), WordSpan(1, 1), WordSpan(1, 2)]

    def test_augmentation_clips_at_edges(self):
        spans = augment_tagged_spans(BioTags(("B",)), 1)
        assert spans == [WordSpan(0, 0)]

    def _cands(self, pruning, tagged=(), forced=()):
        spans = enumerate_spans(4, 2)
        reprs = torch.randn(len(spans), 6)
        cfg = SpanStageConfig(pruning_enabled=pruning)
        return build_candidates(spans, reprs, torch.zeros(len(spans)), cfg, tagged, forced)

    def test_pruning_masks(self):
        cands = self._cands(True, tagged=[WordSpan(1, 1)], forced=[WordSpan(3, 3)])
        both = {c.span for c in cands if c.side_mask is SideMask.ASPECT_AND_OPINION}
        assert both == {WordSpan(1, 1), WordSpan(3, 3)}

    def test_no_pruning(self):
        assert all(c.can_be_aspect for c in self._cands(False))

    def test_teacher_forced_aspect_always_allowed(self):
        s = example_sentences()[0]
        spans = enumerate_spans(len(s), 8)
        gold_aspects = [t.aspect for t in s.triplets]
        cands = build_candidates(spans, torch.randn(len(spans), 4), torch.zeros(len(spans)),
                                 SpanStageConfig(), (), gold_aspects)
        allowed = {c.span for c in cands if c.can_be_aspect}
        assert set(gold_aspects) <= allowed

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SpanStageConfig(max_span_length=0)


def test_sentence_fixture_is_valid():
    assert Sentence.from_text("a b").words == ("a", "b")
