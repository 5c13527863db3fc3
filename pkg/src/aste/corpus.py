"""Sentence/triplet data types, benchmark file I/O, corpus statistics and
a synthetic review generator for desk-scale experiments.

The ASTE line format is the one used by the public benchmark releases::

    The room was fine .####[([1], [3], 'POS')]

Word indices refer to whitespace tokens of the sentence part.
"""

from __future__ import annotations

import ast
import enum
import json
import logging
import random
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

log = logging.getLogger(__name__)

SEPARATOR = "####"


class AsteFormatError(ValueError):
    """A line of an ASTE/SC file could not be parsed or failed validation."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


class Polarity(enum.Enum):
    POSITIVE = "POS"
    NEGATIVE = "NEG"
    NEUTRAL = "NEU"

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @property
    def class_id(self) -> int:
        # 0 is reserved for the "invalid" class of the triplet classifier
        return _POLARITY_ORDER.index(self) + 1

    @classmethod
    def from_class_id(cls, class_id: int) -> "Polarity":
        if not 1 <= class_id <= 3:
            raise ValueError(f"class id {class_id} is not a polarity")
        return _POLARITY_ORDER[class_id - 1]

    @classmethod
    def parse(cls, text: str) -> "Polarity":
        key = text.strip().upper()
        for member in cls:
            if key in (member.value, member.name, member.name[:3]):
                return member
        raise ValueError(f"unknown polarity {text!r}")

    def __lt__(self, other: "Polarity") -> bool:
        return _POLARITY_ORDER.index(self) < _POLARITY_ORDER.index(other)


_POLARITY_ORDER = (Polarity.POSITIVE, Polarity.NEGATIVE, Polarity.NEUTRAL)
CLASS_NAMES = ("invalid",) + tuple(p.label for p in _POLARITY_ORDER)


@dataclass(frozen=True, order=True)
class WordSpan:
    """Inclusive word interval ``[start, end]``."""

    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid span [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def indices(self) -> list[int]:
        return list(range(self.start, self.end + 1))

    def overlaps(self, other: "WordSpan") -> bool:
        return self.start <= other.end and other.start <= self.end

    def text(self, words: Sequence[str]) -> str:
        return " ".join(words[self.start : self.end + 1])

    @classmethod
    def from_indices(cls, indices: Sequence[int]) -> "WordSpan":
        idx = sorted(indices)
        if not idx:
            raise ValueError("empty index list")
        if idx != list(range(idx[0], idx[-1] + 1)):
            raise ValueError(f"index list {list(indices)} is not contiguous")
        return cls(idx[0], idx[-1])


@dataclass(frozen=True, order=True)
class GoldTriplet:
    aspect: WordSpan
    opinion: WordSpan
    polarity: Polarity


@dataclass(frozen=True)
class Sentence:
    words: tuple[str, ...]
    triplets: tuple[GoldTriplet, ...] = ()
    sentence_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "triplets", tuple(self.triplets))
        if not self.words:
            raise ValueError("sentence has no words")
        n = len(self.words)
        for t in self.triplets:
            if t.aspect.end >= n or t.opinion.end >= n:
                raise ValueError(f"triplet {t} exceeds sentence length {n}")

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def from_text(cls, text: str, sentence_id: str = "") -> "Sentence":
        return cls(tuple(text.split()), (), sentence_id)


@dataclass(frozen=True)
class ScExample:
    """Sentence-level sentiment classification example."""

    words: tuple[str, ...]
    sentence_sentiment: Polarity

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if not self.words:
            raise ValueError("example has no words")


# ---------------------------------------------------------------------------
# File formats


def parse_aste_line(line: str, line_no: int | None = None, sentence_id: str = "") -> Sentence:
    if SEPARATOR not in line:
        raise AsteFormatError(f"missing {SEPARATOR!r} separator", line_no)
    text, _, raw = line.rstrip("\n").rpartition(SEPARATOR)
    words = text.split()
    if not words:
        raise AsteFormatError("empty sentence", line_no)
    try:
        items = ast.literal_eval(raw.strip()) if raw.strip() else []
    except (ValueError, SyntaxError) as exc:
        raise AsteFormatError(f"cannot parse triplet list: {exc}", line_no) from None
    if not isinstance(items, (list, tuple)):
        raise AsteFormatError("triplet list is not a list", line_no)

    triplets: dict[tuple[WordSpan, WordSpan], GoldTriplet] = {}
    for item in items:
        if not (isinstance(item, (list, tuple)) and len(item) == 3):
            raise AsteFormatError(f"malformed triplet {item!r}", line_no)
        a_idx, o_idx, pol = item
        try:
            aspect = WordSpan.from_indices(a_idx)
            opinion = WordSpan.from_indices(o_idx)
            polarity = Polarity.parse(pol)
        except (TypeError, ValueError) as exc:
            raise AsteFormatError(str(exc), line_no) from None
        for span in (aspect, opinion):
            if span.end >= len(words):
                raise AsteFormatError(
                    f"index {span.end} out of range for {len(words)} words", line_no
                )
        key = (aspect, opinion)
        if key in triplets:
            if triplets[key].polarity != polarity:
                raise AsteFormatError(f"conflicting polarities for pair {key}", line_no)
            log.debug("line %s: duplicate triplet %s dropped", line_no, key)
            continue
        triplets[key] = GoldTriplet(aspect, opinion, polarity)
    return Sentence(tuple(words), tuple(triplets.values()), sentence_id)


def format_aste_line(sentence: Sentence) -> str:
    items = ", ".join(
        f"({t.aspect.indices()}, {t.opinion.indices()}, '{t.polarity.value}')"
        for t in sentence.triplets
    )
    return f"{sentence.text}{SEPARATOR}[{items}]"


def parse_aste_file(path: str | Path) -> list[Sentence]:
    path = Path(path)
    sentences = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            sentences.append(parse_aste_line(line, line_no, f"{path.stem}:{line_no}"))
    return sentences


def write_aste_file(path: str | Path, sentences: Iterable[Sentence]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(format_aste_line(s) + "\n")


def parse_sc_file(path: str | Path) -> list[ScExample]:
    """Read ``SENTENCE<TAB>POS|NEU|NEG`` lines."""
    examples = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            text, sep, label = line.rstrip("\n").rpartition("\t")
            if not sep or not text.split():
                raise AsteFormatError("expected SENTENCE<TAB>LABEL", line_no)
            try:
                polarity = Polarity.parse(label)
            except ValueError as exc:
                raise AsteFormatError(str(exc), line_no) from None
            examples.append(ScExample(tuple(text.split()), polarity))
    return examples


def write_sc_file(path: str | Path, examples: Iterable[ScExample]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(" ".join(ex.words) + "\t" + ex.sentence_sentiment.value + "\n")


# ---------------------------------------------------------------------------
# Statistics


@dataclass
class DatasetStats:
    n_sentences: int = 0
    n_triplets: int = 0
    n_positive: int = 0
    n_negative: int = 0
    n_neutral: int = 0
    n_aspect_phrases: int = 0
    n_single_word_aspect: int = 0
    n_multi_word_aspect: int = 0
    n_opinion_phrases: int = 0
    n_single_word_opinion: int = 0
    n_multi_word_opinion: int = 0
    n_one_to_many: int = 0
    n_one_to_many_aspect_side: int = 0
    n_one_to_many_opinion_side: int = 0
    n_triplets_single_word: int = 0
    n_triplets_multi_word: int = 0
    n_triplets_multi_opinion_single_aspect: int = 0
    n_triplets_multi_aspect_single_opinion: int = 0
    mean_sentence_length: float = 0.0
    mean_aspect_length: float = 0.0
    mean_opinion_length: float = 0.0

    # fields that add up across disjoint corpora
    @classmethod
    def additive_fields(cls) -> list[str]:
        return [f.name for f in fields(cls) if not f.name.startswith("mean_")]

    @property
    def n_per_polarity(self) -> dict[Polarity, int]:
        return {
            Polarity.POSITIVE: self.n_positive,
            Polarity.NEGATIVE: self.n_negative,
            Polarity.NEUTRAL: self.n_neutral,
        }

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_text(self) -> str:
        rows = []
        for key, value in self.as_dict().items():
            rows.append(f"{key}\t{value:.4f}" if isinstance(value, float) else f"{key}\t{value}")
        return "\n".join(rows) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


def compute_stats(sentences: Iterable[Sentence]) -> DatasetStats:
    """Corpus statistics; phrases are distinct spans within a sentence.

    A one-to-many relation is counted once per phrase that takes part in
    two or more triplets with distinct partners on the other side.
    """
    st = DatasetStats()
    total_words = aspect_words = opinion_words = 0
    for s in sentences:
        st.n_sentences += 1
        total_words += len(s.words)
        partners_of_aspect: dict[WordSpan, set[WordSpan]] = {}
        partners_of_opinion: dict[WordSpan, set[WordSpan]] = {}
        for t in s.triplets:
            st.n_triplets += 1
            if t.polarity is Polarity.POSITIVE:
                st.n_positive += 1
            elif t.polarity is Polarity.NEGATIVE:
                st.n_negative += 1
            else:
                st.n_neutral += 1
            a_multi, o_multi = t.aspect.length > 1, t.opinion.length > 1
            if a_multi or o_multi:
                st.n_triplets_multi_word += 1
                if o_multi and not a_multi:
                    st.n_triplets_multi_opinion_single_aspect += 1
                if a_multi and not o_multi:
                    st.n_triplets_multi_aspect_single_opinion += 1
            else:
                st.n_triplets_single_word += 1
            partners_of_aspect.setdefault(t.aspect, set()).add(t.opinion)
            partners_of_opinion.setdefault(t.opinion, set()).add(t.aspect)

        for span, partners in partners_of_aspect.items():
            st.n_aspect_phrases += 1
            aspect_words += span.length
            if span.length == 1:
                st.n_single_word_aspect += 1
            else:
                st.n_multi_word_aspect += 1
            if len(partners) >= 2:
                st.n_one_to_many_aspect_side += 1
        for span, partners in partners_of_opinion.items():
            st.n_opinion_phrases += 1
            opinion_words += span.length
            if span.length == 1:
                st.n_single_word_opinion += 1
            else:
                st.n_multi_word_opinion += 1
            if len(partners) >= 2:
                st.n_one_to_many_opinion_side += 1

    st.n_one_to_many = st.n_one_to_many_aspect_side + st.n_one_to_many_opinion_side
    if st.n_sentences:
        st.mean_sentence_length = total_words / st.n_sentences
    if st.n_aspect_phrases:
        st.mean_aspect_length = aspect_words / st.n_aspect_phrases
    if st.n_opinion_phrases:
        st.mean_opinion_length = opinion_words / st.n_opinion_phrases
    return st


# ---------------------------------------------------------------------------
# Synthetic corpus

ASPECTS = (
    "room", "staff", "food", "menu", "service", "price", "screen", "keyboard",
    "battery", "bed", "breakfast", "location", "pool", "wine", "pizza", "laptop",
    "bathroom", "waiter", "display", "speaker",
)
MULTIWORD_ASPECTS = (
    "battery life", "operating system", "preloaded software", "front desk",
    "room service", "wine list", "customer support", "touch pad", "sushi bar",
    "hard drive",
)
OPINIONS = {
    Polarity.POSITIVE: ("fine", "great", "good", "excellent", "friendly", "delicious",
                        "clean", "fast", "amazing", "comfortable", "lovely", "superb"),
    Polarity.NEGATIVE: ("rude", "dirty", "slow", "awful", "limited", "pricy", "noisy",
                        "terrible", "bland", "broken", "poor", "horrible"),
    Polarity.NEUTRAL: ("average", "okay", "standard", "acceptable", "ordinary", "decent"),
}
VERBS = {
    Polarity.POSITIVE: ("love", "like", "enjoyed", "recommend"),
    Polarity.NEGATIVE: ("hate", "dislike", "regret"),
}
INTENSIFIERS = ("very", "extremely", "really", "quite", "so")
CONNECTIVES = ("but", "and", "while", ",")
COPULAS = ("was", "is")
DISTRACTORS = (
    ("we", "stayed", "in", "the", "{A}"),
    ("I", "was", "given", "a", "{A}"),
    ("they", "showed", "us", "the", "{A}"),
    ("we", "came", "back", "on", "monday"),
)


class _Builder:
    def __init__(self):
        self.words: list[str] = []
        self.triplets: list[GoldTriplet] = []

    def add(self, *chunks: str) -> WordSpan:
        start = len(self.words)
        for chunk in chunks:
            self.words.extend(chunk.split())
        return WordSpan(start, len(self.words) - 1)


def make_synthetic_fixture(
    seed: int,
    n: int,
    *,
    one_to_many_rate: float = 0.2,
    max_clauses: int = 3,
    distractor_rate: float = 0.25,
    intensifier_rate: float = 0.3,
    multiword_aspect_rate: float = 0.25,
    prefix: str = "syn",
) -> list[Sentence]:
    """Generate ``n`` templated review sentences with gold triplets.

    Each sentence joins 1..max_clauses clauses. With probability
    ``one_to_many_rate`` exactly one clause is a one-to-many construction
    (one aspect with two opinions or one opinion with two aspects); all
    other phrases in the sentence are distinct, so the fraction of
    sentences with a one-to-many relation tracks the requested rate.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    out = []
    for k in range(n):
        b = _Builder()
        n_clauses = rng.randint(1, max_clauses)
        otm_clause = rng.randrange(n_clauses) if rng.random() < one_to_many_rate else -1
        used: set[str] = set()

        def aspect() -> str:
            pool = MULTIWORD_ASPECTS if rng.random() < multiword_aspect_rate else ASPECTS
            choice = rng.choice([a for a in pool if a not in used])
            used.add(choice)
            return choice

        def opinion(pol: Polarity | None = None) -> tuple[str, Polarity]:
            pol = pol or rng.choice(_POLARITY_ORDER)
            word = rng.choice(OPINIONS[pol])
            if rng.random() < intensifier_rate:
                word = f"{rng.choice(INTENSIFIERS)} {word}"
            return word, pol

        for c in range(n_clauses):
            if c > 0:
                b.add(rng.choice(CONNECTIVES))
            if c == otm_clause:
                _one_to_many_clause(b, rng, aspect, opinion)
            elif c > 0 and rng.random() < distractor_rate:
                template = rng.choice(DISTRACTORS)
                b.add(*(w.replace("{A}", aspect()) for w in template))
            else:
                _simple_clause(b, rng, aspect, opinion)
        b.add(".")
        b.words[0] = b.words[0].capitalize()
        out.append(Sentence(tuple(b.words), tuple(b.triplets), f"{prefix}{seed}-{k}"))
    return out


def _simple_clause(b: _Builder, rng: random.Random, aspect, opinion) -> None:
    form = rng.random()
    if form < 0.6:
        b.add("the")
        a = b.add(aspect())
        b.add(rng.choice(COPULAS))
        text, pol = opinion()
        o = b.add(text)
    elif form < 0.8:
        b.add("it", "has", "a")
        text, pol = opinion()
        o = b.add(text)
        a = b.add(aspect())
    else:
        pol = rng.choice((Polarity.POSITIVE, Polarity.NEGATIVE))
        b.add("I")
        o = b.add(rng.choice(VERBS[pol]))
        b.add("the")
        a = b.add(aspect())
    b.triplets.append(GoldTriplet(a, o, pol))


def _one_to_many_clause(b: _Builder, rng: random.Random, aspect, opinion) -> None:
    if rng.random() < 0.5:
        # one aspect, two opinions
        b.add("the")
        a = b.add(aspect())
        b.add(rng.choice(COPULAS))
        t1, p1 = opinion()
        o1 = b.add(t1)
        b.add("and")
        t2, p2 = opinion()
        while t2 == t1:
            t2, p2 = opinion()
        o2 = b.add(t2)
        b.triplets += [GoldTriplet(a, o1, p1), GoldTriplet(a, o2, p2)]
    else:
        # one opinion, two aspects
        pol = rng.choice((Polarity.POSITIVE, Polarity.NEGATIVE))
        b.add("I")
        o = b.add(rng.choice(VERBS[pol]))
        b.add("the")
        a1 = b.add(aspect())
        b.add("and", "the")
        a2 = b.add(aspect())
        b.triplets += [GoldTriplet(a1, o, pol), GoldTriplet(a2, o, pol)]


EXAMPLE_LINES = (
    "The room was fine but the staff was rude .####[([1], [3], 'POS'), ([6], [8], 'NEG')]",
    "The menu is limited and extremely pricy .####[([1], [3], 'NEG'), ([1], [5, 6], 'NEG')]",
)


def example_sentences() -> list[Sentence]:
    """The two worked examples: room/staff and menu."""
    return [parse_aste_line(line, i + 1, f"example-{i}") for i, line in enumerate(EXAMPLE_LINES)]


def split_corpus(
    sentences: Sequence[Sentence], sizes: Sequence[int], seed: int = 0
) -> list[list[Sentence]]:
    """Shuffle deterministically and cut into consecutive splits of ``sizes``."""
    if sum(sizes) > len(sentences):
        raise ValueError("split sizes exceed corpus size")
    order = list(range(len(sentences)))
    random.Random(seed).shuffle(order)
    out, pos = [], 0
    for size in sizes:
        out.append([sentences[i] for i in order[pos : pos + size]])
        pos += size
    return out


@dataclass
class CorpusSplits:
    train: list[Sentence]
    dev: list[Sentence]
    test: list[Sentence] = field(default_factory=list)
