"""Contextual word embeddings from a pluggable masked-LM backbone.

Two backbones are supported: a pretrained Hugging Face checkpoint
(``backbone_id``) and a small randomly initialised transformer encoder
(``tiny``) for desk-scale training. Both map subword positions back to
whitespace words so downstream code only sees word indices.
"""

from __future__ import annotations

import enum
import zlib
from collections.abc import Sequence
from dataclasses import dataclass

import torch
from torch import nn

from .corpus import Sentence


class EncoderError(RuntimeError):
    pass


class TruncationError(EncoderError):
    """Input does not fit into the backbone's maximum sequence length."""


class Pooling(str, enum.Enum):
    FIRST_SUBWORD = "first_subword"
    MEAN_SUBWORD = "mean_subword"


@dataclass(frozen=True)
class TinySpec:
    layers: int = 2
    heads: int = 4
    width: int = 64
    vocab: int = 4096
    max_len: int = 128
    piece_len: int = 5
    dropout: float = 0.1


@dataclass(frozen=True)
class EncoderSpec:
    backbone_id: str | None = None
    tiny_spec: TinySpec | None = None
    pooling: Pooling = Pooling.FIRST_SUBWORD
    language: str = "en"

    def __post_init__(self):
        if (self.backbone_id is None) == (self.tiny_spec is None):
            raise ValueError("exactly one of backbone_id / tiny_spec must be set")
        object.__setattr__(self, "pooling", Pooling(self.pooling))

    @property
    def identifier(self) -> str:
        if self.backbone_id is not None:
            return self.backbone_id
        t = self.tiny_spec
        return f"tiny:l{t.layers}-h{t.heads}-w{t.width}-v{t.vocab}"


@dataclass
class EncoderOutput:
    word_embeddings: torch.Tensor  # (n_words, d)
    sentence_embedding: torch.Tensor  # (d,)

    @property
    def d(self) -> int:
        return self.word_embeddings.shape[-1]


@dataclass
class EncoderBatch:
    word_embeddings: torch.Tensor  # (B, N, d)
    word_mask: torch.Tensor  # (B, N) bool
    sentence_embedding: torch.Tensor  # (B, d)


class HashingSubwordTokenizer:
    """Deterministic vocabulary-free subword tokenizer.

    The first piece of a word is hashed from the whole lowercased word, the
    remaining pieces from fixed-width character chunks, so frequent short
    words get their own embedding while long words fan out into several
    subwords.
    """

    pad_id = 0
    summary_id = 1

    def __init__(self, vocab: int, piece_len: int = 5):
        if vocab < 3:
            raise ValueError("vocab must be >= 3")
        self.vocab = vocab
        self.piece_len = piece_len

    def _hash(self, key: str) -> int:
        return 2 + zlib.crc32(key.encode("utf-8")) % (self.vocab - 2)

    def word_pieces(self, word: str) -> list[int]:
        w = word.lower()
        chunks = [w[i : i + self.piece_len] for i in range(0, len(w), self.piece_len)]
        return [self._hash("w:" + w)] + [self._hash("##" + c) for c in chunks[1:]]


class TinyEncoder(nn.Module):
    """Transformer encoder with a learned summary token at position 0."""

    def __init__(self, spec: TinySpec):
        super().__init__()
        if spec.width % spec.heads:
            raise ValueError(f"width {spec.width} not divisible by heads {spec.heads}")
        if spec.layers < 1 or spec.width < 1:
            raise ValueError("layers and width must be positive")
        self.spec = spec
        self.tok = nn.Embedding(spec.vocab, spec.width, padding_idx=0)
        self.pos = nn.Embedding(spec.max_len, spec.width)
        self.norm = nn.LayerNorm(spec.width)
        self.drop = nn.Dropout(spec.dropout)
        layer = nn.TransformerEncoderLayer(
            spec.width, spec.heads, dim_feedforward=2 * spec.width,
            dropout=spec.dropout, batch_first=True,
        )
        self.layers = nn.TransformerEncoder(layer, spec.layers, enable_nested_tensor=False)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.drop(self.norm(self.tok(ids) + self.pos(positions)[None]))
        return self.layers(x, src_key_padding_mask=~mask)


class Encoder(nn.Module):
    """Backbone plus subword-to-word pooling."""

    def __init__(self, spec: EncoderSpec, backbone: nn.Module, tokenizer):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        self.tokenizer = tokenizer

    @property
    def width(self) -> int:
        if self.spec.tiny_spec is not None:
            return self.spec.tiny_spec.width
        return self.backbone.config.hidden_size

    def _tokenize(self, batch_words: Sequence[Sequence[str]]):
        """Return token ids, token mask and per-word token groups."""
        seqs, groups = [], []
        if self.spec.tiny_spec is not None:
            max_len = self.spec.tiny_spec.max_len
            for words in batch_words:
                ids, grp = [HashingSubwordTokenizer.summary_id], []
                for w in words:
                    pieces = self.tokenizer.word_pieces(w)
                    grp.append(list(range(len(ids), len(ids) + len(pieces))))
                    ids.extend(pieces)
                if len(ids) > max_len:
                    raise TruncationError(
                        f"{len(ids)} subword positions exceed max length {max_len}"
                    )
                seqs.append(ids)
                groups.append(grp)
            pad = HashingSubwordTokenizer.pad_id
        else:
            max_len = min(
                getattr(self.tokenizer, "model_max_length", 10**9),
                getattr(self.backbone.config, "max_position_embeddings", 10**9),
            )
            for words in batch_words:
                enc = self.tokenizer(list(words), is_split_into_words=True, truncation=False)
                ids = enc["input_ids"]
                if len(ids) > max_len:
                    raise TruncationError(
                        f"{len(ids)} subword positions exceed max length {max_len}"
                    )
                grp = [[] for _ in words]
                for pos, wid in enumerate(enc.word_ids()):
                    if wid is not None:
                        grp[wid].append(pos)
                if any(not g for g in grp):
                    raise EncoderError("tokenizer produced no subword for some word")
                seqs.append(ids)
                groups.append(grp)
            pad = self.tokenizer.pad_token_id or 0
        T = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), T), pad, dtype=torch.long)
        mask = torch.zeros((len(seqs), T), dtype=torch.bool)
        for b, s in enumerate(seqs):
            ids[b, : len(s)] = torch.tensor(s)
            mask[b, : len(s)] = True
        return ids, mask, groups

    def forward(self, batch_words: Sequence[Sequence[str]]) -> EncoderBatch:
        if not batch_words or any(len(w) == 0 for w in batch_words):
            raise EncoderError("cannot encode an empty sentence")
        ids, mask, groups = self._tokenize(batch_words)
        if self.spec.tiny_spec is not None:
            hidden = self.backbone(ids, mask)
        else:
            hidden = self.backbone(input_ids=ids, attention_mask=mask.long()).last_hidden_state

        B, T = ids.shape
        N = max(len(g) for g in groups)
        pool = torch.zeros((B, N, T), dtype=hidden.dtype)
        word_mask = torch.zeros((B, N), dtype=torch.bool)
        for b, grp in enumerate(groups):
            for i, positions in enumerate(grp):
                word_mask[b, i] = True
                if self.spec.pooling is Pooling.FIRST_SUBWORD:
                    pool[b, i, positions[0]] = 1.0
                else:
                    pool[b, i, positions] = 1.0 / len(positions)
        word_emb = torch.bmm(pool, hidden)
        return EncoderBatch(word_emb, word_mask, hidden[:, 0])


def build_tiny_encoder(spec: EncoderSpec, seed: int) -> Encoder:
    if spec.tiny_spec is None:
        raise ValueError("spec has no tiny_spec")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        backbone = TinyEncoder(spec.tiny_spec)
    tok = HashingSubwordTokenizer(spec.tiny_spec.vocab, spec.tiny_spec.piece_len)
    return Encoder(spec, backbone, tok)


def build_encoder(spec: EncoderSpec, seed: int = 0) -> Encoder:
    if spec.tiny_spec is not None:
        return build_tiny_encoder(spec, seed)
    try:
        from transformers import AutoModel, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(spec.backbone_id)
        backbone = AutoModel.from_pretrained(spec.backbone_id)
    except Exception as exc:  # noqa: BLE001 - any loader failure means unusable id
        raise EncoderError(f"cannot load backbone {spec.backbone_id!r}: {exc}") from exc
    if not getattr(tokenizer, "is_fast", False):
        raise EncoderError("backbone tokenizer must be a fast tokenizer (word_ids needed)")
    return Encoder(spec, backbone, tokenizer)


@torch.no_grad()
def encode(sentence: Sentence, encoder: Encoder | EncoderSpec, seed: int = 0) -> EncoderOutput:
    """Encode one sentence in evaluation mode.

    ``encoder`` is a built handle or a spec, which is built with ``seed``.
    """
    if isinstance(encoder, EncoderSpec):
        encoder = build_encoder(encoder, seed)
    was_training = encoder.training
    encoder.eval()
    try:
        out = encoder([sentence.words])
    finally:
        encoder.train(was_training)
    return EncoderOutput(out.word_embeddings[0, : len(sentence.words)], out.sentence_embedding[0])
