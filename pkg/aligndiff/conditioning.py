"""
Text conditioning: vocabulary, tokenizer, a small trainable text encoder,
category features and caption dropout.
"""

import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
from torch import nn

from .corpus import CATEGORY_NAMES, GRAMMAR_WORDS
from .denoiser import cross_attention

logger = logging.getLogger("aligndiff")

NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"
NULL_ID = 0
DEFAULT_MAX_LENGTH = 24
DEFAULT_TEXT_DIM = 64
DEFAULT_CAPTION_DROPOUT = 0.1

_WORD_RE = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Ordered token list; NULL has id 0 and UNK id 1."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("Vocabulary tokens must be unique")
        if not tokens or tokens[0] != NULL_TOKEN:
            raise ValueError(f"{NULL_TOKEN} must be the first token")
        if UNK_TOKEN not in tokens:
            raise ValueError(f"{UNK_TOKEN} missing from vocabulary")
        self.tokens: List[str] = tokens
        self._index: Dict[str, int] = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def from_grammar(cls, categories: Sequence[str] = CATEGORY_NAMES) -> "Vocabulary":
        return cls([NULL_TOKEN, UNK_TOKEN, *GRAMMAR_WORDS, *categories])

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def unk_id(self) -> int:
        return self._index[UNK_TOKEN]

    def lookup(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def save(self, path: Union[str, Path]) -> None:
        """UTF-8 text, one token per line, line order = id order."""
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def split_words(text: str) -> List[str]:
    """Lowercased alphanumeric runs; whitespace and punctuation separate words."""
    return _WORD_RE.findall(str(text).lower())


def tokenize(caption: str, vocab: Vocabulary, max_length: int = DEFAULT_MAX_LENGTH) -> List[int]:
    """Words mapped to ids (UNK if unknown), truncated/padded with NULL to `max_length`."""
    ids = [vocab.lookup(word) for word in split_words(caption)]
    ids = ids[:max_length]
    return ids + [NULL_ID] * (max_length - len(ids))


def tokenize_batch(
    captions: Sequence[str], vocab: Vocabulary, max_length: int = DEFAULT_MAX_LENGTH
) -> torch.Tensor:
    return torch.tensor([tokenize(c, vocab, max_length) for c in captions], dtype=torch.long)


@dataclass(frozen=True, eq=False)
class ConditioningBatch:
    """Per-sample conditioning for one batch.

    Parameters
    ----------
        token_ids : LongTensor [B, L]
        sequence_embeddings : Tensor [B, L, d_t], keys/values of cross-attention
        pooled_text : Tensor [B, d_t], the text features t_i of the alignment losses
        null_sequence : Tensor [L, d_t], the unconditional sequence used for guidance
        category_ids : LongTensor [B], optional (fine-tuning only)
        category_features : Tensor [B, d_t], present iff category_ids is
    """

    token_ids: torch.Tensor
    sequence_embeddings: torch.Tensor
    pooled_text: torch.Tensor
    null_sequence: torch.Tensor
    category_ids: Optional[torch.Tensor] = None
    category_features: Optional[torch.Tensor] = None

    def __post_init__(self):
        if (self.category_ids is None) != (self.category_features is None):
            raise ValueError("category_features must be present iff category_ids is")
        b = self.token_ids.shape[0]
        if self.sequence_embeddings.shape[0] != b or self.pooled_text.shape[0] != b:
            raise ValueError("conditioning tensors disagree on batch size")

    @property
    def batch_size(self) -> int:
        return int(self.token_ids.shape[0])


class TextEncoder(nn.Module):
    """Token + position embeddings followed by one residual self-attention mixing layer."""

    def __init__(self, vocab_size: int, max_length: int = DEFAULT_MAX_LENGTH, dim: int = DEFAULT_TEXT_DIM):
        super().__init__()
        self.max_length = max_length
        self.dim = dim
        self.token_embedding = nn.Embedding(vocab_size, dim)
        self.position_embedding = nn.Embedding(max_length, dim)
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, token_ids: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if token_ids.ndim != 2 or token_ids.shape[1] != self.max_length:
            raise ValueError(f"token_ids must be [B, {self.max_length}], got {tuple(token_ids.shape)}")
        if token_ids.numel() and (
            int(token_ids.min()) < 0 or int(token_ids.max()) >= self.token_embedding.num_embeddings
        ):
            raise ValueError("token id out of vocabulary range")

        positions = torch.arange(self.max_length, device=token_ids.device)
        h = self.token_embedding(token_ids) + self.position_embedding(positions)
        x = self.norm(h)
        h = h + self.to_out(cross_attention(self.to_q(x), self.to_k(x), self.to_v(x)))

        keep = (token_ids != NULL_ID).to(h.dtype).unsqueeze(-1)
        counts = keep.sum(dim=1)
        pooled = (h * keep).sum(dim=1) / counts.clamp(min=1.0)
        # an empty caption pools to the NULL token embedding itself
        null_row = self.token_embedding.weight[NULL_ID].expand_as(pooled)
        pooled = torch.where(counts > 0, pooled, null_row)
        return h, pooled


class Conditioner(nn.Module):
    """Owns the vocabulary, the text encoder and the category names.

    Parameters
    ----------
        categories : sequence of str
            category names; label k is encoded from the text of categories[k]
        max_length : int, default=24
        dim : int, default=64
    """

    def __init__(
        self,
        categories: Sequence[str] = CATEGORY_NAMES[:4],
        max_length: int = DEFAULT_MAX_LENGTH,
        dim: int = DEFAULT_TEXT_DIM,
    ):
        super().__init__()
        self.categories = list(categories)
        self.vocab = Vocabulary.from_grammar(CATEGORY_NAMES)
        self.max_length = max_length
        self.encoder = TextEncoder(len(self.vocab), max_length, dim)
        self._category_cache: Dict[int, Tuple[tuple, torch.Tensor]] = {}

    @property
    def dim(self) -> int:
        return self.encoder.dim

    def tokenize(self, captions: Sequence[str]) -> torch.Tensor:
        return tokenize_batch(captions, self.vocab, self.max_length)

    def encode_text(self, token_ids: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.encoder(token_ids)

    def null_sequence(self) -> torch.Tensor:
        null_ids = torch.full((1, self.max_length), NULL_ID, dtype=torch.long)
        return self.encoder(null_ids)[0][0]

    def _check_labels(self, labels: torch.Tensor) -> None:
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= len(self.categories)):
            raise ValueError(f"Unknown category label in {labels.tolist()}")

    def category_features(self, labels: torch.Tensor) -> torch.Tensor:
        """Differentiable c_k for a batch of labels."""
        labels = torch.as_tensor(labels, dtype=torch.long)
        self._check_labels(labels)
        _, pooled = self.encoder(self.tokenize(self.categories))
        return pooled[labels]

    def _weights_version(self) -> Tuple[Tuple[int, int], ...]:
        """Changes whenever an encoder parameter is updated in place or replaced."""
        # pylint: disable-next=protected-access
        return tuple((p.data_ptr(), p._version) for p in self.encoder.parameters())

    def encode_category(self, label: int) -> torch.Tensor:
        """Pooled encoding of the category's name, cached per label while the weights stay unchanged."""
        label = int(label)
        self._check_labels(torch.tensor([label]))
        version = self._weights_version()
        cached = self._category_cache.get(label)
        if cached is None or cached[0] != version:
            with torch.no_grad():
                _, pooled = self.encoder(self.tokenize([self.categories[label]]))
            cached = (version, pooled[0])
            self._category_cache[label] = cached
        return cached[1]

    def clear_cache(self) -> None:
        self._category_cache.clear()

    def _load_from_state_dict(self, *args, **kwargs):  # pylint: disable=arguments-differ
        self.clear_cache()
        super()._load_from_state_dict(*args, **kwargs)

    def forward(
        self, token_ids: torch.Tensor, category_ids: Optional[torch.Tensor] = None
    ) -> ConditioningBatch:
        sequence, pooled = self.encoder(token_ids)
        features = None
        if category_ids is not None:
            category_ids = torch.as_tensor(category_ids, dtype=torch.long)
            features = self.category_features(category_ids)
        return ConditioningBatch(
            token_ids=token_ids,
            sequence_embeddings=sequence,
            pooled_text=pooled,
            null_sequence=self.null_sequence(),
            category_ids=category_ids,
            category_features=features,
        )

    def make_batch(
        self, captions: Sequence[str], category_ids: Optional[Sequence[int]] = None
    ) -> ConditioningBatch:
        ids = None if category_ids is None else torch.as_tensor(list(category_ids), dtype=torch.long)
        return self(self.tokenize(captions), ids)


def build_conditioner(seed: int, **kwargs) -> Conditioner:
    """Conditioner with parameters drawn from a generator seeded by `seed`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Conditioner(**kwargs)


def caption_dropout_mask(batch_size: int, p: float, generator: torch.Generator) -> torch.Tensor:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    return torch.rand(batch_size, generator=generator) < p


def apply_caption_dropout(
    batch: ConditioningBatch, p: float, generator: torch.Generator
) -> ConditioningBatch:
    """Independently replaces each sample's sequence by the null sequence with probability p.

    pooled_text keeps the features of the real caption, so the alignment losses
    still see each sample's semantics.
    """
    return apply_dropout_mask(batch, caption_dropout_mask(batch.batch_size, p, generator))


def apply_dropout_mask(batch: ConditioningBatch, drop: torch.Tensor) -> ConditioningBatch:
    """Nulls the sequences of the samples where `drop` is True."""
    if drop.shape != (batch.batch_size,):
        raise ValueError(f"dropout mask must have shape ({batch.batch_size},)")
    drop = drop.to(torch.bool)
    token_ids = torch.where(drop[:, None], torch.full_like(batch.token_ids, NULL_ID), batch.token_ids)
    sequence = torch.where(
        drop[:, None, None], batch.null_sequence.unsqueeze(0), batch.sequence_embeddings
    )
    return replace(batch, token_ids=token_ids, sequence_embeddings=sequence)
