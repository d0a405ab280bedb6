"""Whitespace word tokenizer with a frequency-capped vocabulary.

Special ids are fixed so that checkpoints, masking, and batching agree:
PAD=0, UNK=1, CLS=2, MASK=3.
"""

import hashlib
import json
from collections import Counter

import numpy as np

from .errors import ContractError

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
MASK_TOKEN = "[MASK]"

SPECIAL_TOKENS = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, MASK_TOKEN]

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
MASK_ID = 3


class Tokenizer:
    def __init__(self, vocab):
        """`vocab` maps token -> id and must include the four special tokens."""
        for i, tok in enumerate(SPECIAL_TOKENS):
            if vocab.get(tok) != i:
                raise ContractError(f"vocab must map {tok} to id {i}")
        self.vocab = dict(vocab)
        self.inverse = {i: t for t, i in self.vocab.items()}

    @property
    def vocab_size(self):
        return len(self.vocab)

    @property
    def special_ids(self):
        return (PAD_ID, UNK_ID, CLS_ID, MASK_ID)

    @classmethod
    def build(cls, texts, max_vocab_size):
        """Build a vocabulary from the `max_vocab_size` most frequent words.

        Ties are broken alphabetically so the result is independent of
        input order.
        """
        if max_vocab_size <= len(SPECIAL_TOKENS):
            raise ContractError("max_vocab_size must exceed the special-token count")
        counts = Counter()
        for text in texts:
            counts.update(text.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [w for w, _ in ranked[: max_vocab_size - len(SPECIAL_TOKENS)]]
        vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for w in words:
            vocab[w] = len(vocab)
        return cls(vocab)

    def encode(self, text, max_len, add_cls=True):
        """Encode one text to a fixed-length id array (leading tokens kept)."""
        ids = [CLS_ID] if add_cls else []
        for w in text.split():
            ids.append(self.vocab.get(w, UNK_ID))
            if len(ids) >= max_len:
                break
        ids = ids[:max_len]
        out = np.full(max_len, PAD_ID, dtype=np.int64)
        out[: len(ids)] = ids
        return out

    def encode_batch(self, texts, max_len):
        return np.stack([self.encode(t, max_len) for t in texts])

    def digest(self):
        blob = json.dumps(sorted(self.vocab.items())).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_json(self):
        return {"vocab": self.vocab}

    @classmethod
    def from_json(cls, data):
        return cls(data["vocab"])
