"""Synthetic corpora with a tunable demographic signal.

Documents are token sequences drawn from a Zipf-like base distribution with
marker insertions: demographic markers at per-token rates q_A / q_B, plus
sentiment and topic markers tied to the document's labels. Marker
vocabularies are mutually disjoint, so the demographic evidence available to
any classifier is exactly the marker counts, which makes the Bayes-optimal
accuracy computable in closed form by enumeration.
"""

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .corpus import LabeledDocument, dimension_classes, SA_RATINGS
from .errors import ContractError


@dataclass
class SyntheticSpec:
    vocab_size: int = 400
    doc_length: int = 24
    marker_rate_a: float = 0.0
    marker_rate_b: float = 0.0
    n_marker_tokens: int = 5
    topic_count: int = 5
    sentiment_signal: float = 0.15
    topic_signal: float | None = None   # defaults to sentiment_signal
    n_docs_per_group: int = 500
    seed: int = 0
    dimension: str = "gender"
    country: str = "SY"
    language: str = "syn"
    domain_tag: str = "reviews"
    base_offset: int = 0                # shifts the base vocabulary (distinct domains)

    def __post_init__(self):
        if not (0.0 <= self.marker_rate_a <= 1.0 and 0.0 <= self.marker_rate_b <= 1.0):
            raise ContractError("marker rates must lie in [0, 1]")
        if self.topic_signal is None:
            self.topic_signal = self.sentiment_signal
        if not (0.0 <= self.sentiment_signal <= 1.0 and 0.0 <= self.topic_signal <= 1.0):
            raise ContractError("signal rates must lie in [0, 1]")
        if self.doc_length < 1 or self.n_docs_per_group < 0:
            raise ContractError("doc_length >= 1 and n_docs_per_group >= 0 required")
        n_markers = (2 * self.n_marker_tokens
                     + len(SA_RATINGS) * self.n_marker_tokens
                     + self.topic_count * self.n_marker_tokens)
        if self.vocab_size < n_markers + 1:
            raise ContractError(
                f"vocab_size {self.vocab_size} leaves no base vocabulary "
                f"({n_markers} marker tokens)")

    def marker_vocab(self, group):
        """Marker words for demographic group 'A' or 'B'."""
        prefix = {"A": "ga", "B": "gb"}[group]
        return [f"{prefix}{i}" for i in range(self.n_marker_tokens)]

    def sentiment_vocab(self, rating):
        return [f"s{rating}_{i}" for i in range(self.n_marker_tokens)]

    def topic_vocab(self, topic_idx):
        return [f"t{topic_idx}_{i}" for i in range(self.n_marker_tokens)]

    def base_vocab(self):
        n_markers = (2 + len(SA_RATINGS) + self.topic_count) * self.n_marker_tokens
        n_base = self.vocab_size - n_markers
        return [f"w{self.base_offset + i}" for i in range(n_base)]

    def topics(self):
        return [f"topic{self.country}{k}" for k in range(self.topic_count)]

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, data):
        return cls(**data)


def _zipf_weights(n):
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


def generate_corpus(spec):
    """Generate 2 * n_docs_per_group labeled documents, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    classes = dimension_classes(spec.dimension)
    base = np.array(spec.base_vocab())
    base_p = _zipf_weights(len(base))
    topics = spec.topics()

    docs = []
    for group, cls_label in zip(("A", "B"), classes):
        markers = np.array(spec.marker_vocab(group))
        q = spec.marker_rate_a if group == "A" else spec.marker_rate_b
        for i in range(spec.n_docs_per_group):
            rating = int(rng.choice(SA_RATINGS))
            topic_idx = int(rng.integers(spec.topic_count))
            sent_markers = np.array(spec.sentiment_vocab(rating))
            top_markers = np.array(spec.topic_vocab(topic_idx))
            draws = rng.random((spec.doc_length, 3))
            tokens = []
            for u_g, u_s, u_t in draws:
                if u_g < q:
                    tokens.append(str(rng.choice(markers)))
                elif u_s < spec.sentiment_signal:
                    tokens.append(str(rng.choice(sent_markers)))
                elif u_t < spec.topic_signal:
                    tokens.append(str(rng.choice(top_markers)))
                else:
                    tokens.append(str(rng.choice(base, p=base_p)))
            doc_id = f"{spec.country}-{spec.domain_tag}-{group}-{i:06d}"
            docs.append(LabeledDocument(
                id=doc_id, text=" ".join(tokens),
                country=spec.country, language=spec.language,
                gender=cls_label if spec.dimension == "gender" else None,
                age_group=cls_label if spec.dimension == "age" else None,
                rating=rating, topic=topics[topic_idx],
                domain_tag=spec.domain_tag))
    return docs


def bayes_optimal_ac(spec):
    """Accuracy of the Bayes-optimal classifier observing demographic marker
    counts, for equiprobable classes.

    A group-A document carries Binomial(L, q_A) group-A markers and no
    group-B markers (marker vocabularies are disjoint), and vice versa. The
    optimal rule errs only on documents with no demographic marker at all,
    where it picks the class more likely to produce an empty observation.
    Computed by exact enumeration over the joint marker-count distribution.
    """
    L = spec.doc_length
    acc = 0.0
    p_zero = {}
    for q, other in ((spec.marker_rate_a, spec.marker_rate_b),
                     (spec.marker_rate_b, spec.marker_rate_a)):
        # counts >= 1 are unambiguous (the other class cannot produce them)
        for k in range(1, L + 1):
            acc += 0.5 * math.comb(L, k) * q**k * (1 - q) ** (L - k)
        p_zero[q] = (1 - q) ** L
    # the all-zero observation: pick the class with higher likelihood
    acc += 0.5 * max(p_zero[spec.marker_rate_a], p_zero[spec.marker_rate_b])
    return min(1.0, acc)


def save_spec(spec, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_json(), f, indent=1)


def load_spec(path):
    with open(path, encoding="utf-8") as f:
        return SyntheticSpec.from_json(json.load(f))
