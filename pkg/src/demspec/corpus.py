"""Corpus ingestion, leak-free splitting, class/topic balancing, dynamic masking.

Corpus format: UTF-8 JSONL, one document per line. Absent optional fields may
be omitted or set to null. Split manifests are JSON objects with the four id
arrays plus metadata.
"""

import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ResourceMissingError

GENDER_CLASSES = ("F", "M")
AGE_CLASSES = ("U35", "O45")
SA_RATINGS = (1, 3, 5)

DIMENSIONS = ("gender", "age")
TASKS = ("AC-SA", "AC-TD", "SA", "TD")

# Fraction of the fine-tuning pool in each partition. Per-class pool sizes are
# trimmed to a multiple of 5 so the 60/20/20 allocation is exact.
SPLIT_RATIO = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class LabeledDocument:
    id: str
    text: str
    country: str = ""
    language: str = ""
    gender: str | None = None
    age_group: str | None = None
    rating: int | None = None
    topic: str | None = None
    domain_tag: str = ""

    def demographic_class(self, dimension):
        if dimension == "gender":
            return self.gender
        if dimension == "age":
            return self.age_group
        raise ContractError(f"unknown dimension: {dimension}")

    def to_json(self):
        out = {"id": self.id, "text": self.text, "country": self.country,
               "language": self.language, "domain_tag": self.domain_tag}
        for key in ("gender", "age_group", "rating", "topic"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


def dimension_classes(dimension):
    if dimension == "gender":
        return GENDER_CLASSES
    if dimension == "age":
        return AGE_CLASSES
    raise ContractError(f"unknown dimension: {dimension}")


@dataclass
class CorpusSplit:
    specialization: set
    train: set
    dev: set
    test: set
    dimension: str
    task: str
    seed: int
    corpus_digest: str = ""

    def partitions(self):
        return {"specialization": self.specialization, "train": self.train,
                "dev": self.dev, "test": self.test}

    def to_json(self):
        return {
            "specialization": sorted(self.specialization),
            "train": sorted(self.train),
            "dev": sorted(self.dev),
            "test": sorted(self.test),
            "dimension": self.dimension,
            "task": self.task,
            "seed": self.seed,
            "corpus_digest": self.corpus_digest,
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            specialization=set(data["specialization"]),
            train=set(data["train"]),
            dev=set(data["dev"]),
            test=set(data["test"]),
            dimension=data["dimension"],
            task=data["task"],
            seed=data["seed"],
            corpus_digest=data.get("corpus_digest", ""),
        )


@dataclass
class MaskedBatch:
    token_ids: np.ndarray        # int64, batch x seq, with masked positions replaced
    mask_positions: np.ndarray   # bool, same shape
    original_ids: np.ndarray     # int64, same shape
    sequence_labels: np.ndarray | None = None  # int64 per row, or None


def corpus_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_record(obj, schema):
    if schema:
        obj = {schema.get(k, k): v for k, v in obj.items()}
    if not obj.get("id"):
        raise ValueError("missing id")
    text = obj.get("text")
    if not text or not str(text).split():
        raise ValueError("missing or empty text")
    gender = obj.get("gender")
    if gender is not None and gender not in GENDER_CLASSES:
        raise ValueError(f"invalid gender: {gender!r}")
    age = obj.get("age_group")
    if age is not None and age not in AGE_CLASSES:
        raise ValueError(f"invalid age_group: {age!r}")
    rating = obj.get("rating")
    if rating is not None:
        rating = int(rating)
        if not 1 <= rating <= 5:
            raise ValueError(f"rating out of range: {rating}")
    return LabeledDocument(
        id=str(obj["id"]), text=str(text),
        country=obj.get("country") or "", language=obj.get("language") or "",
        gender=gender, age_group=age, rating=rating,
        topic=obj.get("topic"), domain_tag=obj.get("domain_tag") or "",
    )


def load_corpus(path, schema=None):
    """Read a JSONL corpus; returns (documents, diagnostics).

    Each diagnostic is (line_number, message). Bad lines are skipped,
    an unreadable file is fatal.
    """
    path = Path(path)
    if not path.is_file():
        raise ResourceMissingError(f"corpus file not found: {path}")
    docs, diagnostics = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append(_parse_record(obj, schema))
            except (ValueError, TypeError) as exc:
                diagnostics.append((lineno, str(exc)))
    return docs, diagnostics


def save_corpus(docs, path):
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(json.dumps(doc.to_json()) + "\n")


def _eligible(doc, dimension, task):
    if doc.demographic_class(dimension) is None:
        return False
    if task in ("SA", "AC-SA"):
        return doc.rating in SA_RATINGS
    if task in ("TD", "AC-TD"):
        return doc.topic is not None
    raise ContractError(f"unknown task: {task}")


def make_split(docs, dimension, task, seed, finetune_fraction=1.0):
    """Partition documents into specialization / train / dev / test.

    Fine-tuning partitions are demographically balanced and split exactly
    60/20/20 (per-class pools are trimmed to a multiple of 5); for topic
    tasks the split is additionally stratified by topic. Everything not
    selected for fine-tuning lands in the specialization partition;
    `finetune_fraction` caps how much of each eligible class feeds the
    fine-tuning pool.
    """
    if not 0.0 < finetune_fraction <= 1.0:
        raise ContractError("finetune_fraction must be in (0, 1]")
    if dimension not in DIMENSIONS:
        raise ContractError(f"unknown dimension: {dimension}")
    if task not in TASKS:
        raise ContractError(f"unknown task: {task}")
    classes = dimension_classes(dimension)
    eligible = [d for d in docs if _eligible(d, dimension, task)]

    by_stratum = defaultdict(lambda: defaultdict(list))
    for doc in eligible:
        stratum = doc.topic if task in ("TD", "AC-TD") else None
        by_stratum[stratum][doc.demographic_class(dimension)].append(doc.id)

    counts = {c: sum(len(cells[c]) for cells in by_stratum.values()) for c in classes}
    for c in classes:
        if counts[c] < 5:
            raise ContractError(
                f"too few documents for a balanced split: class {c} has "
                f"{counts[c]} eligible documents (classes: {counts})")

    rng = np.random.default_rng(seed)
    train, dev, test = set(), set(), set()
    for stratum in sorted(by_stratum, key=str):
        cells = by_stratum[stratum]
        m = min(len(cells.get(c, [])) for c in classes)
        m = 5 * (int(m * finetune_fraction) // 5)
        if m == 0:
            continue
        n_dev = int(m * SPLIT_RATIO[1])
        n_test = int(m * SPLIT_RATIO[2])
        for c in classes:
            ids = sorted(cells[c])
            rng.shuffle(ids)
            picked = ids[:m]
            train.update(picked[: m - n_dev - n_test])
            dev.update(picked[m - n_dev - n_test: m - n_test])
            test.update(picked[m - n_test:])
    if not train:
        raise ContractError(
            f"too few documents for a balanced split (per-class counts: {counts})")
    used = train | dev | test
    specialization = {d.id for d in docs} - used
    return CorpusSplit(specialization=specialization, train=train, dev=dev,
                       test=test, dimension=dimension, task=task, seed=seed)


def balance_topics(docs, k, dimension="gender"):
    """Keep the k most frequent topics, downsampled so both demographic
    classes contribute equally within each retained topic.

    Deterministic: documents are kept in a stable id order per cell.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    classes = dimension_classes(dimension)
    labeled = [d for d in docs if d.topic is not None
               and d.demographic_class(dimension) in classes]
    topic_counts = Counter(d.topic for d in labeled)
    if len(topic_counts) < k:
        raise ContractError(
            f"need at least {k} distinct topics, found {len(topic_counts)}")
    retained = [t for t, _ in sorted(topic_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]

    cells = defaultdict(list)
    for doc in labeled:
        if doc.topic in retained:
            cells[(doc.topic, doc.demographic_class(dimension))].append(doc)
    out = []
    for topic in retained:
        n = min(len(cells[(topic, c)]) for c in classes)
        for c in classes:
            out.extend(sorted(cells[(topic, c)], key=lambda d: d.id)[:n])
    return out


def sample_specialization(docs, dimension, n_per_group, seed):
    """Sample exactly n_per_group documents per demographic class,
    uniformly without replacement."""
    if n_per_group < 0:
        raise ContractError("n_per_group must be >= 0")
    classes = dimension_classes(dimension)
    by_class = defaultdict(list)
    for doc in docs:
        c = doc.demographic_class(dimension)
        if c in classes:
            by_class[c].append(doc)
    rng = np.random.default_rng(seed)
    out = []
    for c in classes:
        pool = sorted(by_class[c], key=lambda d: d.id)
        if len(pool) < n_per_group:
            raise ContractError(
                f"group {c} has {len(pool)} documents, need {n_per_group} "
                f"(short by {n_per_group - len(pool)})")
        idx = rng.choice(len(pool), size=n_per_group, replace=False)
        out.extend(pool[i] for i in sorted(idx))
    return out


def mask_tokens(token_ids, rate, rng_seed, *, mask_id, special_ids,
                sequence_labels=None, mixed_replacement=False, vocab_size=None):
    """Independently mask each eligible position with probability `rate`.

    Eligible positions are those not holding a special token (padding,
    sequence-start, existing masks). Selected tokens are replaced by
    `mask_id`; the originals are preserved in `original_ids`. With
    `mixed_replacement` the selected positions are 80% `mask_id`, 10% a
    random non-special token (requires `vocab_size`), and 10% unchanged;
    the loss still covers every selected position.
    """
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"mask rate must be in [0, 1], got {rate}")
    if mixed_replacement and vocab_size is None:
        raise ContractError("mixed_replacement requires vocab_size")
    original = np.asarray(token_ids, dtype=np.int64)
    eligible = ~np.isin(original, np.asarray(list(special_ids), dtype=np.int64))
    rng = np.random.default_rng(rng_seed)
    mask_positions = eligible & (rng.random(original.shape) < rate)
    masked = original.copy()
    if mixed_replacement:
        u = rng.random(original.shape)
        randoms = rng.integers(len(special_ids), vocab_size, size=original.shape)
        masked[mask_positions & (u < 0.8)] = mask_id
        swap = mask_positions & (u >= 0.8) & (u < 0.9)
        masked[swap] = randoms[swap]
    else:
        masked[mask_positions] = mask_id
    labels = None
    if sequence_labels is not None:
        labels = np.asarray(sequence_labels, dtype=np.int64)
        if labels.shape[0] != original.shape[0]:
            raise ContractError("sequence_labels length must match batch size")
    return MaskedBatch(token_ids=masked, mask_positions=mask_positions,
                       original_ids=original, sequence_labels=labels)


def save_split(split, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(split.to_json(), f, indent=1)


def load_split(path):
    path = Path(path)
    if not path.is_file():
        raise ResourceMissingError(f"split manifest not found: {path}")
    with open(path, encoding="utf-8") as f:
        return CorpusSplit.from_json(json.load(f))
