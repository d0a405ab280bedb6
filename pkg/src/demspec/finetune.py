"""Supervised fine-tuning and evaluation for AC, SA, and TD.

A fresh classification head is trained on top of the (optionally
specialized) encoder; model selection runs one trial per learning rate and
early-stops on development macro-F1.
"""

from dataclasses import dataclass, asdict

import numpy as np
import torch

from .corpus import dimension_classes, SA_RATINGS
from .errors import ContractError
from .model import ClassifierHead, make_checkpoint
from .specialize import EarlyStopping, _snapshot, _restore

TASKS = ("AC", "SA", "TD")
TASK_CLASS_COUNTS = {"AC": 2, "SA": 3, "TD": 5}
SUBSETS = ("class-A-only", "class-B-only", "mixed")

DEFAULT_LR_GRID = (5e-5, 1e-5, 5e-6, 1e-6)

SA_CLASSES = ("negative", "neutral", "positive")
_SA_MAP = dict(zip(SA_RATINGS, SA_CLASSES))


def sa_label(rating):
    """Map a star rating to its sentiment class: 1 -> negative, 3 -> neutral,
    5 -> positive."""
    if rating not in _SA_MAP:
        raise ContractError(f"rating {rating!r} has no sentiment class")
    return _SA_MAP[rating]


@dataclass
class FineTuneConfig:
    task: str = "SA"
    dimension: str = "gender"
    epochs: int = 20
    batch_size: int = 32
    lr_grid: tuple = DEFAULT_LR_GRID
    patience: int = 5
    seed: int = 0
    max_seq_len: int = 128

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task: {self.task}")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if not self.lr_grid:
            raise ContractError("lr_grid must be non-empty")
        self.lr_grid = tuple(sorted(set(float(lr) for lr in self.lr_grid), reverse=True))

    def to_json(self):
        data = asdict(self)
        data["lr_grid"] = list(self.lr_grid)
        return data

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        if "lr_grid" in data:
            data["lr_grid"] = tuple(data["lr_grid"])
        return cls(**data)


def task_label(doc, task, dimension):
    """The class name for a document under a task, or None if unlabeled."""
    if task == "AC":
        return doc.demographic_class(dimension)
    if task == "SA":
        return sa_label(doc.rating) if doc.rating in SA_RATINGS else None
    if task == "TD":
        return doc.topic
    raise ContractError(f"unknown task: {task}")


def task_classes(docs, task, dimension):
    """Derive the ordered class vocabulary and check its cardinality."""
    if task == "AC":
        classes = list(dimension_classes(dimension))
    elif task == "SA":
        classes = list(SA_CLASSES)
    else:
        classes = sorted({doc.topic for doc in docs if doc.topic is not None})
    expected = TASK_CLASS_COUNTS[task]
    if len(classes) != expected:
        raise ContractError(
            f"task {task} requires {expected} classes, found {len(classes)}: {classes}")
    return classes


def _encode_labeled(docs, tokenizer, max_len, task, dimension, classes):
    ids, labels = [], []
    index = {c: i for i, c in enumerate(classes)}
    for doc in docs:
        label = task_label(doc, task, dimension)
        if label is None:
            raise ContractError(f"document {doc.id} lacks a {task} label")
        if label not in index:
            raise ContractError(f"document {doc.id} has unknown class {label!r}")
        ids.append(tokenizer.encode(doc.text, max_len))
        labels.append(index[label])
    return np.stack(ids), np.asarray(labels, dtype=np.int64)


def macro_f1(y_true, y_pred, n_classes):
    """Macro-averaged F1 over all task classes (absent classes score 0)."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def _predict(encoder, head, token_ids, batch_size=256):
    encoder.eval()
    head.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(token_ids), batch_size):
            encoded = encoder(torch.as_tensor(token_ids[start:start + batch_size]))
            logits = head(encoded.sequence_state)
            preds.append(logits.argmax(dim=-1).numpy())
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def finetune(base, train_docs, dev_docs, config):
    """Fine-tune the encoder plus a fresh classification head.

    Winner across the learning-rate grid is the trial with the best
    development macro-F1; within a trial, the best epoch's weights are kept.
    With epochs=0 the base encoder is returned unchanged (fresh head).
    """
    tokenizer = base.tokenizer
    enc_cfg = base.encoder_config
    max_len = min(config.max_seq_len, enc_cfg.max_seq_len)
    classes = task_classes(train_docs + dev_docs, config.task, config.dimension)
    x_train, y_train = _encode_labeled(train_docs, tokenizer, max_len,
                                       config.task, config.dimension, classes)
    x_dev, y_dev = _encode_labeled(dev_docs, tokenizer, max_len,
                                   config.task, config.dimension, classes)

    best_trial = None
    for trial_no, lr in enumerate(config.lr_grid):
        torch.manual_seed(config.seed * 7919 + trial_no)
        trial_rng = np.random.default_rng([config.seed, trial_no, 77])
        encoder = base.build_encoder()
        head = ClassifierHead(enc_cfg.hidden_dim, len(classes))
        modules = {"encoder": encoder, "head": head}
        optimizer = torch.optim.Adam(
            [p for m in modules.values() for p in m.parameters()],
            lr=lr, betas=(0.9, 0.999), eps=1e-8)

        stopper = EarlyStopping(config.patience)
        best_state = _snapshot(modules)
        best_f1 = -1.0
        for epoch in range(1, config.epochs + 1):
            encoder.train()
            head.train()
            perm = trial_rng.permutation(len(x_train))
            for start in range(0, len(perm), config.batch_size):
                idx = perm[start:start + config.batch_size]
                encoded = encoder(torch.as_tensor(x_train[idx]))
                logits = head(encoded.sequence_state)
                loss = torch.nn.functional.cross_entropy(
                    logits, torch.as_tensor(y_train[idx]))
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            dev_f1 = macro_f1(y_dev, _predict(encoder, head, x_dev), len(classes))
            # EarlyStopping minimizes, so monitor the negated F1
            improved = dev_f1 > best_f1
            stop = stopper.update(-dev_f1, epoch)
            if improved:
                best_f1 = dev_f1
                best_state = _snapshot(modules)
            if stop:
                break
        _restore(modules, best_state)
        if best_trial is None or best_f1 > best_trial[0]:
            best_trial = (best_f1, lr, _snapshot(modules))
        if config.epochs == 0:
            break  # identity contract: no training, grid is irrelevant

    best_f1, lr, state = best_trial
    _restore(modules, state)
    meta = {
        "kind": "classifier",
        "task": config.task,
        "dimension": config.dimension,
        "classes": classes,
        "config": config.to_json(),
        "selected_lr": lr,
        "dev_f1": best_f1,
        "base_meta": base.meta,
    }
    return make_checkpoint(encoder, tokenizer, heads={"classifier": head}, meta=meta)


def filter_subset(docs, subset, dimension):
    """Select test documents by demographic class: class-A-only,
    class-B-only, or mixed."""
    if subset not in SUBSETS:
        raise ContractError(f"unknown subset: {subset}")
    if subset == "mixed":
        return list(docs)
    target = dimension_classes(dimension)[0 if subset == "class-A-only" else 1]
    return [d for d in docs if d.demographic_class(dimension) == target]


def evaluate(classifier, docs, subset="mixed", dimension=None):
    """Macro-averaged F1 of a fine-tuned classifier on the filtered test set."""
    meta = classifier.meta
    task = meta["task"]
    dimension = dimension or meta["dimension"]
    classes = meta["classes"]
    selected = filter_subset(docs, subset, dimension)
    if not selected:
        raise ContractError(f"no test documents in subset {subset!r}",
                            code="EMPTY_SUBSET")
    selected = sorted(selected, key=lambda d: d.id)
    tokenizer = classifier.tokenizer
    max_len = classifier.encoder_config.max_seq_len
    x, y = _encode_labeled(selected, tokenizer, max_len, task, dimension, classes)
    encoder = classifier.build_encoder()
    head = classifier.build_head(
        "classifier", lambda: ClassifierHead(classifier.encoder_config.hidden_dim,
                                             len(classes)))
    preds = _predict(encoder, head, x)
    return macro_f1(y, preds, len(classes))
