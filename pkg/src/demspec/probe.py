"""Representation-space probe: embed documents, project to 2D for plotting,
and score cluster separation quantitatively.

The separation score is the mean silhouette coefficient in the full
embedding space; the 2D projection is cosmetic and never feeds the score.
"""

import csv
import json

import numpy as np
import torch
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_samples, silhouette_score
from sklearn.metrics import pairwise_distances

from .errors import ContractError


def embed_corpus(checkpoint, docs, batch_size=256):
    """Sequence-start embeddings for each document (n x hidden), plus the
    documents' label columns."""
    if not docs:
        raise ContractError("no documents to embed")
    tokenizer = checkpoint.tokenizer
    max_len = checkpoint.encoder_config.max_seq_len
    encoder = checkpoint.build_encoder()
    encoder.eval()
    token_ids = tokenizer.encode_batch([d.text for d in docs], max_len)
    rows = []
    with torch.no_grad():
        for start in range(0, len(token_ids), batch_size):
            encoded = encoder(torch.as_tensor(token_ids[start:start + batch_size]))
            rows.append(encoded.sequence_state.numpy())
    embeddings = np.concatenate(rows)
    labels = {
        "gender": [d.gender for d in docs],
        "age": [d.age_group for d in docs],
        "language": [d.language for d in docs],
        "country": [d.country for d in docs],
    }
    return embeddings, labels


def project_2d(X, seed):
    """Nonlinear 2D projection (t-SNE), deterministic per seed. For figures
    only."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 5:
        raise ContractError("project_2d requires at least 5 points")
    perplexity = min(30.0, (X.shape[0] - 1) / 3.0)
    tsne = TSNE(n_components=2, random_state=seed, perplexity=perplexity,
                init="pca")
    return tsne.fit_transform(X)


def _check_labels(labels):
    labels = np.asarray(labels)
    values, counts = np.unique(labels, return_counts=True)
    if len(values) < 2:
        raise ContractError("separation_score requires at least 2 classes")
    if counts.min() < 2:
        singles = [str(v) for v, c in zip(values, counts) if c < 2]
        raise ContractError(f"singleton class(es): {', '.join(singles)}")
    return labels


def separation_score(X, labels):
    """Mean silhouette coefficient under Euclidean distance in the full
    embedding space; in [-1, 1], ~0 means no separation."""
    X = np.asarray(X, dtype=float)
    labels = _check_labels(labels)
    return float(silhouette_score(X, labels, metric="euclidean"))


def permutation_null(X, labels, n_shuffles=100, seed=0):
    """Silhouette scores under label permutation; the null distribution a
    real separation must beat."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(_check_labels(labels))
    rng = np.random.default_rng(seed)
    distances = pairwise_distances(X, metric="euclidean")
    scores = []
    for _ in range(n_shuffles):
        shuffled = rng.permutation(labels)
        scores.append(float(np.mean(
            silhouette_samples(distances, shuffled, metric="precomputed"))))
    return np.asarray(scores)


def write_points_csv(points, labels, label_name, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", label_name])
        for (x, y), label in zip(points, labels):
            writer.writerow([f"{x:.6f}", f"{y:.6f}", label])


def write_score_json(path, checkpoint_path, label_name, score, null_scores):
    summary = {
        "checkpoint": str(checkpoint_path),
        "label_dimension": label_name,
        "silhouette": score,
        "permutation_null_mean": float(np.mean(null_scores)),
        "permutation_null_std": float(np.std(null_scores)),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1)
    return summary
