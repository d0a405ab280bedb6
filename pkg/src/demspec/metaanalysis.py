"""Meta-regression of specialization effects on one-hot experiment features.

Predicts the F1 delta versus the vanilla baseline (in percentage points)
from one-hot groups: country, method, specialization domain, base model,
test subset, plus an intercept. One-hot groups plus an intercept are
collinear; the fit uses minimum-norm least squares so every indicator keeps
a nameable weight.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

GROUPS = ("country", "method", "spec_domain", "base_model", "subset")

ABLATION_CODES = {"-D": "spec_domain", "-M": "base_model", "-S": "subset",
                  "-C": "country", "-A": "method"}

DEFAULT_VOCABULARIES = {
    "country": ("Denmark", "France", "Germany", "UK", "US"),
    "method": ("MLM", "DS-Seq", "DS-Tok"),
    "spec_domain": ("in-domain", "out-of-domain"),
    "base_model": ("monolingual", "multilingual"),
    "subset": ("class-A-only", "class-B-only", "mixed"),
}


@dataclass
class FeatureSpace:
    vocabularies: dict = field(default_factory=lambda: dict(DEFAULT_VOCABULARIES))

    def feature_names(self):
        names = ["intercept"]
        for group in GROUPS:
            names.extend(f"{group}={v}" for v in self.vocabularies[group])
        return names

    def encode(self, record):
        """One-hot encode a record (mapping or object with the group fields)."""
        row = [1.0]
        for group in GROUPS:
            value = record[group] if isinstance(record, dict) else getattr(record, group)
            vocab = self.vocabularies[group]
            if value not in vocab:
                raise ContractError(f"unknown {group} category: {value!r}")
            row.extend(1.0 if v == value else 0.0 for v in vocab)
        return np.asarray(row)

    def matrix(self, records):
        if not records:
            raise ContractError("no records to encode")
        return np.stack([self.encode(r) for r in records])


def build_features(record, space=None):
    """FeatureVector for one result record: (names, values)."""
    space = space or FeatureSpace()
    return space.feature_names(), space.encode(record)


@dataclass
class RegressionFit:
    feature_names: list
    weights: np.ndarray
    rmse: float
    ablation: dict = field(default_factory=dict)

    def weight(self, name):
        return float(self.weights[self.feature_names.index(name)])

    def named_weights(self):
        return list(zip(self.feature_names, self.weights.tolist()))


def _solve(X, y):
    weights, *_ = np.linalg.lstsq(X, y, rcond=None)
    residuals = y - X @ weights
    return weights, float(np.sqrt(np.mean(residuals**2)))


def fit_regression(X, y, feature_names=None):
    """Minimum-norm ordinary least squares; rmse is the in-sample root mean
    squared residual."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.size == 0 or y.size == 0:
        raise ContractError("empty regression input")
    if X.shape[0] != y.shape[0]:
        raise ContractError("X and y row counts differ")
    if not np.all(np.isfinite(y)):
        raise ContractError("y must be finite")
    if feature_names is None:
        feature_names = [f"x{i}" for i in range(X.shape[1])]
    weights, rmse = _solve(X, y)
    return RegressionFit(feature_names=list(feature_names), weights=weights, rmse=rmse)


def ablate(X, y, feature_names, exclude):
    """RMSE after refitting without one feature group's columns.

    `exclude` is an ablation code (-D, -M, -S, -C, -A) or a group name.
    """
    group = ABLATION_CODES.get(exclude, exclude)
    if group not in GROUPS:
        raise ContractError(f"unknown feature group: {exclude!r}")
    keep = [i for i, name in enumerate(feature_names)
            if not name.startswith(f"{group}=")]
    if len(keep) == len(feature_names):
        raise ContractError(f"no columns belong to group {group!r}")
    X = np.asarray(X, dtype=float)
    _, rmse = _solve(X[:, keep], np.asarray(y, dtype=float))
    return rmse


def fit_with_ablations(X, y, feature_names, codes=tuple(ABLATION_CODES)):
    fit = fit_regression(X, y, feature_names)
    for code in codes:
        group = ABLATION_CODES[code]
        if any(name.startswith(f"{group}=") for name in feature_names):
            fit.ablation[code] = ablate(X, y, feature_names, code)
    return fit


def build_meta_dataset(records):
    """Turn a results store into per-(dataset, dimension) regression inputs.

    Each non-vanilla record contributes one data point: its F1 delta (in
    percentage points) against the seed-averaged vanilla baseline of the
    same country / dataset / dimension / subset / base model. Feature
    vocabularies are derived from the observed records.

    Returns {(dataset, dimension): (X, y, feature_names, FeatureSpace)}.
    """
    baselines = {}
    for r in records:
        if r.method == "vanilla":
            key = (r.country, r.dataset, r.dimension, r.subset, r.base_model)
            baselines.setdefault(key, []).append(r.f1)

    grouped = {}
    for r in records:
        if r.method == "vanilla":
            continue
        key = (r.country, r.dataset, r.dimension, r.subset, r.base_model)
        if key not in baselines:
            continue
        baseline = sum(baselines[key]) / len(baselines[key])
        point = {"country": r.country, "method": r.method,
                 "spec_domain": r.spec_domain, "base_model": r.base_model,
                 "subset": r.subset}
        grouped.setdefault((r.dataset, r.dimension), []).append(
            (point, 100.0 * (r.f1 - baseline)))

    out = {}
    for key, points in grouped.items():
        vocab = {g: tuple(sorted({p[g] for p, _ in points})) for g in GROUPS}
        space = FeatureSpace(vocabularies=vocab)
        X = space.matrix([p for p, _ in points])
        y = np.asarray([d for _, d in points])
        out[key] = (X, y, space.feature_names(), space)
    return out


def select_important(fit, threshold=0.5):
    """Features with weight above the threshold, heaviest first; ties break
    on feature name."""
    chosen = [(name, float(w)) for name, w in fit.named_weights()
              if name != "intercept" and w > threshold]
    return sorted(chosen, key=lambda kv: (-kv[1], kv[0]))
