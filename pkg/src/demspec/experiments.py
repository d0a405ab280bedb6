"""Experiment grid: method x dimension x country x base model x
specialization domain x task x seed, with a resumable JSONL results store.

The registry (a JSON file) maps corpora and base-model seeds to concrete
paths; cells are isolated jobs whose failures are reported without aborting
the run.
"""

import hashlib
import json
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

import torch

from . import corpus as corpus_mod
from .corpus import load_corpus, make_split
from .errors import ContractError, ResourceMissingError
from .finetune import FineTuneConfig, SUBSETS, evaluate, finetune
from .model import Encoder, EncoderConfig, make_checkpoint
from .specialize import SpecializationConfig, specialize
from .tokenizer import Tokenizer

METHODS = ("vanilla", "MLM", "DS-Seq", "DS-Tok")
DATASETS = ("AC-SA", "AC-TD", "SA", "TD")
DATASET_TASK = {"AC-SA": "AC", "AC-TD": "AC", "SA": "SA", "TD": "TD"}


@dataclass
class ResultRecord:
    country: str
    language: str
    task: str
    dataset: str
    method: str
    dimension: str
    base_model: str
    spec_domain: str
    subset: str
    seed: int
    f1: float
    cell_digest: str = ""
    corpus_digest: str = ""

    def __post_init__(self):
        if not 0.0 <= self.f1 <= 1.0:
            raise ContractError(f"f1 out of range: {self.f1}")
        if self.method == "vanilla" and self.spec_domain != "none":
            raise ContractError("vanilla cells must have spec_domain=none")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class ExperimentGrid:
    methods: tuple
    dimensions: tuple
    countries: tuple
    base_models: tuple = ("multilingual",)
    spec_domains: tuple = ("in-domain",)
    tasks: tuple = ("SA",)
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        for axis in ("methods", "dimensions", "countries", "base_models",
                     "spec_domains", "tasks", "seeds"):
            value = tuple(getattr(self, axis))
            if not value:
                raise ContractError(f"grid axis {axis} is empty")
            setattr(self, axis, value)

    def cells(self):
        """All concrete cells; vanilla collapses the spec_domain axis."""
        out = []
        for method in self.methods:
            domains = ("none",) if method == "vanilla" else self.spec_domains
            for dimension in self.dimensions:
                for country in self.countries:
                    for base_model in self.base_models:
                        for domain in domains:
                            for dataset in self.tasks:
                                for seed in self.seeds:
                                    out.append({
                                        "method": method, "dimension": dimension,
                                        "country": country, "base_model": base_model,
                                        "spec_domain": domain, "dataset": dataset,
                                        "seed": seed})
        return out

    @classmethod
    def from_json(cls, data):
        return cls(**{k: tuple(v) for k, v in data.items()})


class Registry:
    """Resolves grid cells to corpora and configurations."""

    def __init__(self, data, root="."):
        self.data = data
        self.root = Path(root)
        self._corpora = {}
        self._digests = {}
        self._bases = {}

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ResourceMissingError(f"registry not found: {path}")
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f), root=path.parent)

    def corpus_path(self, country, domain):
        key = f"{country}/{domain}"
        entry = self.data.get("corpora", {}).get(key)
        if entry is None:
            raise ResourceMissingError(f"registry has no corpus for {key!r}")
        path = Path(entry)
        return path if path.is_absolute() else self.root / path

    def corpus(self, country, domain):
        key = (country, domain)
        if key not in self._corpora:
            path = self.corpus_path(country, domain)
            docs, _ = load_corpus(path)
            self._corpora[key] = docs
            self._digests[key] = corpus_mod.corpus_digest(path)
        return self._corpora[key], self._digests[key]

    @property
    def eval_domain(self):
        return self.data.get("eval_domain", "reviews")

    @property
    def ood_domain(self):
        return self.data.get("ood_domain")

    def encoder_config(self, vocab_size):
        cfg = dict(self.data.get("encoder", {}))
        cfg["vocab_size"] = vocab_size
        return EncoderConfig.from_json(cfg)

    def spec_config(self, **overrides):
        cfg = {**self.data.get("specialize", {}), **overrides}
        return SpecializationConfig.from_json(cfg)

    def finetune_config(self, **overrides):
        cfg = {**self.data.get("finetune", {}), **overrides}
        return FineTuneConfig.from_json(cfg)

    def base_checkpoint(self, country, base_model):
        """Fresh encoder over a tokenizer covering all of the country's
        corpora; seeded per base-model name."""
        key = (country, base_model)
        if key not in self._bases:
            seeds = self.data.get("base_seeds", {})
            if base_model not in seeds:
                raise ResourceMissingError(
                    f"registry has no base model {base_model!r}")
            texts = []
            for corp_key in sorted(self.data.get("corpora", {})):
                c_country, domain = corp_key.split("/", 1)
                if c_country == country:
                    docs, _ = self.corpus(c_country, domain)
                    texts.extend(d.text for d in docs)
            if not texts:
                raise ResourceMissingError(f"no corpora for country {country!r}")
            vocab_cap = int(self.data.get("max_vocab_size", 8000))
            tokenizer = Tokenizer.build(texts, vocab_cap)
            torch.manual_seed(int(seeds[base_model]))
            encoder = Encoder(self.encoder_config(tokenizer.vocab_size))
            self._bases[key] = make_checkpoint(
                encoder, tokenizer,
                meta={"kind": "base", "base_model": base_model, "country": country})
        return self._bases[key]


def cell_digest(cell, corpus_digests):
    blob = json.dumps({"cell": cell, "corpora": corpus_digests}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def load_results(path):
    path = Path(path)
    records = []
    if path.is_file():
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    records.append(ResultRecord.from_json(json.loads(line)))
    return records


def append_results(path, records):
    with open(path, "a", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_json()) + "\n")


def run_cell(cell, registry):
    """Run one grid cell end to end; returns one ResultRecord per subset."""
    dataset = cell["dataset"]
    task = DATASET_TASK[dataset]
    dimension, country, seed = cell["dimension"], cell["country"], cell["seed"]
    docs, eval_digest = registry.corpus(country, registry.eval_domain)
    digests = {"eval": eval_digest}
    fraction = float(registry.data.get("finetune_fraction", 0.5))
    split = make_split(docs, dimension, dataset, seed, finetune_fraction=fraction)

    base = registry.base_checkpoint(country, cell["base_model"])
    if cell["method"] == "vanilla":
        ckpt = base
    else:
        if cell["spec_domain"] == "out-of-domain":
            if registry.ood_domain is None:
                raise ResourceMissingError("registry has no ood_domain configured")
            spec_docs, ood_digest = registry.corpus(country, registry.ood_domain)
            digests["spec"] = ood_digest
        else:
            by_id = {d.id: d for d in docs}
            spec_docs = [by_id[i] for i in sorted(split.specialization)]
            digests["spec"] = eval_digest
        if cell["method"] != "MLM":
            spec_docs = [d for d in spec_docs
                         if d.demographic_class(dimension) is not None]
        spec_cfg = registry.spec_config(method=cell["method"],
                                        dimension=dimension, seed=seed)
        ckpt, _ = specialize(spec_docs, spec_cfg, base=base,
                             corpus_digest=digests["spec"])

    by_id = {d.id: d for d in docs}
    train_docs = [by_id[i] for i in sorted(split.train)]
    dev_docs = [by_id[i] for i in sorted(split.dev)]
    test_docs = [by_id[i] for i in sorted(split.test)]
    ft_cfg = registry.finetune_config(task=task, dimension=dimension, seed=seed)
    classifier = finetune(ckpt, train_docs, dev_docs, ft_cfg)

    digest = cell_digest(cell, digests)
    language = docs[0].language if docs else ""
    records = []
    for subset in SUBSETS:
        f1 = evaluate(classifier, test_docs, subset=subset, dimension=dimension)
        records.append(ResultRecord(
            country=country, language=language, task=task, dataset=dataset,
            method=cell["method"], dimension=dimension,
            base_model=cell["base_model"], spec_domain=cell["spec_domain"],
            subset=subset, seed=seed, f1=f1,
            cell_digest=digest, corpus_digest=eval_digest))
    return records


def _run_cell_isolated(args):
    cell, registry_path = args
    registry = Registry.load(registry_path)
    return cell, run_cell(cell, registry)


def run_grid(grid, registry, results_path, workers=1, registry_path=None):
    """Run every unfinished cell; returns (all_records, report).

    Completed cells (all subsets present under the cell digest) are skipped,
    so reruns are cheap. Failures are isolated per cell.
    """
    existing = load_results(results_path)
    done = defaultdict(set)
    for record in existing:
        done[record.cell_digest].add(record.subset)

    pending = []
    report = {"executed": 0, "skipped": 0, "failures": []}
    for cell in grid.cells():
        try:
            digests = {"eval": corpus_mod.corpus_digest(
                registry.corpus_path(cell["country"], registry.eval_domain))}
            if cell["method"] != "vanilla" and cell["spec_domain"] == "out-of-domain":
                digests["spec"] = corpus_mod.corpus_digest(
                    registry.corpus_path(cell["country"], registry.ood_domain))
            elif cell["method"] != "vanilla":
                digests["spec"] = digests["eval"]
        except (ResourceMissingError, ContractError) as exc:
            report["failures"].append({"cell": cell, "error": str(exc)})
            continue
        digest = cell_digest(cell, digests)
        if set(SUBSETS) <= done[digest]:
            report["skipped"] += 1
            continue
        pending.append(cell)

    new_records = []
    if workers > 1 and registry_path is not None and pending:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cell, records in pool.map(
                    _run_cell_isolated,
                    [(c, registry_path) for c in pending]):
                append_results(results_path, records)
                new_records.extend(records)
                report["executed"] += 1
    else:
        for cell in pending:
            try:
                records = run_cell(cell, registry)
            except (ContractError, ResourceMissingError) as exc:
                report["failures"].append({"cell": cell, "error": str(exc)})
                continue
            append_results(results_path, records)
            new_records.extend(records)
            report["executed"] += 1
    return existing + new_records, report


def _mean(values):
    return sum(values) / len(values)


GROUP_FIELDS = ("country", "dataset", "dimension", "subset", "base_model")
CELL_FIELDS = ("method", "spec_domain")


def _matches(record, selector):
    return all(getattr(record, k) == v for k, v in selector.items())


def delta_table(records, baseline_selector, scale=1.0):
    """Per-cell F1 deltas against matching baseline cells, seed-averaged.

    `baseline_selector` is a dict of record fields identifying baseline rows,
    e.g. {"method": "vanilla"}. Returns (rows, unpaired) where each row maps
    the group and cell fields to their values plus "delta".
    """
    groups = defaultdict(lambda: defaultdict(list))
    for record in records:
        gkey = tuple(getattr(record, f) for f in GROUP_FIELDS)
        ckey = tuple(getattr(record, f) for f in CELL_FIELDS)
        groups[gkey][ckey].append(record)

    rows, unpaired = [], []
    for gkey in sorted(groups):
        cells = groups[gkey]
        baseline_scores = [r.f1 for rs in cells.values() for r in rs
                           if _matches(r, baseline_selector)]
        for ckey in sorted(cells):
            cell_records = cells[ckey]
            if all(_matches(r, baseline_selector) for r in cell_records):
                continue
            row = dict(zip(GROUP_FIELDS, gkey)) | dict(zip(CELL_FIELDS, ckey))
            if not baseline_scores:
                unpaired.append(row)
                continue
            delta = _mean([r.f1 for r in cell_records]) - _mean(baseline_scores)
            row["delta"] = delta * scale
            rows.append(row)
    return rows, unpaired


def check_digest_consistency(records):
    """Refuse to mix results computed against different corpora."""
    seen = defaultdict(set)
    for record in records:
        seen[(record.country, record.dataset, record.dimension)].add(
            record.corpus_digest)
    for key, digests in seen.items():
        if len(digests) > 1:
            raise ContractError(
                f"mixed corpus digests for {key}: {sorted(digests)}")


def results_table(records):
    """Seed-averaged F1 per (country, method, spec_domain) row and
    (dataset, subset) column; rows and columns sorted."""
    check_digest_consistency(records)
    cells = defaultdict(list)
    for record in records:
        row = (record.country, record.dimension, record.base_model,
               record.method, record.spec_domain)
        col = (record.dataset, record.subset)
        cells[(row, col)].append(record.f1)
    rows = sorted({rc[0] for rc in cells})
    cols = sorted({rc[1] for rc in cells})
    header = ["country", "dimension", "base_model", "method", "spec_domain"]
    header += [f"{d}:{s}" for d, s in cols]
    table = [header]
    for row in rows:
        line = list(row)
        for col in cols:
            values = cells.get((row, col))
            line.append(f"{100 * _mean(values):.1f}" if values else "")
        table.append(line)
    return table


def write_tsv(table, path):
    with open(path, "w", encoding="utf-8") as f:
        for row in table:
            f.write("\t".join(str(v) for v in row) + "\n")
