"""Command-line surface for the full pipeline.

Exit codes: 0 success, 2 usage error, 3 contract violation, 4 missing
resource. Contract violations print a machine-readable JSON object to
stderr. Config precedence everywhere: CLI flag > config file > default.
"""

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import corpus as corpus_mod
from . import experiments as exp_mod
from . import metaanalysis as meta_mod
from . import probe as probe_mod
from . import synthetic as synth_mod
from .errors import ContractError, DemspecError, ResourceMissingError
from .finetune import FineTuneConfig, evaluate as evaluate_fn, finetune as finetune_fn
from .model import EncoderConfig, load_checkpoint, save_checkpoint
from .specialize import SpecializationConfig, specialize as specialize_fn

METHOD_ALIASES = {"mlm": "MLM", "ds-seq": "DS-Seq", "ds-tok": "DS-Tok"}
SUBSET_ALIASES = {"a": "class-A-only", "b": "class-B-only", "mixed": "mixed"}


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ResourceMissingError as exc:
            click.echo(json.dumps(exc.to_json()), err=True)
            sys.exit(4)
        except DemspecError as exc:
            click.echo(json.dumps(exc.to_json()), err=True)
            sys.exit(3)
    return wrapper


def _load_json(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ResourceMissingError(f"config file not found: {p}")
    with open(p, encoding="utf-8") as f:
        return json.load(f)


@click.group()
def main():
    """Demographic-specialization toolkit."""


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def synth(spec_path, out_dir):
    """Generate a synthetic corpus from a SyntheticSpec JSON."""
    spec = synth_mod.SyntheticSpec.from_json(_load_json(spec_path))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs = synth_mod.generate_corpus(spec)
    corpus_mod.save_corpus(docs, out / "corpus.jsonl")
    synth_mod.save_spec(spec, out / "spec.json")
    click.echo(json.dumps({
        "documents": len(docs),
        "bayes_optimal_ac": synth_mod.bayes_optimal_ac(spec),
        "corpus": str(out / "corpus.jsonl"),
    }))


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--dimension", required=True, type=click.Choice(["gender", "age"]))
@click.option("--task", required=True, type=click.Choice(["AC-SA", "AC-TD", "SA", "TD"]))
@click.option("--seed", default=0, type=int)
@click.option("--finetune-fraction", default=0.5, show_default=True, type=float,
              help="share of each eligible class reserved for fine-tuning")
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def prepare(corpus_path, dimension, task, seed, finetune_fraction, out_dir):
    """Build a leak-free, demographically balanced split manifest."""
    docs, diagnostics = corpus_mod.load_corpus(corpus_path)
    split = corpus_mod.make_split(docs, dimension, task, seed,
                                  finetune_fraction=finetune_fraction)
    split.corpus_digest = corpus_mod.corpus_digest(corpus_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_mod.save_split(split, out / "split.json")
    with open(out / "source.json", "w", encoding="utf-8") as f:
        json.dump({"corpus": str(Path(corpus_path).resolve()),
                   "digest": split.corpus_digest}, f)
    click.echo(json.dumps({
        "train": len(split.train), "dev": len(split.dev),
        "test": len(split.test), "specialization": len(split.specialization),
        "parse_diagnostics": len(diagnostics),
    }))


def _load_prepared(data_dir):
    data_dir = Path(data_dir)
    split = corpus_mod.load_split(data_dir / "split.json")
    with open(data_dir / "source.json", encoding="utf-8") as f:
        source = json.load(f)
    docs, _ = corpus_mod.load_corpus(source["corpus"])
    digest = corpus_mod.corpus_digest(source["corpus"])
    if digest != source["digest"]:
        raise ContractError("corpus changed since the split was prepared")
    by_id = {d.id: d for d in docs}
    parts = {name: [by_id[i] for i in sorted(ids)]
             for name, ids in split.partitions().items()}
    return split, parts, digest


@main.command(name="specialize")
@click.option("--base", "base_path", default="fresh", show_default=True,
              help="checkpoint directory, or 'fresh' for a new encoder")
@click.option("--method", type=click.Choice(sorted(METHOD_ALIASES)), default=None)
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def specialize_cmd(base_path, method, config_path, data_dir, seed, out_dir):
    """Intermediate specialization on a prepared split's specialization
    portion."""
    raw = _load_json(config_path)
    encoder_cfg = raw.pop("encoder", None)
    if method is not None:
        raw["method"] = METHOD_ALIASES[method]
    if seed is not None:
        raw["seed"] = seed
    split, parts, digest = _load_prepared(data_dir)
    raw.setdefault("dimension", split.dimension)
    config = SpecializationConfig.from_json(raw)

    spec_docs = parts["specialization"]
    if config.method != "MLM":
        spec_docs = [d for d in spec_docs
                     if d.demographic_class(config.dimension) is not None]
    base = None
    enc = None
    if base_path != "fresh":
        base = load_checkpoint(base_path)
    else:
        enc = EncoderConfig.from_json({"vocab_size": 8000, **(encoder_cfg or {})})
    ckpt, log = specialize_fn(spec_docs, config, base=base, encoder_config=enc,
                              corpus_digest=digest)
    out = Path(out_dir)
    save_checkpoint(ckpt, out)
    with open(out / "training_log.jsonl", "w", encoding="utf-8") as f:
        for record in log:
            f.write(json.dumps(record) + "\n")
    click.echo(json.dumps({"checkpoint": str(out), "epochs_logged": len(log),
                           "selected_lr": ckpt.meta["selected_lr"],
                           "dev_objective": ckpt.meta["dev_objective"]}))


@main.command(name="finetune")
@click.option("--base", "base_path", required=True, type=click.Path())
@click.option("--task", type=click.Choice(["ac", "sa", "td"]), default=None)
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def finetune_cmd(base_path, task, config_path, data_dir, seed, out_dir):
    """Supervised fine-tuning on a prepared split."""
    raw = _load_json(config_path)
    if task is not None:
        raw["task"] = task.upper()
    if seed is not None:
        raw["seed"] = seed
    split, parts, _ = _load_prepared(data_dir)
    raw.setdefault("dimension", split.dimension)
    config = FineTuneConfig.from_json(raw)
    base = load_checkpoint(base_path)
    classifier = finetune_fn(base, parts["train"], parts["dev"], config)
    out = Path(out_dir)
    save_checkpoint(classifier, out)
    click.echo(json.dumps({"checkpoint": str(out),
                           "dev_f1": classifier.meta["dev_f1"],
                           "selected_lr": classifier.meta["selected_lr"]}))


@main.command(name="evaluate")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--subset", type=click.Choice(sorted(SUBSET_ALIASES)), default="mixed")
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def evaluate_cmd(model_path, data_dir, subset, seed, out_path):
    """Evaluate a classifier on a prepared split's test portion."""
    classifier = load_checkpoint(model_path)
    split, parts, digest = _load_prepared(data_dir)
    subset_name = SUBSET_ALIASES[subset]
    f1 = evaluate_fn(classifier, parts["test"], subset=subset_name,
                     dimension=split.dimension)
    record = exp_mod.ResultRecord(
        country=parts["test"][0].country, language=parts["test"][0].language,
        task=classifier.meta["task"], dataset=split.task,
        method=classifier.meta.get("base_meta", {}).get("method", "vanilla"),
        dimension=split.dimension, base_model="multilingual",
        spec_domain=("none" if classifier.meta.get("base_meta", {}).get("method")
                     is None else "in-domain"),
        subset=subset_name, seed=seed, f1=f1, corpus_digest=digest)
    exp_mod.append_results(out_path, [record])
    click.echo(json.dumps({"f1": f1, "subset": subset_name, "out": str(out_path)}))


@main.command(name="grid")
@click.option("--spec", "grid_path", required=True, type=click.Path())
@click.option("--registry", "registry_path", required=True, type=click.Path())
@click.option("--out", "results_path", required=True, type=click.Path())
@click.option("--workers", default=1, type=int)
@handle_errors
def grid_cmd(grid_path, registry_path, results_path, workers):
    """Run the experiment grid (resumable)."""
    grid = exp_mod.ExperimentGrid.from_json(_load_json(grid_path))
    registry = exp_mod.Registry.load(registry_path)
    _, report = exp_mod.run_grid(grid, registry, results_path,
                                 workers=workers, registry_path=registry_path)
    click.echo(json.dumps(report))


@main.command(name="meta")
@click.option("--results", "results_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def meta_cmd(results_path, out_path):
    """Meta-regression report: RMSE for all features and per-group ablations."""
    records = exp_mod.load_results(results_path)
    if not records:
        raise ResourceMissingError(f"no results in {results_path}")
    datasets = meta_mod.build_meta_dataset(records)
    codes = list(meta_mod.ABLATION_CODES)
    table = [["task", "dimension", "selected_features", "all", *codes]]
    for (dataset, dimension), (X, y, names, _) in sorted(datasets.items()):
        fit = meta_mod.fit_with_ablations(X, y, names)
        selected = "; ".join(f"{n.split('=', 1)[1]} ({w:.1f})"
                             for n, w in meta_mod.select_important(fit))
        row = [dataset, dimension, selected, f"{fit.rmse:.2f}"]
        row += [f"{fit.ablation[c]:.2f}" if c in fit.ablation else "-"
                for c in codes]
        table.append(row)
    exp_mod.write_tsv(table, out_path)
    click.echo(json.dumps({"rows": len(table) - 1, "out": str(out_path)}))


@main.command(name="probe")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--data", "data_path", required=True, type=click.Path())
@click.option("--label", "label_name", required=True,
              type=click.Choice(["gender", "age", "language", "country"]))
@click.option("--sample", default=2000, type=int, show_default=True)
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def probe_cmd(model_path, data_path, label_name, sample, seed, out_dir):
    """Embed documents, project to 2D, and score label separation."""
    ckpt = load_checkpoint(model_path)
    docs, _ = corpus_mod.load_corpus(data_path)
    docs = [d for d in docs if (d.gender if label_name == "gender"
            else d.age_group if label_name == "age"
            else getattr(d, label_name))]
    if len(docs) > sample:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(docs), size=sample, replace=False)
        docs = [docs[i] for i in sorted(idx)]
    embeddings, labels = probe_mod.embed_corpus(ckpt, docs)
    label_values = labels[label_name]
    points = probe_mod.project_2d(embeddings, seed)
    score = probe_mod.separation_score(embeddings, label_values)
    null = probe_mod.permutation_null(embeddings, label_values, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe_mod.write_points_csv(points, label_values, label_name,
                               out / "points.csv")
    summary = probe_mod.write_score_json(out / "score.json", model_path,
                                         label_name, score, null)
    click.echo(json.dumps(summary))


@main.command(name="report")
@click.option("--results", "results_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def report_cmd(results_path, out_dir):
    """Result tables: seed-averaged F1 grid plus delta tables versus the
    vanilla baseline and versus in-domain specialization."""
    records = exp_mod.load_results(results_path)
    if not records:
        raise ResourceMissingError(f"no results in {results_path}")
    exp_mod.check_digest_consistency(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp_mod.write_tsv(exp_mod.results_table(records), out / "results.tsv")

    written = {"results": str(out / "results.tsv")}
    for name, selector in (("delta_vs_vanilla", {"method": "vanilla"}),
                           ("delta_vs_indomain", {"spec_domain": "in-domain"})):
        rows, _ = exp_mod.delta_table(records, selector, scale=100.0)
        if rows:
            header = list(rows[0].keys())
            table = [header] + [[f"{r[k]:.2f}" if k == "delta" else r[k]
                                 for k in header] for r in rows]
            exp_mod.write_tsv(table, out / f"{name}.tsv")
            written[name] = str(out / f"{name}.tsv")
    click.echo(json.dumps(written))


if __name__ == "__main__":
    main()
