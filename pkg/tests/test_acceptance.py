"""Acceptance gate: ten numbered criteria, one PASS/FAIL line each.

Criteria 1-4 and 8 are oracle and property checks that run in seconds.
Criteria 5-7 and the checkpoint half of 9 train small transformers on CPU
and take several minutes; 10 reruns a short specialization twice. Criteria
6, 7, and 9 share one training study (module-scoped fixture).
"""

import math

import numpy as np
import pytest
import torch

from demspec.corpus import make_split
from demspec.finetune import (FineTuneConfig, evaluate, finetune,
                              _encode_labeled, _predict)
from demspec.metaanalysis import (GROUPS, FeatureSpace, fit_regression,
                                  fit_with_ablations)
from demspec.model import (ClassifierHead, Encoder, EncoderConfig,
                           MLMHead, make_checkpoint, mlm_loss)
from demspec.corpus import MaskedBatch
from demspec.probe import embed_corpus, permutation_null, separation_score
from demspec.specialize import (SpecializationConfig, UncertaintyState,
                                combined_loss, specialize, weighted_loss)
from demspec.synthetic import SyntheticSpec, bayes_optimal_ac, generate_corpus
from demspec.tokenizer import Tokenizer


VERDICTS = []


def verdict(number, ok, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# reference encoder for all training-based criteria
def reference_encoder_config(vocab_size):
    return EncoderConfig(vocab_size=vocab_size, hidden_dim=64, num_layers=2,
                         num_heads=4, feedforward_dim=128, max_seq_len=32,
                         dropout=0.1)


def fresh_base(docs, seed, extra_texts=()):
    texts = [d.text for d in docs] + list(extra_texts)
    tokenizer = Tokenizer.build(texts, max_vocab_size=4000)
    torch.manual_seed(seed)
    encoder = Encoder(reference_encoder_config(tokenizer.vocab_size))
    return make_checkpoint(encoder, tokenizer, heads={}, meta={"kind": "base"})


def split_parts(docs, seed, fraction):
    split = make_split(docs, "gender", "SA", seed, finetune_fraction=fraction)
    by_id = {d.id: d for d in docs}
    return {k: [by_id[i] for i in sorted(getattr(split, k))]
            for k in ("specialization", "train", "dev", "test")}


FINETUNE = dict(task="SA", epochs=15, lr_grid=(1e-3, 3e-4), patience=5,
                max_seq_len=32)


def test_criterion_1_uncertainty_weighting():
    rng = np.random.default_rng(0)
    worst = 0.0
    for L, eta in zip(rng.uniform(0.01, 20.0, 100), rng.uniform(-3.0, 3.0, 100)):
        expected = 0.5 * (math.exp(-eta) * L + eta)
        got = weighted_loss(float(L), float(eta))
        worst = max(worst, abs(got - expected) / abs(expected))
    grad_ok = True
    h = 1e-7
    state = UncertaintyState().double()
    for L_m, L_d in rng.uniform(0.05, 10.0, size=(20, 2)):
        with torch.no_grad():
            state.eta_mlm.fill_(float(rng.uniform(-2, 2)))
            state.eta_dem.fill_(float(rng.uniform(-2, 2)))
        state.zero_grad()
        combined_loss(torch.tensor(L_m, dtype=torch.double),
                      torch.tensor(L_d, dtype=torch.double), state).backward()
        for param, L in ((state.eta_mlm, L_m), (state.eta_dem, L_d)):
            eta = float(param.detach())
            fd = (0.5 * (math.exp(-(eta + h)) * L + eta + h)
                  - 0.5 * (math.exp(-(eta - h)) * L + eta - h)) / (2 * h)
            if abs(float(param.grad) - fd) / max(abs(fd), 1e-12) > 1e-5:
                grad_ok = False
    verdict(1, worst <= 1e-10 and grad_ok,
            f"100 scalar pairs (worst rel err {worst:.1e}), gradients vs "
            f"finite differences within 1e-5")


def test_criterion_2_eta_stationarity():
    deviations = {}
    for L in (0.5, 1.0, 4.0):
        state = UncertaintyState()
        opt = torch.optim.Adam([state.eta_dem], lr=0.01)
        for _ in range(2000):
            loss = weighted_loss(torch.tensor(float(L)), state.eta_dem)
            opt.zero_grad()
            loss.backward()
            opt.step()
        deviations[L] = abs(float(state.eta_dem.detach()) - math.log(L))
    ok = all(d <= 0.1 for d in deviations.values())
    verdict(2, ok, "eta converges to ln L within 0.1 in <= 2000 steps: "
            + ", ".join(f"L={L} |d|={d:.3f}" for L, d in deviations.items()))


def test_criterion_3_loss_value_oracles():
    V = 64
    cfg = EncoderConfig(vocab_size=V, hidden_dim=32, num_layers=1, num_heads=2,
                        feedforward_dim=32, max_seq_len=16, dropout=0.0)
    head = MLMHead(32, V).double()
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    encoder = Encoder(cfg).double()
    ids = np.full((2, 8), 9)
    mask = np.zeros((2, 8), dtype=bool)
    mask[:, 2:5] = True
    batch = MaskedBatch(token_ids=ids, mask_positions=mask, original_ids=ids,
                        sequence_labels=None)
    encoder.eval()
    with torch.no_grad():
        encoded = encoder(torch.as_tensor(ids))
    uniform = float(mlm_loss(encoded, batch, head).detach())
    mlm_ok = uniform == pytest.approx(math.log(V), rel=1e-12)

    # BCE oracles on a passthrough head: logit = first state coordinate
    def bce(p, y):
        return -(y * math.log(p) + (1 - y) * math.log(1 - p))

    probs = torch.tensor([0.9, 0.8])
    logits = torch.log(probs / (1 - probs))
    labels = torch.tensor([1.0, 1.0])
    got = float(torch.nn.functional.binary_cross_entropy_with_logits(
        logits, labels))
    expected = 0.5 * (bce(0.9, 1) + bce(0.8, 1))
    bce_ok = got == pytest.approx(expected, abs=1e-6)
    zero_logit = float(torch.nn.functional.binary_cross_entropy_with_logits(
        torch.zeros(4), torch.tensor([0.0, 1.0, 0.0, 1.0])))
    bce_ok = bce_ok and zero_logit == pytest.approx(math.log(2), abs=1e-6)
    verdict(3, mlm_ok and bce_ok,
            f"uniform-logit mlm loss = ln {V} = {uniform:.6f}; "
            f"hand-computed BCE values match to 1e-6")


def test_criterion_4_split_hygiene():
    rng = np.random.default_rng(42)
    failures = []
    for trial in range(50):
        spec = SyntheticSpec(vocab_size=120, doc_length=10, n_marker_tokens=3,
                             marker_rate_a=0.05, marker_rate_b=0.05,
                             n_docs_per_group=int(rng.integers(40, 200)),
                             seed=int(rng.integers(10_000)))
        docs = generate_corpus(spec)
        seed = int(rng.integers(10_000))
        split = make_split(docs, "gender", "SA", seed)
        sets = [split.specialization, split.train, split.dev, split.test]
        for i in range(len(sets)):
            for j in range(i + 1, len(sets)):
                if sets[i] & sets[j]:
                    failures.append((trial, "overlap"))
        n = len(split.train) + len(split.dev) + len(split.test)
        for part, share in ((split.train, 0.6), (split.dev, 0.2),
                            (split.test, 0.2)):
            if abs(len(part) - share * n) > 1:
                failures.append((trial, "ratio"))
        by_id = {d.id: d for d in docs}
        for part in (split.train, split.dev, split.test):
            genders = [by_id[i].gender for i in part]
            if genders.count("F") != genders.count("M"):
                failures.append((trial, "balance"))
    verdict(4, not failures,
            f"50 random (corpus, seed) pairs: zero overlap, 60/20/20 within "
            f"±1, exact class balance ({len(failures)} violations)")


def ac_accuracy(classifier, docs):
    classes = classifier.meta["classes"]
    docs = sorted(docs, key=lambda d: d.id)
    x, y = _encode_labeled(docs, classifier.tokenizer,
                           classifier.encoder_config.max_seq_len, "AC",
                           "gender", classes)
    encoder = classifier.build_encoder()
    head = classifier.build_head(
        "classifier",
        lambda: ClassifierHead(classifier.encoder_config.hidden_dim,
                               len(classes)))
    preds = _predict(encoder, head, x)
    return float((preds == y).mean())


def test_criterion_5_synthetic_signal_recovery():
    q = 1 - 0.2 ** (1 / 24)
    spec = SyntheticSpec(vocab_size=400, doc_length=24, n_marker_tokens=5,
                         marker_rate_a=q, marker_rate_b=0.0,
                         n_docs_per_group=600, seed=0)
    bayes = bayes_optimal_ac(spec)
    assert bayes == pytest.approx(0.9, abs=1e-9)
    docs = generate_corpus(spec)
    parts = split_parts(docs, seed=0, fraction=1.0)
    base = fresh_base(docs, seed=0)
    cfg = FineTuneConfig(task="AC", epochs=12, lr_grid=(1e-3,), patience=4,
                         seed=0, max_seq_len=32)
    clf = finetune(base, parts["train"], parts["dev"], cfg)
    acc = ac_accuracy(clf, parts["test"])
    signal_ok = 0.80 <= acc <= min(0.92, bayes + 0.02)

    zero = SyntheticSpec(vocab_size=400, doc_length=24, n_marker_tokens=5,
                         marker_rate_a=0.0, marker_rate_b=0.0,
                         n_docs_per_group=600, seed=0)
    zdocs = generate_corpus(zero)
    zparts = split_parts(zdocs, seed=0, fraction=1.0)
    zbase = fresh_base(zdocs, seed=0)
    zclf = finetune(zbase, zparts["train"], zparts["dev"], cfg)
    zf1 = evaluate(zclf, zparts["test"], subset="mixed")
    zero_ok = 0.40 <= zf1 <= 0.60
    verdict(5, signal_ok and zero_ok,
            f"AC accuracy {acc:.3f} in [0.80, 0.92] under Bayes ceiling "
            f"{bayes:.2f}+0.02; zero-signal F1 {zf1:.3f} in [0.40, 0.60]")


# Confound study shared by criteria 6, 7, and 9: three seeds of
# vanilla / MLM / DS-Seq / DS-Tok, each specialized on an in-domain
# zero-demographic-signal corpus and again on a disjoint-domain corpus.
STUDY_SEEDS = (0, 1, 2)
SPEC_METHODS = ("MLM", "DS-Seq", "DS-Tok")
SPEC_TRAIN = dict(epochs=15, patience=15, lr_grid=(1e-3,), batch_size=32,
                  max_seq_len=32)


def study_corpora():
    in_spec = SyntheticSpec(vocab_size=170, doc_length=24, n_marker_tokens=10,
                            marker_rate_a=0.0, marker_rate_b=0.0,
                            sentiment_signal=0.25, topic_signal=0.25,
                            n_docs_per_group=3000, seed=0)
    ood_spec = SyntheticSpec(vocab_size=170, doc_length=24, n_marker_tokens=10,
                             marker_rate_a=0.0, marker_rate_b=0.0,
                             sentiment_signal=0.0, topic_signal=0.0,
                             n_docs_per_group=3000, seed=1,
                             domain_tag="forum", base_offset=170)
    eval_spec = SyntheticSpec(vocab_size=170, doc_length=24,
                              n_marker_tokens=10, marker_rate_a=0.0,
                              marker_rate_b=0.0, sentiment_signal=0.25,
                              topic_signal=0.25, n_docs_per_group=300, seed=7)
    return (generate_corpus(in_spec), generate_corpus(ood_spec),
            generate_corpus(eval_spec))


@pytest.fixture(scope="module")
def confound_study():
    import time
    start = time.time()
    in_docs, ood_docs, eval_docs = study_corpora()
    tokenizer = Tokenizer.build(
        [d.text for d in in_docs] + [d.text for d in ood_docs], 4000)
    results = {"f1": {}, "checkpoints": {}, "probe_docs": eval_docs}
    for seed in STUDY_SEEDS:
        parts = split_parts(in_docs, seed=seed, fraction=0.02)
        ood_pool = ood_docs[:len(parts["specialization"])]
        torch.manual_seed(seed)
        base = make_checkpoint(
            Encoder(reference_encoder_config(tokenizer.vocab_size)),
            tokenizer, heads={}, meta={"kind": "base"})
        ft_cfg = FineTuneConfig(seed=seed, **FINETUNE)

        clf = finetune(base, parts["train"], parts["dev"], ft_cfg)
        results["f1"][("vanilla", "in-domain", seed)] = evaluate(
            clf, eval_docs)
        for method in SPEC_METHODS:
            for domain, pool in (("in-domain", parts["specialization"]),
                                 ("out-of-domain", ood_pool)):
                cfg = SpecializationConfig(method=method, seed=seed,
                                           **SPEC_TRAIN)
                ckpt, _ = specialize(pool, cfg, base=base)
                clf = finetune(ckpt, parts["train"], parts["dev"], ft_cfg)
                results["f1"][(method, domain, seed)] = evaluate(
                    clf, eval_docs)
                if seed == 0 and domain == "in-domain":
                    results["checkpoints"][method] = ckpt
    results["elapsed"] = time.time() - start
    return results


def test_criterion_6_no_demographic_signal_parity(confound_study):
    f1 = confound_study["f1"]
    mean = {m: float(np.mean([f1[(m, "in-domain", s)] for s in STUDY_SEEDS]))
            for m in ("vanilla",) + SPEC_METHODS}
    gap_seq = abs(mean["DS-Seq"] - mean["MLM"])
    gap_tok = abs(mean["DS-Tok"] - mean["MLM"])
    lifts = {m: mean[m] - mean["vanilla"] for m in SPEC_METHODS}
    elapsed = confound_study["elapsed"]
    ok = (gap_seq <= 0.015 and gap_tok <= 0.015
          and all(lift >= 0.02 for lift in lifts.values())
          and elapsed <= 45 * 60)
    verdict(6, ok,
            f"3-seed mean F1 vanilla {mean['vanilla']:.3f}, "
            f"MLM {mean['MLM']:.3f}, DS-Seq {mean['DS-Seq']:.3f}, "
            f"DS-Tok {mean['DS-Tok']:.3f}; DS vs MLM gaps "
            f"{gap_seq * 100:.2f}/{gap_tok * 100:.2f} pp (<= 1.5), all lifts "
            f">= 2 pp over vanilla, wall clock {elapsed / 60:.1f} min")


def test_criterion_7_domain_mismatch_never_helps(confound_study):
    f1 = confound_study["f1"]
    cells = [(m, s) for m in SPEC_METHODS for s in STUDY_SEEDS]
    non_positive = sum(
        1 for m, s in cells
        if f1[(m, "out-of-domain", s)] - f1[(m, "in-domain", s)] <= 0)
    share = non_positive / len(cells)
    verdict(7, share >= 0.80,
            f"out-of-domain specialization delta F1 <= 0 in "
            f"{non_positive}/{len(cells)} method-seed cells "
            f"({share:.0%}, need >= 80%)")


def test_criterion_8_meta_regression():
    rng = np.random.default_rng(0)
    space = FeatureSpace()
    records = [{g: rng.choice(space.vocabularies[g]) for g in GROUPS}
               for _ in range(400)]
    X = space.matrix(records)
    names = space.feature_names()

    # exact recovery of a noiseless planted linear effect
    w_true = rng.normal(size=X.shape[1])
    fit_exact = fit_regression(X, X @ w_true, names)
    exact_ok = fit_exact.rmse <= 1e-8

    # method-driven target: nested ablations never beat the full model and
    # dropping the method group hurts the most
    effects = {"method=MLM": 1.0, "method=DS-Seq": 2.5, "method=DS-Tok": 4.0}
    y = X @ np.array([effects.get(n, 0.0) for n in names])
    y = y + rng.normal(0, 0.05, size=len(y))
    fit = fit_with_ablations(X, y, names)
    nested_ok = all(r >= fit.rmse - 1e-10 for r in fit.ablation.values())
    method_ok = fit.ablation["-A"] == max(fit.ablation.values())
    verdict(8, exact_ok and nested_ok and method_ok,
            f"exact recovery rmse {fit_exact.rmse:.1e} <= 1e-8; nested "
            f"ablations >= full rmse; method ablation (-A) largest "
            f"({fit.ablation['-A']:.3f})")


def test_criterion_9_representation_probe(confound_study):
    rng = np.random.default_rng(0)
    # two unit-variance Gaussian blobs with centers 10 sigma apart
    n = 200
    X = np.vstack([rng.normal([0.0, 0.0], 1.0, size=(n, 2)),
                   rng.normal([10.0, 0.0], 1.0, size=(n, 2))])
    labels = np.array(["a"] * n + ["b"] * n)
    separated = separation_score(X, labels)

    big = np.vstack([rng.normal([0.0, 0.0], 1.0, size=(1000, 2)),
                     rng.normal([10.0, 0.0], 1.0, size=(1000, 2))])
    big_labels = np.array(["a"] * 1000 + ["b"] * 1000)
    null = permutation_null(big, big_labels, n_shuffles=20, seed=0)
    null_max = float(np.abs(null).max())

    docs = confound_study["probe_docs"]
    scores = {}
    for method in ("MLM", "DS-Tok"):
        emb, lab = embed_corpus(confound_study["checkpoints"][method], docs)
        scores[method] = separation_score(emb, lab["gender"])
    probe_gap = abs(scores["DS-Tok"] - scores["MLM"])
    ok = separated >= 0.8 and null_max <= 0.05 and probe_gap <= 0.05
    verdict(9, ok,
            f"blob silhouette {separated:.3f} >= 0.8; permutation null "
            f"|s| max {null_max:.3f} <= 0.05 at n=2000; zero-signal "
            f"demographic silhouette MLM {scores['MLM']:.3f} vs DS-Tok "
            f"{scores['DS-Tok']:.3f} (gap {probe_gap:.3f} <= 0.05)")


def test_criterion_10_bitwise_reproducibility():
    spec = SyntheticSpec(vocab_size=200, doc_length=12, n_marker_tokens=3,
                         marker_rate_a=0.05, marker_rate_b=0.0,
                         n_docs_per_group=40, seed=5)
    docs = generate_corpus(spec)
    enc_cfg = EncoderConfig(vocab_size=200, hidden_dim=32, num_layers=1,
                            num_heads=2, feedforward_dim=32, max_seq_len=16,
                            dropout=0.1)
    cfg = SpecializationConfig(method="MLM", epochs=4, patience=4,
                               lr_grid=(1e-3,), seed=11, batch_size=16,
                               max_seq_len=16)
    _, log_a = specialize(docs, cfg, encoder_config=enc_cfg)
    _, log_b = specialize(docs, cfg, encoder_config=enc_cfg)
    same = log_a == log_b
    verdict(10, same,
            f"repeated fixed-seed specialization reproduces the "
            f"{len(log_a)}-record loss sequence bit for bit")
