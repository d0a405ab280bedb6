"""Intermediate specialization training: MLM-only, DS-Seq, DS-Tok.

DS variants couple masked language modeling with demographic prediction
through learned log-variance weights: each task loss L_t enters the joint
objective as 0.5 * (exp(-eta_t) * L_t + eta_t), with eta_t trainable. For a
constant loss L the unique stationary point is eta = ln L, so the effective
weight 0.5 * exp(-eta) shrinks for noisier tasks.
"""

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .corpus import dimension_classes, mask_tokens
from .errors import ContractError
from .model import (BinaryHead, Encoder, EncoderConfig, MLMHead,
                    dem_loss_seq, dem_loss_tok, make_checkpoint, mlm_loss)
from .tokenizer import Tokenizer, PAD_ID, CLS_ID, MASK_ID

METHODS = ("MLM", "DS-Seq", "DS-Tok")

DEFAULT_LR_GRID = (5e-5, 1e-5, 1e-6)


class UncertaintyState(nn.Module):
    """Learned log-variances for the mlm and dem tasks, initialized at 0
    (equal task weights)."""

    def __init__(self):
        super().__init__()
        self.eta_mlm = nn.Parameter(torch.zeros(()))
        self.eta_dem = nn.Parameter(torch.zeros(()))


def weighted_loss(loss, eta):
    """Uncertainty-adjusted task loss: 0.5 * (exp(-eta) * loss + eta)."""
    if isinstance(loss, torch.Tensor) or isinstance(eta, torch.Tensor):
        loss_t = loss if isinstance(loss, torch.Tensor) else torch.as_tensor(float(loss))
        eta_t = eta if isinstance(eta, torch.Tensor) else torch.as_tensor(float(eta))
        if not (bool(torch.isfinite(loss_t).all()) and bool(torch.isfinite(eta_t).all())):
            raise ContractError("weighted_loss requires finite inputs")
        return 0.5 * (torch.exp(-eta_t) * loss_t + eta_t)
    if not (math.isfinite(loss) and math.isfinite(eta)):
        raise ContractError("weighted_loss requires finite inputs")
    return 0.5 * (math.exp(-eta) * loss + eta)


def combined_loss(mlm_value, dem_value, state):
    """Sum of the two uncertainty-adjusted losses."""
    return weighted_loss(mlm_value, state.eta_mlm) + weighted_loss(dem_value, state.eta_dem)


@dataclass
class SpecializationConfig:
    method: str = "MLM"
    dimension: str = "gender"
    mask_rate: float = 0.15
    epochs: int = 30
    batch_size: int = 32
    lr_grid: tuple = DEFAULT_LR_GRID
    patience: int = 3
    seed: int = 0
    max_seq_len: int = 128
    dev_fraction: float = 0.05
    mixed_replacement: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method: {self.method}")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if not self.lr_grid:
            raise ContractError("lr_grid must be non-empty")
        self.lr_grid = tuple(sorted(set(float(lr) for lr in self.lr_grid), reverse=True))

    def to_json(self):
        return {"method": self.method, "dimension": self.dimension,
                "mask_rate": self.mask_rate, "epochs": self.epochs,
                "batch_size": self.batch_size, "lr_grid": list(self.lr_grid),
                "patience": self.patience, "seed": self.seed,
                "max_seq_len": self.max_seq_len, "dev_fraction": self.dev_fraction,
                "mixed_replacement": self.mixed_replacement}

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        if "lr_grid" in data:
            data["lr_grid"] = tuple(data["lr_grid"])
        return cls(**data)


class EarlyStopping:
    """Stop when the monitored objective fails to improve for `patience`
    consecutive epochs (lower is better)."""

    def __init__(self, patience):
        self.patience = patience
        self.best = None
        self.best_epoch = None
        self.counter = 0

    def update(self, value, epoch):
        """Returns True when training should stop."""
        if self.best is None or value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.counter = 0
            return False
        self.counter += 1
        return self.counter >= self.patience


def _doc_labels(docs, dimension):
    classes = dimension_classes(dimension)
    labels = []
    for doc in docs:
        cls = doc.demographic_class(dimension)
        if cls not in classes:
            raise ContractError(
                f"document {doc.id} lacks a {dimension} label required by DS training")
        labels.append(classes.index(cls))
    return np.asarray(labels, dtype=np.int64)


def _snapshot(modules):
    return {name: copy.deepcopy(m.state_dict()) for name, m in modules.items()}


def _restore(modules, snapshot):
    for name, m in modules.items():
        m.load_state_dict(snapshot[name])


def _batch_losses(encoder, heads, batch, method, labels):
    encoded = encoder(torch.as_tensor(batch.token_ids))
    l_mlm = mlm_loss(encoded, batch, heads["mlm"])
    l_dem = None
    if method == "DS-Seq":
        l_dem = dem_loss_seq(encoded, labels, heads["dem"])
    elif method == "DS-Tok":
        l_dem = dem_loss_tok(encoded, batch, labels, heads["dem"])
    return l_mlm, l_dem


def specialize(docs, config, base=None, encoder_config=None, corpus_digest=""):
    """Run specialization over the learning-rate grid and return
    (checkpoint, training_log).

    `base` is an existing Checkpoint to continue from; otherwise a fresh
    encoder is initialized from `encoder_config`. The log has one record per
    (lr, epoch): {epoch, lr, mlm_loss, dem_loss, eta_mlm, eta_dem,
    dev_objective}.
    """
    if not docs:
        raise ContractError("specialization corpus is empty")
    if base is not None:
        tokenizer = base.tokenizer
        enc_cfg = base.encoder_config
    else:
        if encoder_config is None:
            raise ContractError("either base or encoder_config is required")
        enc_cfg = encoder_config
        tokenizer = Tokenizer.build((d.text for d in docs), enc_cfg.vocab_size)
        enc_cfg = EncoderConfig(**{**enc_cfg.to_json(), "vocab_size": tokenizer.vocab_size})

    max_len = min(config.max_seq_len, enc_cfg.max_seq_len)
    token_ids = tokenizer.encode_batch([d.text for d in docs], max_len)
    labels = None
    if config.method != "MLM":
        labels = _doc_labels(docs, config.dimension)

    # held-out development slice for the early-stopping objective
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(docs))
    n_dev = max(1, int(round(config.dev_fraction * len(docs))))
    dev_idx, train_idx = order[:n_dev], order[n_dev:]
    if len(train_idx) == 0:
        raise ContractError("specialization corpus too small for a dev slice")

    special_ids = (PAD_ID, CLS_ID, MASK_ID)
    log = []
    best_trial = None
    for trial_no, lr in enumerate(config.lr_grid):
        torch.manual_seed(config.seed * 1009 + trial_no)
        trial_rng = np.random.default_rng([config.seed, trial_no])
        if base is not None:
            encoder = base.build_encoder()
        else:
            encoder = Encoder(enc_cfg)
        heads = {"mlm": MLMHead(enc_cfg.hidden_dim, enc_cfg.vocab_size)}
        if config.method != "MLM":
            heads["dem"] = BinaryHead(enc_cfg.hidden_dim)
        uncertainty = UncertaintyState()
        modules = {"encoder": encoder, **heads}
        if config.method != "MLM":
            modules["uncertainty"] = uncertainty
        params = [p for m in modules.values() for p in m.parameters()]
        optimizer = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)

        mask_kwargs = {"mask_id": MASK_ID, "special_ids": special_ids,
                       "mixed_replacement": config.mixed_replacement,
                       "vocab_size": enc_cfg.vocab_size}
        dev_mask_seed = int(trial_rng.integers(2**62))
        dev_batch = mask_tokens(token_ids[dev_idx], config.mask_rate, dev_mask_seed,
                                **mask_kwargs)
        dev_labels = labels[dev_idx] if labels is not None else None

        stopper = EarlyStopping(config.patience)
        best_state = _snapshot(modules)
        for epoch in range(1, config.epochs + 1):
            for m in modules.values():
                m.train()
            perm = trial_rng.permutation(len(train_idx))
            epoch_mlm, epoch_dem, n_batches = 0.0, 0.0, 0
            for start in range(0, len(perm), config.batch_size):
                idx = train_idx[perm[start:start + config.batch_size]]
                batch = mask_tokens(token_ids[idx], config.mask_rate,
                                    int(trial_rng.integers(2**62)),
                                    **mask_kwargs)
                if not batch.mask_positions.any():
                    continue
                batch_labels = labels[idx] if labels is not None else None
                l_mlm, l_dem = _batch_losses(encoder, heads, batch,
                                             config.method, batch_labels)
                if config.method == "MLM":
                    loss = l_mlm
                else:
                    loss = combined_loss(l_mlm, l_dem, uncertainty)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_mlm += float(l_mlm.detach())
                epoch_dem += float(l_dem.detach()) if l_dem is not None else 0.0
                n_batches += 1
            if n_batches == 0:
                raise ContractError("no trainable batches (all-empty masks)")

            dev_objective = _dev_objective(encoder, heads, uncertainty,
                                           dev_batch, dev_labels, config.method)
            record = {
                "epoch": epoch, "lr": lr,
                "mlm_loss": epoch_mlm / n_batches,
                "dem_loss": (epoch_dem / n_batches) if config.method != "MLM" else None,
                "eta_mlm": float(uncertainty.eta_mlm.detach()),
                "eta_dem": float(uncertainty.eta_dem.detach()),
                "dev_objective": dev_objective,
            }
            log.append(record)
            improved = stopper.best is None or dev_objective < stopper.best
            stop = stopper.update(dev_objective, epoch)
            if improved:
                best_state = _snapshot(modules)
            if stop:
                break

        _restore(modules, best_state)
        trial_objective = stopper.best if stopper.best is not None else float("inf")
        if best_trial is None or trial_objective < best_trial[0]:
            best_trial = (trial_objective, lr, _snapshot(modules))

    trial_objective, lr, state = best_trial
    _restore(modules, state)
    meta = {
        "kind": "specialized",
        "method": config.method,
        "dimension": config.dimension,
        "config": config.to_json(),
        "selected_lr": lr,
        "dev_objective": trial_objective,
        "corpus_digest": corpus_digest,
    }
    heads_out = {"mlm": heads["mlm"]}
    ckpt = make_checkpoint(encoder, tokenizer, heads=heads_out, meta=meta)
    return ckpt, log


def _dev_objective(encoder, heads, uncertainty, dev_batch, dev_labels, method):
    for m in [encoder, *heads.values()]:
        m.eval()
    with torch.no_grad():
        l_mlm, l_dem = _batch_losses(encoder, heads, dev_batch, method, dev_labels)
        if method == "MLM":
            return float(l_mlm)
        return float(combined_loss(l_mlm, l_dem, uncertainty))
