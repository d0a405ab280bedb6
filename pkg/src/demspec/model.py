"""Small transformer encoder with MLM and demographic heads.

The reference configuration (4 layers, hidden 128, 4 heads, feedforward 256)
trains on CPU in minutes. Checkpoints are a directory holding a JSON config,
the tokenizer, and a flat .npz tensor archive keyed by parameter name.
"""

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, ResourceMissingError
from .tokenizer import Tokenizer, PAD_ID

PROB_EPS = 1e-7
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    feedforward_dim: int = 256
    max_seq_len: int = 128
    dropout: float = 0.1
    has_sequence_token: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ContractError("hidden_dim must be divisible by num_heads")
        if self.max_seq_len < 2:
            raise ContractError("max_seq_len must be >= 2")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, data):
        return cls(**data)


@dataclass
class EncodedBatch:
    token_states: torch.Tensor    # batch x seq x hidden
    sequence_state: torch.Tensor  # batch x hidden (start-of-sequence position)


class Encoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.hidden_dim)
        self.position_embedding = nn.Embedding(config.max_seq_len, config.hidden_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=config.hidden_dim, nhead=config.num_heads,
            dim_feedforward=config.feedforward_dim, dropout=config.dropout,
            batch_first=True)
        self.layers = nn.TransformerEncoder(layer, num_layers=config.num_layers,
                                            enable_nested_tensor=False)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, token_ids):
        if token_ids.shape[1] > self.config.max_seq_len:
            raise ContractError("sequence length exceeds max_seq_len")
        if int(token_ids.max()) >= self.config.vocab_size or int(token_ids.min()) < 0:
            raise ContractError("token id out of vocabulary")
        positions = torch.arange(token_ids.shape[1], device=token_ids.device)
        x = self.token_embedding(token_ids) + self.position_embedding(positions)
        x = self.dropout(x)
        pad_mask = token_ids == PAD_ID
        # fully padded rows would produce NaNs through attention
        pad_mask = pad_mask & ~pad_mask.all(dim=1, keepdim=True)
        states = self.layers(x, src_key_padding_mask=pad_mask)
        return EncodedBatch(token_states=states, sequence_state=states[:, 0])


class MLMHead(nn.Module):
    def __init__(self, hidden_dim, vocab_size):
        super().__init__()
        self.proj = nn.Linear(hidden_dim, vocab_size)

    def forward(self, states):
        return self.proj(states)


class BinaryHead(nn.Module):
    """Single-logit demographic head; class B (M / O45) is the positive class."""

    def __init__(self, hidden_dim):
        super().__init__()
        self.proj = nn.Linear(hidden_dim, 1)

    def forward(self, states):
        return self.proj(states).squeeze(-1)


class ClassifierHead(nn.Module):
    def __init__(self, hidden_dim, n_classes):
        super().__init__()
        self.proj = nn.Linear(hidden_dim, n_classes)

    def forward(self, states):
        return self.proj(states)


def _as_tensor(array, dtype, like):
    return torch.as_tensor(array, dtype=dtype, device=like.device)


def mlm_loss(encoded, batch, head):
    """Mean negative log-likelihood of the original token at masked positions."""
    mask = _as_tensor(batch.mask_positions, torch.bool, encoded.token_states)
    if not bool(mask.any()):
        raise ContractError("mlm_loss requires at least one masked position")
    states = encoded.token_states[mask]
    targets = _as_tensor(batch.original_ids, torch.long, encoded.token_states)[mask]
    logits = head(states)
    return F.cross_entropy(logits, targets)


def _clamped_bce(logits, targets):
    probs = torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(targets * torch.log(probs) + (1.0 - targets) * torch.log(1.0 - probs)).mean()


def dem_loss_seq(encoded, labels, head):
    """Binary cross-entropy of the demographic class predicted from the
    sequence-start representation."""
    if labels is None:
        raise ContractError("dem_loss_seq requires sequence labels")
    targets = _as_tensor(labels, torch.get_default_dtype(), encoded.sequence_state)
    logits = head(encoded.sequence_state)
    return _clamped_bce(logits, targets)


def dem_loss_tok(encoded, batch, labels, head):
    """Binary cross-entropy of the row's demographic class predicted from each
    masked token's contextualized representation, averaged over masked positions."""
    if labels is None:
        raise ContractError("dem_loss_tok requires sequence labels")
    mask = _as_tensor(batch.mask_positions, torch.bool, encoded.token_states)
    if not bool(mask.any()):
        raise ContractError("dem_loss_tok requires at least one masked position")
    targets = _as_tensor(labels, torch.get_default_dtype(), encoded.token_states)
    per_row = targets.unsqueeze(1).expand(mask.shape)[mask]
    logits = head(encoded.token_states[mask])
    return _clamped_bce(logits, per_row)


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    tokenizer: Tokenizer
    state: dict            # name -> np.ndarray, keys like "encoder.<param>"
    meta: dict

    def build_encoder(self):
        encoder = Encoder(self.encoder_config)
        prefix = "encoder."
        sd = {k[len(prefix):]: torch.as_tensor(v)
              for k, v in self.state.items() if k.startswith(prefix)}
        encoder.load_state_dict(sd)
        return encoder

    def build_head(self, name, factory):
        prefix = f"{name}."
        sd = {k[len(prefix):]: torch.as_tensor(v)
              for k, v in self.state.items() if k.startswith(prefix)}
        if not sd:
            raise ContractError(f"checkpoint has no parameters for head {name!r}")
        head = factory()
        head.load_state_dict(sd)
        return head

    def head_names(self):
        return sorted({k.split(".", 1)[0] for k in self.state} - {"encoder"})


def make_checkpoint(encoder, tokenizer, heads=None, meta=None):
    state = {f"encoder.{k}": v.detach().cpu().numpy().copy()
             for k, v in encoder.state_dict().items()}
    for name, module in (heads or {}).items():
        for k, v in module.state_dict().items():
            state[f"{name}.{k}"] = v.detach().cpu().numpy().copy()
    return Checkpoint(encoder_config=encoder.config, tokenizer=tokenizer,
                      state=state, meta=dict(meta or {}))


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    config = {
        "version": CHECKPOINT_VERSION,
        "encoder": ckpt.encoder_config.to_json(),
        "tokenizer_digest": ckpt.tokenizer.digest(),
        "meta": ckpt.meta,
    }
    with open(path / "config.json", "w", encoding="utf-8") as f:
        json.dump(config, f, indent=1)
    with open(path / "tokenizer.json", "w", encoding="utf-8") as f:
        json.dump(ckpt.tokenizer.to_json(), f)
    np.savez(path / "weights.npz", **ckpt.state)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not (path / "config.json").is_file():
        raise ResourceMissingError(f"checkpoint not found at {path}")
    with open(path / "config.json", encoding="utf-8") as f:
        config = json.load(f)
    if config.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version: {config.get('version')}")
    with open(path / "tokenizer.json", encoding="utf-8") as f:
        tokenizer = Tokenizer.from_json(json.load(f))
    if tokenizer.digest() != config["tokenizer_digest"]:
        raise ContractError("tokenizer digest mismatch in checkpoint")
    with np.load(path / "weights.npz") as archive:
        state = {k: archive[k] for k in archive.files}
    return Checkpoint(encoder_config=EncoderConfig.from_json(config["encoder"]),
                      tokenizer=tokenizer, state=state, meta=config.get("meta", {}))
