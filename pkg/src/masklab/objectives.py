"""Masked and causal language-modeling objectives."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import MASK_ID, N_BYTES, PAD_ID
from .model import ModelConfig, ModelParams, model_forward
from .tensor import IGNORE_INDEX


class Objective(str, enum.Enum):
    MLM = "mlm"
    CLM = "clm"


@dataclass(frozen=True)
class MlmSpec:
    mask_rate: float = 0.15
    p_mask_token: float = 0.8
    p_random_token: float = 0.1
    p_keep: float = 0.1
    mask_token_id: int = MASK_ID
    pad_token_id: int = PAD_ID
    n_data_tokens: int = N_BYTES
    ignore_marker: int = IGNORE_INDEX

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must lie in (0, 1)")
        if abs(self.p_mask_token + self.p_random_token + self.p_keep - 1.0) > 1e-9:
            raise ValueError("replacement probabilities must sum to 1")
        for rid in (self.mask_token_id, self.pad_token_id):
            if rid < self.n_data_tokens:
                raise ValueError(f"reserved id {rid} collides with the data-token range")


@dataclass
class LmBatch:
    inputs: np.ndarray
    targets: np.ndarray
    objective: Objective

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise ValueError("inputs and targets must have the same shape")

    @property
    def n_targets(self) -> int:
        return int((self.targets != IGNORE_INDEX).sum())


def apply_mlm_masking(tokens, spec: MlmSpec, rng: np.random.Generator) -> LmBatch:
    """BERT-style corruption: select positions, then mask / randomize / keep.

    A draw that selects nothing is repeated once; if it selects nothing again
    the first position is forced.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("cannot mask an empty batch")
    if tokens.min() < 0 or tokens.max() >= spec.n_data_tokens:
        raise ValueError("tokens must be data tokens (no reserved ids)")
    selected = rng.random(tokens.shape) < spec.mask_rate
    if not selected.any():
        selected = rng.random(tokens.shape) < spec.mask_rate
        if not selected.any():
            selected.flat[0] = True
    action = rng.random(tokens.shape)
    random_ids = rng.integers(0, spec.n_data_tokens, size=tokens.shape)
    to_mask = selected & (action < spec.p_mask_token)
    to_random = selected & (action >= spec.p_mask_token) & (action < spec.p_mask_token + spec.p_random_token)
    inputs = np.where(to_mask, spec.mask_token_id, np.where(to_random, random_ids, tokens))
    targets = np.where(selected, tokens, spec.ignore_marker)
    return LmBatch(inputs, targets, Objective.MLM)


def clm_shift(tokens) -> LmBatch:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[-1] < 2:
        raise ValueError("causal LM needs sequences of at least 2 tokens")
    return LmBatch(tokens[..., :-1].copy(), tokens[..., 1:].copy(), Objective.CLM)


def mlm_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Masking stream for one batch; mixing the epoch in re-masks on every pass."""
    return np.random.default_rng([seed, epoch, index, 0x4D4C4D])


def eval_masking(windows, spec: MlmSpec, eval_seed: int, batch_index: int) -> LmBatch:
    """Corruption used for validation: fixed by the eval seed, identical for every model."""
    return apply_mlm_masking(windows, spec, np.random.default_rng([eval_seed, batch_index, 0xE7A1]))


def batch_loss(params: ModelParams, batch: LmBatch, config: ModelConfig, rng=None) -> T.Tensor:
    """Mean natural-log NLL over the batch's predicted tokens."""
    logits = model_forward(batch.inputs, params, config, rng)
    return T.cross_entropy_logits(logits.reshape(-1, config.vocab_size), batch.targets.reshape(-1))


def make_batch(objective: Objective, tokens, spec: MlmSpec, rng: np.random.Generator) -> LmBatch:
    if Objective(objective) is Objective.CLM:
        return clm_shift(tokens)
    return apply_mlm_masking(tokens, spec, rng)
