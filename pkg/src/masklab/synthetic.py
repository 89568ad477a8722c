"""Order-sensitive key/value corpus and its bag-of-words loss bound.

Every sequence alternates a uniformly drawn key with its partner value under a
fixed bijection, so a masked value is recoverable from its left neighbour but
not from the unordered multiset of tokens around it.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import VOCAB_SIZE, CorpusShard, sequential_batches
from .objectives import MlmSpec, eval_masking

KEY_BASE = 64


@dataclass(frozen=True)
class SyntheticSpec:
    n_keys: int = 32
    seq_len: int = 32
    n_sequences: int = 1000
    seed: int = 0
    key_base: int = KEY_BASE

    def __post_init__(self):
        if self.n_keys < 1:
            raise ValueError("n_keys must be positive")
        if self.seq_len < 2 or self.seq_len % 2:
            raise ValueError("seq_len must be even and at least 2")
        if self.key_base + 2 * self.n_keys > 256:
            raise ValueError("key and value alphabets must fit in the byte range")

    @property
    def keys(self) -> np.ndarray:
        return np.arange(self.key_base, self.key_base + self.n_keys)

    @property
    def values(self) -> np.ndarray:
        return np.arange(self.key_base + self.n_keys, self.key_base + 2 * self.n_keys)

    def pairing(self) -> dict:
        """The key -> value bijection, fixed by the seed."""
        perm = np.random.default_rng([self.seed, 0x9A1]).permutation(self.n_keys)
        return {int(k): int(self.values[p]) for k, p in zip(self.keys, perm)}


def generate_sequences(spec: SyntheticSpec) -> np.ndarray:
    g = spec.pairing()
    lookup = np.zeros(256, dtype=np.int64)
    for k, v in g.items():
        lookup[k] = v
    rng = np.random.default_rng([spec.seed, 0x5E0])
    half = spec.seq_len // 2
    keys = spec.keys[rng.integers(0, spec.n_keys, size=(spec.n_sequences, half))]
    seqs = np.empty((spec.n_sequences, spec.seq_len), dtype=np.int64)
    seqs[:, 0::2] = keys
    seqs[:, 1::2] = lookup[keys]
    return seqs


def generate_synthetic(spec: SyntheticSpec) -> CorpusShard:
    seqs = generate_sequences(spec)
    bounds = np.arange(1, spec.n_sequences + 1, dtype=np.uint64) * spec.seq_len
    return CorpusShard(seqs.reshape(-1), bounds, VOCAB_SIZE)


def group_entropy_bound(inputs: np.ndarray, targets: np.ndarray, ignore: int) -> np.ndarray:
    """Per-position lower bound on the NLL of any permutation-equivariant model.

    Without position information a model's prediction at a position depends
    only on that position's visible token and the multiset of the sequence.
    All predicted positions of one sequence that show the same visible token
    therefore share one distribution, and by Gibbs' inequality their summed
    NLL is at least the empirical entropy of their original tokens. Each
    position is charged ``-log(count(original in group) / group size)``.
    Returns an array shaped like ``targets`` (NaN where not predicted).
    """
    out = np.full(targets.shape, np.nan)
    for r in range(targets.shape[0]):
        rows = np.nonzero(targets[r] != ignore)[0]
        groups: dict = {}
        for i in rows:
            groups.setdefault(int(inputs[r, i]), []).append(i)
        for members in groups.values():
            counts = Counter(int(targets[r, i]) for i in members)
            size = len(members)
            for i in members:
                out[r, i] = -np.log(counts[int(targets[r, i])] / size)
    return out


def bag_optimal_loss(shard: CorpusShard, seq_len: int, mlm: MlmSpec, eval_seed: int,
                     batch_size: int = 64, value_ids=None) -> dict:
    """Bag-of-words loss bound on the exact corruption used for MLM evaluation.

    Returns the bound averaged over all predicted positions (``loss``), its
    perplexity, and, when ``value_ids`` is given, the average over predicted
    positions whose original token is a value (``value_loss``).
    """
    total, count = 0.0, 0
    v_total, v_count = 0.0, 0
    values = None if value_ids is None else np.asarray(list(value_ids))
    for b, windows in enumerate(sequential_batches(shard, seq_len, batch_size)):
        batch = eval_masking(windows, mlm, eval_seed, b)
        per_pos = group_entropy_bound(batch.inputs, batch.targets, mlm.ignore_marker)
        hit = batch.targets != mlm.ignore_marker
        total += float(per_pos[hit].sum())
        count += int(hit.sum())
        if values is not None:
            vm = hit & np.isin(batch.targets, values)
            v_total += float(per_pos[vm].sum())
            v_count += int(vm.sum())
    loss = total / count
    result = {"loss": loss, "ppl": float(np.exp(loss)), "n_targets": count}
    if values is not None:
        result["value_loss"] = v_total / v_count if v_count else float("nan")
    return result


def train_valid_shards(spec: SyntheticSpec, n_valid: int) -> tuple:
    """Training shard of ``spec.n_sequences`` plus ``n_valid`` held-out sequences.

    Both come from one generation run, so they share the key/value pairing.
    """
    if n_valid < 1:
        raise ValueError("n_valid must be positive")
    full = generate_sequences(SyntheticSpec(spec.n_keys, spec.seq_len, spec.n_sequences + n_valid,
                                            spec.seed, spec.key_base))

    def shard(rows):
        bounds = np.arange(1, len(rows) + 1, dtype=np.uint64) * spec.seq_len
        return CorpusShard(rows.reshape(-1), bounds, VOCAB_SIZE)
    return shard(full[: spec.n_sequences]), shard(full[spec.n_sequences:])
