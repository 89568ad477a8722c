"""Post-LN transformer stack with a per-layer attention-mask schedule.

Each layer's mask policy is one of bidirectional, causal left-to-right or
causal right-to-left. The presets ``decbert_same`` and ``decbert_diff`` put
causal masks on the two lowest layers of an otherwise bidirectional encoder.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class MaskPolicy(str, enum.Enum):
    BIDIRECTIONAL = "bi"
    CAUSAL_LR = "lr"
    CAUSAL_RL = "rl"

    @classmethod
    def parse(cls, text: str) -> "MaskPolicy":
        key = text.strip().lower()
        aliases = {
            "bi": cls.BIDIRECTIONAL, "bidirectional": cls.BIDIRECTIONAL,
            "lr": cls.CAUSAL_LR, "causal_lr": cls.CAUSAL_LR, "causallefttoright": cls.CAUSAL_LR,
            "rl": cls.CAUSAL_RL, "causal_rl": cls.CAUSAL_RL, "causalrighttoleft": cls.CAUSAL_RL,
        }
        if key not in aliases:
            raise ConfigError(f"unknown mask policy {text!r}")
        return aliases[key]


class PEKind(str, enum.Enum):
    ABSENT = "absent"
    LEARNABLE = "learnable"
    SINUSOIDAL = "sinusoidal"

    @classmethod
    def parse(cls, text: str) -> "PEKind":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ConfigError(f"unknown position encoding kind {text!r}") from None


def format_schedule(schedule: Sequence[MaskPolicy]) -> str:
    return ",".join(p.value for p in schedule)


def parse_schedule(text: str) -> tuple:
    return tuple(MaskPolicy.parse(p) for p in text.split(",") if p.strip())


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    vocab_size: int = 259
    max_seq_len: int = 32
    mask_schedule: tuple = ()
    pe_kind: PEKind = PEKind.LEARNABLE
    dropout: float = 0.0
    precision: int = 32
    ln_eps: float = 1e-5

    def __post_init__(self):
        if not self.mask_schedule:
            object.__setattr__(self, "mask_schedule", (MaskPolicy.BIDIRECTIONAL,) * self.n_layers)
        object.__setattr__(self, "mask_schedule", tuple(MaskPolicy(p) for p in self.mask_schedule))
        object.__setattr__(self, "pe_kind", PEKind(self.pe_kind))
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if len(self.mask_schedule) != self.n_layers:
            raise ConfigError(
                f"mask schedule has {len(self.mask_schedule)} entries for {self.n_layers} layers"
            )
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.pe_kind is PEKind.SINUSOIDAL and self.d_model % 2:
            raise ConfigError("sinusoidal position encoding needs an even d_model")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


PRESETS = ("bert", "decbert_same", "decbert_diff", "gpt_decoder")


def preset(name: str, base: ModelConfig) -> ModelConfig:
    """Return ``base`` with the mask schedule of a named architecture."""
    n = base.n_layers
    bi, lr, rl = MaskPolicy.BIDIRECTIONAL, MaskPolicy.CAUSAL_LR, MaskPolicy.CAUSAL_RL
    if name in ("decbert_same", "decbert_diff") and n < 2:
        raise ConfigError(f"{name} needs at least 2 layers, got {n}")
    if name == "bert":
        schedule = (bi,) * n
    elif name == "decbert_same":
        schedule = (lr, lr) + (bi,) * (n - 2)
    elif name == "decbert_diff":
        schedule = (lr, rl) + (bi,) * (n - 2)
    elif name == "gpt_decoder":
        schedule = (lr,) * n
    else:
        raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    return replace(base, mask_schedule=schedule)


def build_attention_mask(policy: MaskPolicy, n: int) -> np.ndarray:
    """Boolean (n, n) matrix; entry [i, j] is True when position i may attend to j."""
    if n < 1:
        raise ValueError("sequence length must be at least 1")
    policy = MaskPolicy(policy)
    if policy is MaskPolicy.BIDIRECTIONAL:
        return np.ones((n, n), dtype=bool)
    if policy is MaskPolicy.CAUSAL_LR:
        return np.tril(np.ones((n, n), dtype=bool))
    return np.triu(np.ones((n, n), dtype=bool))


def sinusoidal_pe(max_seq_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    if d_model % 2:
        raise ConfigError("sinusoidal position encoding needs an even d_model")
    pos = np.arange(max_seq_len, dtype=np.float64)[:, None]
    two_j = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_j / d_model)
    table = np.empty((max_seq_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(dtype)


@dataclass
class ModelParams:
    """Named weights of one model. ``frozen`` names never receive updates."""

    tensors: dict = field(default_factory=dict)
    frozen: set = field(default_factory=set)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list:
        return list(self.tensors)

    def trainable(self) -> dict:
        return {k: v for k, v in self.tensors.items() if k not in self.frozen}

    def decay_names(self) -> set:
        """Matrices and embeddings; biases and LayerNorm weights are excluded."""
        return {k for k, v in self.trainable().items() if v.ndim == 2}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def layer(self, i: int) -> dict:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    dt = config.dtype
    d, f = config.d_model, config.d_ffn

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dt), requires_grad=True)

    def const(value, *shape):
        return Tensor(np.full(shape, value, dtype=dt), requires_grad=True)

    p = ModelParams()
    p.tensors["tok_emb"] = normal(config.vocab_size, d)
    if config.pe_kind is PEKind.LEARNABLE:
        p.tensors["pos_emb"] = normal(config.max_seq_len, d)
    elif config.pe_kind is PEKind.SINUSOIDAL:
        p.tensors["pos_emb"] = Tensor(sinusoidal_pe(config.max_seq_len, d, dt))
        p.frozen.add("pos_emb")
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        for w in ("q", "k", "v", "o"):
            p.tensors[pre + f"w_{w}"] = normal(d, d)
            p.tensors[pre + f"b_{w}"] = const(0.0, d)
        p.tensors[pre + "ln1.gamma"] = const(1.0, d)
        p.tensors[pre + "ln1.beta"] = const(0.0, d)
        p.tensors[pre + "ffn.w1"] = normal(d, f)
        p.tensors[pre + "ffn.b1"] = const(0.0, f)
        p.tensors[pre + "ffn.w2"] = normal(f, d)
        p.tensors[pre + "ffn.b2"] = const(0.0, d)
        p.tensors[pre + "ln2.gamma"] = const(1.0, d)
        p.tensors[pre + "ln2.beta"] = const(0.0, d)
    p.tensors["head.bias"] = const(0.0, config.vocab_size)
    return p


def embed_input(tokens, params: ModelParams, config: ModelConfig) -> Tensor:
    """Token embedding plus (unless absent) the position embedding."""
    tokens = np.asarray(tokens)
    n = tokens.shape[-1]
    if n > config.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {config.max_seq_len}")
    h = T.embedding(params["tok_emb"], tokens)
    if config.pe_kind is not PEKind.ABSENT:
        pe = params["pos_emb"]
        h = h + (T.embedding(pe, np.arange(n)) if pe.requires_grad else Tensor(pe.data[:n]))
    return h


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim == 2:
        return T.linear(x, w, b)
    # one 2-D product keeps the weight gradient a single GEMM
    lead = x.shape[:-1]
    return T.linear(x.reshape(-1, x.shape[-1]), w, b).reshape(*lead, w.shape[1])


def multi_head_attention(x: Tensor, layer: dict, mask: np.ndarray, n_heads: int,
                         dropout: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    """x is (..., n, d_model); returns the same shape."""
    *lead, n, d = x.shape
    dk = d // n_heads

    def heads(t):
        return t.reshape(*lead, n, n_heads, dk).transpose(_swap_heads(len(lead)))

    q = heads(_linear(x, layer["w_q"], layer["b_q"]))
    k = heads(_linear(x, layer["w_k"], layer["b_k"]))
    v = heads(_linear(x, layer["w_v"], layer["b_v"]))
    scores = (q @ k.transpose(_swap_last(q.ndim))) * (1.0 / math.sqrt(dk))
    attn = T.softmax_masked(scores, mask)
    if dropout:
        attn = T.dropout(attn, dropout, rng)
    ctx = (attn @ v).transpose(_swap_heads(len(lead))).reshape(*lead, n, d)
    return _linear(ctx, layer["w_o"], layer["b_o"])


def _swap_heads(n_lead: int) -> tuple:
    # (..., n, h, dk) <-> (..., h, n, dk)
    base = tuple(range(n_lead))
    return base + (n_lead + 1, n_lead, n_lead + 2)


def _swap_last(ndim: int) -> tuple:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def encoder_layer_forward(x: Tensor, layer: dict, mask: np.ndarray, config: ModelConfig,
                          rng: Optional[np.random.Generator] = None) -> Tensor:
    p = config.dropout
    a = multi_head_attention(x, layer, mask, config.n_heads, p, rng)
    if p:
        a = T.dropout(a, p, rng)
    y = T.layer_norm(x + a, layer["ln1.gamma"], layer["ln1.beta"], config.ln_eps)
    f = _linear(T.gelu(_linear(y, layer["ffn.w1"], layer["ffn.b1"])), layer["ffn.w2"], layer["ffn.b2"])
    if p:
        f = T.dropout(f, p, rng)
    return T.layer_norm(y + f, layer["ln2.gamma"], layer["ln2.beta"], config.ln_eps)


def model_forward(tokens, params: ModelParams, config: ModelConfig,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits of shape (..., n, vocab_size) for token ids of shape (..., n)."""
    tokens = np.asarray(tokens)
    if config.dropout and rng is None:
        raise ValueError("dropout > 0 needs an rng")
    n = tokens.shape[-1]
    h = embed_input(tokens, params, config)
    if config.dropout:
        h = T.dropout(h, config.dropout, rng)
    for i, policy in enumerate(config.mask_schedule):
        h = encoder_layer_forward(h, params.layer(i), build_attention_mask(policy, n), config, rng)
    return _linear(h, params["tok_emb"].transpose(), params["head.bias"])
