"""Pre-training loop, validation perplexity, and the loss log.

Training steps are numbered from 1; step ``t`` uses ``lr_at(schedule, t)``
and the batch at position ``t - 1`` of the seeded window stream, so a run
resumed from a checkpoint replays exactly the same batches and masks.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import checkpoint as ckpt_io
from .data import CorpusShard, WindowBatcher, read_shard, sequential_batches
from .model import (ModelConfig, ModelParams, PEKind, format_schedule, init_params,
                    parse_schedule, preset)
from .objectives import (MlmSpec, Objective, batch_loss, clm_shift, eval_masking, make_batch,
                         mlm_rng)
from .optim import AdamState, LrSchedule, adam_step, clip_global_norm, global_norm, lr_at
from .tensor import NonFiniteError, Tape

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, lr: float, grad_norm: float, reason: str = "non-finite loss"):
        super().__init__(f"{reason} at step {step} (lr={lr:.3g}, grad_norm={grad_norm:.4g})")
        self.step, self.lr, self.grad_norm = step, lr, grad_norm


@dataclass
class TrainConfig:
    objective: str = "mlm"
    preset: str = "bert"
    mask_schedule: str = ""
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    vocab_size: int = 259
    seq_len: int = 32
    pe_kind: str = "learnable"
    dropout: float = 0.0
    precision: int = 32
    batch_size: int = 32
    total_steps: int = 5000
    warmup_steps: int = 500
    peak_lr: float = 1e-3
    end_lr: float = 0.0
    lr_power: float = 1.0
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    grad_clip: float = 0.5
    seed: int = 1
    eval_interval: int = 0
    checkpoint_interval: int = 0
    eval_seed: int = 1234
    eval_batch_size: int = 64
    max_eval_windows: int = 0
    mask_rate: float = 0.15
    train_shard: str = ""
    valid_shard: str = ""

    def __post_init__(self):
        Objective(self.objective)
        PEKind(self.pe_kind)
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.total_steps and not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")
        if self.eval_interval < 0 or (self.total_steps and self.eval_interval > self.total_steps):
            raise ValueError("eval_interval must lie in [0, total_steps]")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be non-negative")

    def model_config(self) -> ModelConfig:
        seq = self.seq_len - 1 if Objective(self.objective) is Objective.CLM else self.seq_len
        base = ModelConfig(
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads, d_ffn=self.d_ffn,
            vocab_size=self.vocab_size, max_seq_len=seq, pe_kind=PEKind(self.pe_kind),
            dropout=self.dropout, precision=self.precision,
        )
        if self.mask_schedule:
            return dataclasses.replace(base, mask_schedule=parse_schedule(self.mask_schedule))
        return preset(self.preset, base)

    def mlm_spec(self) -> MlmSpec:
        return MlmSpec(mask_rate=self.mask_rate)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.peak_lr, self.warmup_steps, self.total_steps, self.end_lr, self.lr_power)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_key_values(text, cls))

    @classmethod
    def from_file(cls, path: Union[str, os.PathLike]) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def write(self, path: Union[str, os.PathLike]) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def parse_key_values(text: str, cls=None) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment.

    With ``cls`` (a dataclass) values are coerced to the field types and
    unknown keys are rejected.
    """
    out = {}
    types = {f.name: f.type for f in dataclasses.fields(cls)} if cls else None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if types is not None:
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            kind = types[key]
            if kind in (int, "int"):
                value = int(value)
            elif kind in (float, "float"):
                value = float(value)
        out[key] = value
    return out


@dataclass
class LossLog:
    entries: list = field(default_factory=list)       # (step, train_loss, lr, wall_clock_s)
    eval_entries: list = field(default_factory=list)  # (step, valid_loss, valid_ppl)

    def add(self, step: int, loss: float, lr: float, wall: float) -> None:
        if self.entries and step <= self.entries[-1][0]:
            raise ValueError("loss-log steps must increase")
        self.entries.append((step, loss, lr, wall))

    def add_eval(self, step: int, loss: float, ppl: float) -> None:
        if self.eval_entries and step <= self.eval_entries[-1][0]:
            raise ValueError("eval-log steps must increase")
        self.eval_entries.append((step, loss, ppl))

    @property
    def steps(self) -> np.ndarray:
        return np.array([e[0] for e in self.entries], dtype=np.int64)

    @property
    def losses(self) -> np.ndarray:
        return np.array([e[1] for e in self.entries], dtype=np.float64)

    def write_csv(self, path: Union[str, os.PathLike]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "train_loss", "lr", "wall_clock_s"])
            for step, loss, lr, wall in self.entries:
                w.writerow([step, repr(loss), repr(lr), f"{wall:.3f}"])

    def write_eval_csv(self, path: Union[str, os.PathLike]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "valid_loss", "valid_ppl"])
            for step, loss, ppl in self.eval_entries:
                w.writerow([step, repr(loss), repr(ppl)])

    @classmethod
    def read_csv(cls, path: Union[str, os.PathLike]) -> "LossLog":
        out = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out.add(int(row["step"]), float(row["train_loss"]), float(row.get("lr") or 0.0),
                        float(row.get("wall_clock_s") or 0.0))
        return out


@dataclass
class TrainResult:
    params: ModelParams
    log: LossLog
    adam: Optional[AdamState]
    model_config: ModelConfig
    step: int


def _load_shard(path_or_shard) -> CorpusShard:
    if isinstance(path_or_shard, CorpusShard):
        return path_or_shard
    if not path_or_shard:
        raise ValueError("no shard given")
    return read_shard(path_or_shard)


def evaluate_ppl(params: ModelParams, model_config: ModelConfig, shard: CorpusShard,
                 objective: str = "mlm", seq_len: Optional[int] = None, mlm: MlmSpec = MlmSpec(),
                 eval_seed: int = 1234, batch_size: int = 64, max_windows: int = 0) -> tuple:
    """Mean NLL (nats per predicted token) and its exponential over all windows.

    MLM corruption comes from ``eval_seed`` alone, so every model sees the
    same corrupted validation inputs.
    """
    objective = Objective(objective)
    if seq_len is None:
        seq_len = model_config.max_seq_len + (1 if objective is Objective.CLM else 0)
    total, count = 0.0, 0
    seen = 0
    for b, windows in enumerate(sequential_batches(shard, seq_len, batch_size)):
        if max_windows and seen >= max_windows:
            break
        windows = windows[: max_windows - seen] if max_windows else windows
        seen += len(windows)
        batch = clm_shift(windows) if objective is Objective.CLM else eval_masking(windows, mlm, eval_seed, b)
        n = batch.n_targets
        loss = batch_loss(params, batch, dataclasses.replace(model_config, dropout=0.0))
        total += float(loss.item()) * n
        count += n
    if count == 0:
        raise ValueError("validation shard produced no targets")
    nll = total / count
    return nll, math.exp(nll)


def train(config: TrainConfig, train_shard=None, valid_shard=None, out_dir=None,
          resume=None, stop_at: Optional[int] = None,
          on_step: Optional[Callable] = None) -> TrainResult:
    """Run (or continue) pre-training.

    ``resume`` is a checkpoint path; training continues from its step.
    ``stop_at`` ends the loop early (the schedule still spans ``total_steps``).
    Checkpoints go to ``out_dir/ckpt_<step>.bin`` every ``checkpoint_interval``
    steps and to ``out_dir/final.bin`` at the end.
    """
    mcfg = config.model_config()
    dtype = mcfg.dtype
    params = init_params(mcfg, np.random.default_rng([config.seed, 0x1417]))
    trainable = params.trainable()
    decay = params.decay_names()
    adam = AdamState.for_params(trainable, config.adam_beta1, config.adam_beta2, config.adam_eps)
    start = 0
    if resume is not None:
        ck = ckpt_io.load_checkpoint(resume)
        ckpt_io.restore_params(ck, params, dtype)
        ckpt_io.restore_adam(ck, adam, dtype)
        start = ck.step
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    log_ = LossLog()
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    config_text = config.to_text()
    if end <= start:
        if out_dir is not None:
            ckpt_io.save_checkpoint(out_dir / "final.bin", config_text, params, adam, start)
        return TrainResult(params, log_, adam, mcfg, start)

    train_shard = _load_shard(train_shard if train_shard is not None else config.train_shard)
    if config.eval_interval:
        valid_shard = _load_shard(valid_shard if valid_shard is not None else config.valid_shard)
    objective = Objective(config.objective)
    mlm = config.mlm_spec()
    batcher = WindowBatcher(train_shard, config.seq_len, config.batch_size, config.seed)
    schedule = config.schedule()
    t0 = time.perf_counter()
    for step in range(start + 1, end + 1):
        lr = lr_at(schedule, step)
        tokens, epoch, index = batcher.at_step(step)
        batch = make_batch(objective, tokens, mlm, mlm_rng(config.seed, epoch, index))
        drop_rng = np.random.default_rng([config.seed, step, 0xD20]) if mcfg.dropout else None
        params.zero_grad()
        tape = Tape()
        try:
            # overflow is caught by the finiteness checks; numpy's warning adds nothing
            with tape, np.errstate(over="ignore", invalid="ignore"):
                loss = batch_loss(params, batch, mcfg, drop_rng)
                tape.backward(loss)
        except NonFiniteError as e:
            raise TrainingDiverged(step, lr, float("nan"), str(e)) from e
        loss_value = float(loss.item())
        grads = {k: t.grad for k, t in trainable.items()}
        if config.grad_clip > 0:
            norm = clip_global_norm(grads.values(), config.grad_clip)
        else:
            norm = global_norm(grads.values())
        if not (math.isfinite(loss_value) and math.isfinite(norm)):
            raise TrainingDiverged(step, lr, norm)
        adam_step(trainable, grads, adam, lr, config.weight_decay, decay)
        log_.add(step, loss_value, lr, time.perf_counter() - t0)
        if on_step is not None:
            on_step(step, loss_value, lr)
        if config.eval_interval and step % config.eval_interval == 0:
            nll, ppl = evaluate_ppl(params, mcfg, valid_shard, objective, config.seq_len, mlm,
                                    config.eval_seed, config.eval_batch_size, config.max_eval_windows)
            log_.add_eval(step, nll, ppl)
            log.info("step %d valid_loss %.4f ppl %.3f", step, nll, ppl)
        if out_dir is not None and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            ckpt_io.save_checkpoint(out_dir / f"ckpt_{step}.bin", config_text, params, adam, step)
        if step % 500 == 0:
            log.info("step %d loss %.4f lr %.3g", step, loss_value, lr)
    if out_dir is not None:
        ckpt_io.save_checkpoint(out_dir / "final.bin", config_text, params, adam, end)
    return TrainResult(params, log_, adam, mcfg, end)


def load_model(path: Union[str, os.PathLike]) -> tuple:
    """(TrainConfig, ModelParams, step) from a checkpoint file."""
    ck = ckpt_io.load_checkpoint(path)
    config = TrainConfig.from_text(ck.config_text)
    mcfg = config.model_config()
    params = init_params(mcfg, np.random.default_rng(0))
    ckpt_io.restore_params(ck, params, mcfg.dtype)
    return config, params, ck.step


def describe(config: TrainConfig) -> str:
    mcfg = config.model_config()
    return f"{config.objective} {format_schedule(mcfg.mask_schedule)} pe={mcfg.pe_kind.value}"
