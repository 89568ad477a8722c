"""Train a grid of (preset, position encoding, seed) cells and tabulate them.

Every cell shares the corpus, data order, schedule and step budget; only the
mask schedule, position-encoding kind and seed vary.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .data import CorpusShard, read_shard
from .stages import detect_stages
from .trainer import TrainConfig, evaluate_ppl, parse_key_values, train

log = logging.getLogger(__name__)

TABLE_FIELDS = ["preset", "pe_kind", "seed", "status", "valid_loss", "valid_ppl", "final_train_loss",
                "starting_end", "plateau_end", "diving_end", "plateau_length", "wall_clock_s", "error"]


@dataclass
class MatrixSpec:
    base: TrainConfig
    presets: tuple = ("bert", "decbert_same", "decbert_diff")
    pe_kinds: tuple = ("absent", "learnable")
    seeds: tuple = (1,)
    stage_window: int = 50

    def cells(self) -> list:
        return [(p, k, s) for s in self.seeds for p in self.presets for k in self.pe_kinds]

    @classmethod
    def from_text(cls, text: str) -> "MatrixSpec":
        """Run-config keys plus ``presets``, ``pe_kinds``, ``seeds`` (comma lists) and ``stage_window``."""
        raw = parse_key_values(text)
        lists = {}
        for key in ("presets", "pe_kinds", "seeds"):
            if key in raw:
                lists[key] = tuple(x.strip() for x in raw.pop(key).split(",") if x.strip())
        if "seeds" in lists:
            lists["seeds"] = tuple(int(s) for s in lists["seeds"])
        window = int(raw.pop("stage_window", 50))
        base = TrainConfig.from_text("\n".join(f"{k}={v}" for k, v in raw.items()))
        return cls(base, stage_window=window, **lists)


@dataclass
class CellResult:
    preset: str
    pe_kind: str
    seed: int
    status: str = "ok"
    valid_loss: float = float("nan")
    valid_ppl: float = float("nan")
    final_train_loss: float = float("nan")
    starting_end: int = -1
    plateau_end: int = -1
    diving_end: int = -1
    plateau_length: int = -1
    wall_clock_s: float = 0.0
    error: str = ""
    losses: Optional[np.ndarray] = field(default=None, repr=False)

    def row(self) -> list:
        out = []
        for name in TABLE_FIELDS:
            v = getattr(self, name)
            out.append(repr(v) if isinstance(v, float) and name != "wall_clock_s" else
                       (f"{v:.1f}" if name == "wall_clock_s" else v))
        return out


def tail_mean(losses, fraction: float = 0.1) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    k = max(1, int(round(losses.size * fraction)))
    return float(losses[-k:].mean())


def run_cell(config: TrainConfig, train_shard: CorpusShard, valid_shard: CorpusShard,
             stage_window: int = 50, out_dir: Optional[Path] = None) -> CellResult:
    cell = CellResult(config.preset, config.pe_kind, config.seed)
    t0 = time.perf_counter()
    try:
        res = train(config, train_shard, valid_shard, out_dir=out_dir)
        mcfg = res.model_config
        cell.valid_loss, cell.valid_ppl = evaluate_ppl(
            res.params, mcfg, valid_shard, config.objective, config.seq_len, config.mlm_spec(),
            config.eval_seed, config.eval_batch_size, config.max_eval_windows)
        cell.losses = res.log.losses
        if res.log.entries:
            cell.final_train_loss = tail_mean(cell.losses)
        if len(res.log.entries) >= 2 * stage_window:
            rep = detect_stages(res.log.steps, res.log.losses, window=stage_window)
            cell.starting_end, cell.plateau_end, cell.diving_end = rep.starting_end, rep.plateau_end, rep.diving_end
            cell.plateau_length = rep.plateau_length
        if out_dir is not None:
            res.log.write_csv(out_dir / "loss.csv")
    except Exception as e:  # one failed cell must not sink the matrix
        log.warning("cell %s/%s/seed %d failed: %s", config.preset, config.pe_kind, config.seed, e)
        cell.status = "failed"
        cell.error = f"{type(e).__name__}: {e}"
    cell.wall_clock_s = time.perf_counter() - t0
    return cell


def run_experiment_matrix(spec: MatrixSpec, train_shard=None, valid_shard=None,
                          out_dir: Union[str, os.PathLike, None] = None,
                          table_path: Union[str, os.PathLike, None] = None) -> list:
    """Train every cell in turn; failures are recorded and the rest still run.

    When ``table_path`` is given the CSV is rewritten after each cell so that
    partial results survive an interruption.
    """
    train_shard = train_shard if train_shard is not None else read_shard(spec.base.train_shard)
    valid_shard = valid_shard if valid_shard is not None else read_shard(spec.base.valid_shard)
    results = []
    for preset_name, pe_kind, seed in spec.cells():
        try:
            config = dataclasses.replace(spec.base, preset=preset_name, pe_kind=pe_kind, seed=seed)
        except Exception as e:
            results.append(CellResult(preset_name, pe_kind, seed, status="failed", error=str(e)))
            continue
        cell_dir = None
        if out_dir is not None:
            cell_dir = Path(out_dir) / f"{preset_name}_{pe_kind}_seed{seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
        results.append(run_cell(config, train_shard, valid_shard, spec.stage_window, cell_dir))
        if table_path is not None:
            write_table(results, table_path)
    return results


def table_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_FIELDS)
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()


def write_table(results, path: Union[str, os.PathLike]) -> None:
    Path(path).write_text(table_csv(results), encoding="utf-8")
