"""Command-line entry point: ``masklab <subcommand> --flag value ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, synthetic
from .model import PRESETS, ModelConfig, PEKind, init_params, preset
from .probes import causal_flow_check, equivariance_report, probe_csv, random_probe_params
from .stages import DEFAULT_WINDOW, detect_stages, read_loss_csv
from .trainer import TrainConfig, evaluate_ppl, load_model, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def cmd_binarize(args) -> int:
    shard = data.binarize(args.input, args.output)
    print(f"tokens={len(shard)} documents={shard.boundaries.size} -> {args.output}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = synthetic.SyntheticSpec(args.n_keys, args.seq_len, args.n_sequences, args.seed)
    if args.valid_output:
        tr, va = synthetic.train_valid_shards(spec, args.n_valid)
        data.write_shard(va, args.valid_output)
    else:
        tr = synthetic.generate_synthetic(spec)
    data.write_shard(tr, args.output)
    print(f"sequences={spec.n_sequences} tokens={len(tr)} -> {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.steps is not None:
        changes["total_steps"] = args.steps
    if changes:
        config = config.replace(**changes)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write(out / "config.txt")
    res = train(config, out_dir=out, resume=args.resume, stop_at=args.stop_at)
    res.log.write_csv(out / "loss.csv")
    res.log.write_eval_csv(out / "eval.csv")
    last = f" final_train_loss={res.log.entries[-1][1]!r}" if res.log.entries else ""
    print(f"step={res.step}{last} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config, params, _ = load_model(args.checkpoint)
    mcfg = config.model_config()
    shard = data.read_shard(args.shard)
    seed = config.eval_seed if args.seed is None else args.seed
    nll, ppl = evaluate_ppl(params, mcfg, shard, config.objective, config.seq_len, config.mlm_spec(),
                            seed, config.eval_batch_size, args.max_windows)
    print(f"valid_loss_nats={nll!r} valid_ppl={ppl!r}")
    return EXIT_OK


def _probe_model(args):
    if args.checkpoint:
        config, params, _ = load_model(args.checkpoint)
        return params, config.model_config(), Path(args.checkpoint).stem
    if not args.preset:
        raise UsageError("probe: give --checkpoint or --preset")
    base = ModelConfig(n_layers=args.n_layers, d_model=args.d_model, n_heads=args.n_heads,
                       d_ffn=args.d_ffn, max_seq_len=args.seq_len, pe_kind=PEKind.parse(args.pe_kind))
    mcfg = preset(args.preset, base)
    if args.weights == "init":
        params = init_params(mcfg, np.random.default_rng([args.seed, 0x1417]))
    else:
        params = random_probe_params(mcfg, args.seed)
    return params, mcfg, f"{args.preset}-{mcfg.pe_kind.value}"


def cmd_probe(args) -> int:
    params, mcfg, model_id = _probe_model(args)
    if args.kind == "causal-flow":
        rep = causal_flow_check(params, mcfg, seed=args.seed)
        print(rep.summary())
        return EXIT_OK if rep.passed and rep.oracle_agrees else EXIT_RUNTIME
    res = equivariance_report(params, mcfg, args.trials, args.seed, args.threshold,
                              kind=args.kind, model_id=model_id)
    _write_text(args.output, probe_csv([res]))
    return EXIT_OK


def cmd_stages(args) -> int:
    steps, losses = read_loss_csv(args.input)
    rep = detect_stages(steps, losses, window=args.window, theta_plateau=args.theta_plateau,
                        theta_dive=args.theta_dive)
    _write_text(args.output, rep.to_csv())
    return EXIT_OK


def cmd_matrix(args) -> int:
    from .matrix import MatrixSpec, run_experiment_matrix, table_csv

    spec = MatrixSpec.from_text(Path(args.config).read_text(encoding="utf-8"))
    if args.seed is not None:
        spec.seeds = (args.seed,)
    results = run_experiment_matrix(spec, out_dir=args.out_dir, table_path=args.output)
    if args.output is None:
        sys.stdout.write(table_csv(results))
    failed = sum(r.status != "ok" for r in results)
    print(f"cells={len(results)} failed={failed}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="masklab", description="Attention-mask and position-encoding LM lab.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("binarize", help="text file (one document per line) -> shard")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_binarize)

    s = sub.add_parser("synth", help="generate the key/value corpus")
    s.add_argument("--output", required=True)
    s.add_argument("--valid-output")
    s.add_argument("--n-valid", type=int, default=2000)
    s.add_argument("--n-keys", type=int, default=32)
    s.add_argument("--seq-len", type=int, default=32)
    s.add_argument("--n-sequences", type=int, default=50000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a run-config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="override total_steps")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--stop-at", type=int, help="stop early at this step (schedule unchanged)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="validation loss and perplexity of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--shard", required=True)
    s.add_argument("--seed", type=int, help="evaluation masking seed (default: from config)")
    s.add_argument("--max-windows", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("probe", help="permutation or causal-flow probe")
    s.add_argument("--checkpoint")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--pe-kind", default="absent")
    s.add_argument("--n-layers", type=int, default=2)
    s.add_argument("--d-model", type=int, default=64)
    s.add_argument("--n-heads", type=int, default=4)
    s.add_argument("--d-ffn", type=int, default=256)
    s.add_argument("--seq-len", type=int, default=32)
    s.add_argument("--weights", choices=("random", "init"), default="random",
                   help="fresh weights: unit-scale random draw or the training init")
    s.add_argument("--kind", choices=("random", "adjacent", "causal-flow"), default="random")
    s.add_argument("--trials", type=int, default=200)
    s.add_argument("--threshold", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("stages", help="loss CSV -> stage boundaries CSV")
    s.add_argument("--input", required=True)
    s.add_argument("--output")
    s.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    s.add_argument("--theta-plateau", type=float)
    s.add_argument("--theta-dive", type=float)
    s.set_defaults(func=cmd_stages)

    s = sub.add_parser("matrix", help="train a preset x position-encoding grid")
    s.add_argument("--config", required=True)
    s.add_argument("--output")
    s.add_argument("--out-dir")
    s.add_argument("--seed", type=int, help="run only this seed")
    s.set_defaults(func=cmd_matrix)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"masklab {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
