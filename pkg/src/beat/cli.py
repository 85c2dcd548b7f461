"""Command-line interface.

One executable covering the pipeline: synthesize records, ingest raw files,
preprocess into normalized pairs, train, evaluate, run the ablation matrix,
and convert segments to and from token text. All subcommands honor
``--seed`` and ``--threads`` (default 1 for reproducibility) and accept a
plain ``key=value`` config file whose entries sit between built-in defaults
and explicit flags.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import metrics, signal_io, synth, tokens, trainer
from .errors import BeatError
from .model import (
    BeatConfig,
    decode_tokens,
    load_checkpoint,
    save_checkpoint,
    tokenize,
)
from .preprocess import Segment, SegmentPair

_CONFIG_FLOAT_FIELDS = {"beta", "lambda_recon", "lambda_pred", "lambda_vq"}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="random seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (default 1 for bit reproducibility)")
    parser.add_argument("--config", type=str, default=None,
                        help="key=value config file; flags override its entries")


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclass_fields(BeatConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "pred_from_quantized":
            parser.add_argument(flag, type=_parse_bool, default=f.default,
                                help="feed the prediction head quantized queries")
        elif f.name in _CONFIG_FLOAT_FIELDS:
            parser.add_argument(flag, type=float, default=f.default)
        else:
            parser.add_argument(flag, type=int, default=f.default)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_synth_flags(parser: argparse.ArgumentParser, with_leads: bool = True) -> None:
    parser.add_argument("--heart-rate", type=float, default=75.0)
    parser.add_argument("--fs", type=float, default=500.0)
    parser.add_argument("--duration", type=float, default=10.0)
    if with_leads:
        # subcommands that carry model flags reuse the model's --n-leads
        parser.add_argument("--n-leads", type=int, default=12)
    parser.add_argument("--noise-std", type=float, default=0.02)
    parser.add_argument("--drift-amplitude", type=float, default=0.1)
    parser.add_argument("--drift-freq", type=float, default=0.3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beat",
        description="ECG tokenizer pipeline: synthesize, preprocess, train, "
        "evaluate, and convert segments to discrete token text.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-lead record")
    _add_common(p)
    _add_synth_flags(p)
    p.add_argument("--out", required=True, help="output path (.csv or .bseg)")
    p.add_argument("--format", choices=("csv", "bseg"), default=None,
                   help="output format (default: from the file extension)")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("ingest", help="parse a raw record (.hea or .csv) and summarize it")
    _add_common(p)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--fs", type=float, default=None, help="sampling rate for CSV input")
    p.add_argument("--lead-names", type=str, default=None,
                   help="comma-separated lead names for CSV input")
    p.add_argument("--out", default=None, help="optional CSV re-export path")
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("preprocess", help="turn a raw record into a normalized pair file")
    _add_common(p)
    p.add_argument("--in", dest="in_path", required=True, help="record (.hea or .csv)")
    p.add_argument("--fs", type=float, default=None, help="sampling rate for CSV input")
    p.add_argument("--lead-names", type=str, default=None)
    p.add_argument("--target-fs", type=float, default=250.0)
    p.add_argument("--segment-len", type=int, default=500)
    p.add_argument("--pred-len", type=int, default=250)
    p.add_argument("--notch", type=float, choices=(50.0, 60.0), default=50.0)
    p.add_argument("--out", required=True, help="output pair file (.bseg)")
    p.set_defaults(handler=_cmd_preprocess)

    p = sub.add_parser("train", help="train a tokenizer")
    _add_common(p)
    _add_model_flags(p)
    _add_synth_flags(p, with_leads=False)
    p.add_argument("--data", default=None, help="directory of .bseg pair files")
    p.add_argument("--eval-data", default=None, help="directory of evaluation pairs")
    p.add_argument("--synth-pairs", type=int, default=64,
                   help="synthetic training pairs when --data is absent")
    p.add_argument("--synth-eval-pairs", type=int, default=16)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--min-lr", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--clip-norm", type=float, default=1.0,
                   help="global gradient-norm clip; 0 disables")
    p.add_argument("--out", required=True, help="checkpoint path (.beat)")
    p.add_argument("--history", default=None, help="per-epoch metrics CSV")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on pair files")
    _add_common(p)
    _add_synth_flags(p, with_leads=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None, help="directory of .bseg pair files")
    p.add_argument("--synth-pairs", type=int, default=32)
    p.add_argument("--baseline-loss-r", type=float, default=None)
    p.add_argument("--baseline-loss-p", type=float, default=None)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("encode", help="tokenize a segment file to token text")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_path", required=True, help="segment file (.bseg)")
    p.add_argument("--out", default=None, help="write the token line here instead of stdout")
    p.set_defaults(handler=_cmd_encode)

    p = sub.add_parser("decode", help="reconstruct a segment from token text")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokens", required=True, help="file containing one token line, or - for stdin")
    p.add_argument("--out", required=True, help="output segment file (.bseg)")
    p.set_defaults(handler=_cmd_decode)

    p = sub.add_parser("ablate", help="train the ablation matrix and emit its CSV")
    _add_common(p)
    _add_model_flags(p)
    _add_synth_flags(p, with_leads=False)
    p.add_argument("--pairs", type=int, default=96, help="training pairs per variant")
    p.add_argument("--eval-pairs", type=int, default=24)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--variants", default="all",
                   help="comma list of variant names, or 'all', or 'none'")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(handler=_cmd_ablate)
    return parser


# ---------------------------------------------------------------------------
# config file merge


def load_config_file(path) -> dict[str, str]:
    """Read a flat key=value file; '#' starts a comment, blank lines skipped."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise BeatError(f"config file line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str],
                       args: argparse.Namespace) -> argparse.Namespace:
    """Re-parse with config-file entries installed as the subcommand's
    defaults, so explicit flags still win."""
    values = load_config_file(args.config)
    subparser = None
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            subparser = action.choices[args.cmd]
            break
    by_dest = {a.dest: a for a in subparser._actions if a.dest != "help"}
    defaults = {}
    for key, text in values.items():
        dest = key.replace("-", "_")
        if dest not in by_dest:
            raise BeatError(f"config file key {key!r} is not a flag of '{args.cmd}'")
        action = by_dest[dest]
        defaults[dest] = action.type(text) if action.type else text
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# shared helpers


def _record_from_args(args) -> signal_io.EcgRecord:
    path = Path(args.in_path)
    if path.suffix == ".hea":
        return signal_io.read_wfdb_record(path)
    if path.suffix == ".csv":
        if args.fs is None:
            raise BeatError("--fs is required for CSV input")
        text = path.read_text()
        first = next(ln for ln in text.splitlines() if ln.strip())
        n_cols = len(first.split(","))
        if args.lead_names:
            names = [n.strip() for n in args.lead_names.split(",")]
        else:
            names = [f"LEAD{i + 1}" for i in range(n_cols)]
        return signal_io.read_csv_record(text, args.fs, names)
    raise BeatError(f"unsupported record extension {path.suffix!r} (use .hea or .csv)")


def _synth_config(args, seed: int, n_leads: int | None = None) -> synth.SynthConfig:
    return synth.SynthConfig(
        heart_rate=args.heart_rate,
        fs=args.fs if getattr(args, "fs", None) else 500.0,
        duration=args.duration,
        n_leads=n_leads if n_leads is not None else args.n_leads,
        noise_std=args.noise_std,
        drift_amplitude=args.drift_amplitude,
        drift_freq=args.drift_freq,
        seed=seed,
    )


def _model_config(args) -> BeatConfig:
    kwargs = {f.name: getattr(args, f.name) for f in dataclass_fields(BeatConfig)}
    return BeatConfig(**kwargs)


def _read_pair_dir(path, context_len: int) -> list[SegmentPair]:
    files = sorted(Path(path).glob("*.bseg"))
    if not files:
        raise BeatError(f"no .bseg files in {path}")
    pairs = []
    for f in files:
        segment = signal_io.read_segment_file(f)
        if segment.n_samples <= context_len:
            raise BeatError(
                f"{f} has {segment.n_samples} rows; a pair file needs more than"
                f" the context length {context_len}"
            )
        context = Segment(
            samples=segment.samples[:context_len],
            fs=segment.fs,
            norm_stats=segment.norm_stats,
        )
        pairs.append(SegmentPair(context=context, future=segment.samples[context_len:]))
    return pairs


def _datasets(args, config: BeatConfig) -> tuple[list[SegmentPair], list[SegmentPair]]:
    if args.data:
        train_set = _read_pair_dir(args.data, config.context_len)
        eval_dir = args.eval_data if getattr(args, "eval_data", None) else args.data
        eval_set = _read_pair_dir(eval_dir, config.context_len)
        return train_set, eval_set
    base = _synth_config(args, seed=args.seed)
    train_set = synth.make_dataset(
        args.synth_pairs, base, config.context_len, config.pred_len, seed=args.seed
    )
    eval_set = synth.make_dataset(
        getattr(args, "synth_eval_pairs", 16), base,
        config.context_len, config.pred_len, seed=args.seed + 1,
    )
    return train_set, eval_set


def _identity_segment(samples: np.ndarray, fs: float) -> Segment:
    stats = [(0.0, 1.0)] * samples.shape[1]
    return Segment(samples=samples, fs=fs, norm_stats=stats)


# ---------------------------------------------------------------------------
# handlers


def _cmd_synth(args) -> int:
    config = _synth_config(args, seed=args.seed)
    record = synth.synth_record(config)
    fmt = args.format or ("bseg" if args.out.endswith(".bseg") else "csv")
    if fmt == "csv":
        signal_io.write_csv_record(record, args.out)
    else:
        signal_io.write_segment_file(_identity_segment(record.samples, record.fs), args.out)
    print(f"wrote {record.n_samples}x{record.n_leads} record at {record.fs} Hz to {args.out}")
    return 0


def _cmd_ingest(args) -> int:
    record = _record_from_args(args)
    print(
        f"record: {record.n_samples} samples x {record.n_leads} leads"
        f" at {record.fs} Hz ({', '.join(record.lead_names)})"
    )
    if args.out:
        signal_io.write_csv_record(record, args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    record = _record_from_args(args)
    pair = synth.preprocess_record(
        record,
        context_len=args.segment_len,
        pred_len=args.pred_len,
        target_fs=args.target_fs,
        notch_hz=args.notch,
    )
    combined = Segment(
        samples=np.concatenate([pair.context.samples, pair.future], axis=0),
        fs=pair.context.fs,
        norm_stats=pair.context.norm_stats,
        source_offset=pair.context.source_offset,
    )
    signal_io.write_segment_file(combined, args.out)
    print(
        f"wrote pair ({args.segment_len} context + {args.pred_len} future samples,"
        f" offset {pair.context.source_offset}) to {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    config = _model_config(args)
    train_set, eval_set = _datasets(args, config)
    params, history = trainer.train(
        config, train_set, eval_set,
        epochs=args.epochs, seed=args.seed,
        base_lr=args.lr, min_lr=args.min_lr, batch_size=args.batch_size,
        weight_decay=args.weight_decay, clip_norm=args.clip_norm,
    )
    save_checkpoint(params, args.out)
    print(f"wrote checkpoint to {args.out}")
    if args.history:
        history.write_csv(args.history)
        print(f"wrote history to {args.history}")
    if history.rows:
        last = history.rows[-1]
        print(
            f"final epoch {last['epoch']}: l_total={last['l_total']:.6f}"
            f" utilization={last['utilization_pct']:.2f}%"
        )
    return 0


def _cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    config = params.config
    if args.data:
        eval_set = _read_pair_dir(args.data, config.context_len)
    else:
        base = _synth_config(args, seed=args.seed, n_leads=config.n_leads)
        eval_set = synth.make_dataset(
            args.synth_pairs, base, config.context_len, config.pred_len, seed=args.seed
        )
    report = metrics.eval_model(params, eval_set)
    base_r = args.baseline_loss_r if args.baseline_loss_r else report.loss_r
    base_p = args.baseline_loss_p if args.baseline_loss_p else report.loss_p
    value = metrics.score(report.utilization_pct, report.loss_r, report.loss_p, base_r, base_p)
    print(f"loss_r={report.loss_r:.6f}")
    print(f"loss_p={report.loss_p:.6f}")
    print(f"utilization_pct={report.utilization_pct:.4f}")
    print(f"score={value:.4f}")
    return 0


def _cmd_encode(args) -> int:
    params = load_checkpoint(args.ckpt)
    config = params.config
    segment = signal_io.read_segment_file(args.in_path)
    if segment.n_samples < config.context_len:
        raise BeatError(
            f"segment has {segment.n_samples} samples, model needs {config.context_len}"
        )
    samples = segment.samples[: config.context_len]
    clipped = Segment(samples=samples, fs=segment.fs, norm_stats=segment.norm_stats)
    sequence = tokenize(params, clipped)
    line = tokens.serialize_tokens(sequence, config.codebook_size1)
    if args.out:
        Path(args.out).write_text(line + "\n")
    else:
        print(line)
    return 0


def _cmd_decode(args) -> int:
    params = load_checkpoint(args.ckpt)
    config = params.config
    if args.tokens == "-":
        text = sys.stdin.read().strip()
    else:
        text = Path(args.tokens).read_text().strip()
    sequence = tokens.parse_tokens(text, config.codebook_size1, config.codebook_size2)
    recon = decode_tokens(params, sequence)
    signal_io.write_segment_file(_identity_segment(recon, 250.0), args.out)
    print(f"wrote reconstruction ({recon.shape[0]}x{recon.shape[1]}) to {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    config = _model_config(args)
    all_variants = dict(metrics.table5_variants(config))
    if args.variants == "all":
        chosen = list(all_variants.items())
    elif args.variants == "none":
        chosen = []
    else:
        names = [n.strip() for n in args.variants.split(",") if n.strip()]
        unknown = [n for n in names if n not in all_variants]
        if unknown:
            raise BeatError(
                f"unknown variants {unknown}; available: {sorted(all_variants)}"
            )
        chosen = [(n, all_variants[n]) for n in names]

    base_synth = _synth_config(args, seed=args.seed)

    def data_for(cfg: BeatConfig):
        train_set = synth.make_dataset(
            args.pairs, base_synth, cfg.context_len, cfg.pred_len, seed=args.seed
        )
        eval_set = synth.make_dataset(
            args.eval_pairs, base_synth, cfg.context_len, cfg.pred_len, seed=args.seed + 1
        )
        return train_set, eval_set

    reports = metrics.run_ablation(
        config, data_for, chosen,
        seed=args.seed, epochs=args.epochs, base_lr=args.lr, batch_size=args.batch_size,
    )
    metrics.write_ablation_csv(
        reports, args.out,
        baseline_note="scores are relative to the 'original' row's losses",
    )
    for r in reports:
        print(
            f"{r.configuration}: levels={r.config.levels} K={r.config.codebook_size1}"
            f" T={r.config.context_len} util={r.utilization_pct:.2f}%"
            f" loss_r={r.loss_r:.4f} loss_p={r.loss_p:.4f} score={r.score:.2f}"
        )
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------


def dispatch(argv: list[str]) -> int:
    """Run one subcommand. Exit codes: 0 success, 1 domain error, 2 usage
    error. Diagnostics go to stderr."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            args = _apply_config_file(parser, argv, args)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    except BeatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    limiter = None
    if getattr(args, "threads", None):
        try:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=args.threads)
        except ImportError:
            pass
    try:
        return args.handler(args)
    except (BeatError, ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
