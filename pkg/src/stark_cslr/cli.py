"""Command-line entry point: train, eval, synth, params, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, load_config
from .dataio import (
    DatasetFormatError, VocabularyError, CheckpointError, load_dataset, load_vocabulary, save_dataset, save_vocabulary,
)
from .encoder import count_parameters
from .gradcheck import DEFAULT_SEEDS, SUITES, TOLERANCE, run_gradchecks
from .prep import LayoutError, load_layout
from .synth import SynthSpecError, load_synth_spec, synthesize_dataset

log = logging.getLogger("stark_cslr")

TRAIN_FILE, DEV_FILE, TEST_FILE, VOCAB_FILE = "train.bin", "dev.bin", "test.bin", "vocab.txt"


def _data_files(data: Path, split: str) -> tuple[Path, Path]:
    return data / f"{split}.bin", data / VOCAB_FILE


def cmd_train(args) -> int:
    from .trainer import train

    model_cfg, train_cfg = load_config(args.config)
    layout = load_layout(model_cfg.layout)
    data = Path(args.data)
    vocab = load_vocabulary(data / VOCAB_FILE)
    train_set = load_dataset(data / TRAIN_FILE, num_points=layout.num_points)
    dev_path = data / DEV_FILE
    dev_set = load_dataset(dev_path, num_points=layout.num_points) if dev_path.exists() else []
    result = train(model_cfg, train_cfg, train_set, dev_set, vocab, layout, out_dir=args.out, resume=args.resume)
    best = "n/a" if result.best_dev_wer is None else f"{100 * result.best_dev_wer:.2f}%"
    print(f"trained {len(result.history)} epochs; best dev WER {best}; checkpoints in {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_model

    model, model_vocab, _ = load_model(args.ckpt)
    data = Path(args.data)
    samples_path, vocab_path = _data_files(data, args.split)
    vocab = load_vocabulary(vocab_path)
    samples = load_dataset(samples_path, num_points=model.layout.num_points)
    decode_path = args.out or data / f"{args.split}.decode.txt"
    report = evaluate(model, samples, vocab, args.beam_width, decode_path, model_vocab=model_vocab)
    print(report.summary())
    print(f"hypotheses written to {decode_path}")
    if args.report:
        Path(args.report).write_text(
            json.dumps({"wer": report.wer, "beam_width": report.beam_width, "rows": report.rows}, indent=1),
            encoding="utf-8",
        )
    return 0


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    train_set, dev_set, vocab = synthesize_dataset(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_set, out / TRAIN_FILE)
    save_dataset(dev_set, out / DEV_FILE)
    save_vocabulary(vocab, out / VOCAB_FILE)
    print(f"wrote {len(train_set)} train / {len(dev_set)} dev samples, {len(vocab)} glosses to {out}")
    return 0


def format_parameter_report(counts: dict) -> str:
    lines = []
    for name, s in counts["streams"].items():
        mods = " ".join(f"m{i}={n:,}" for i, n in enumerate(s["modules"]))
        lines.append(f"{name:<6} points={s['points']:<3} stem={s['stem']:,} {mods} total={s['total']:,}")
    lines.append(f"encoder total {counts['total']:,}")
    return "\n".join(lines)


def cmd_params(args) -> int:
    model_cfg, _ = load_config(args.config)
    counts = count_parameters(model_cfg, load_layout(model_cfg.layout))
    print(format_parameter_report(counts))
    return 0


def cmd_gradcheck(args) -> int:
    seeds = [args.seed] if args.seed is not None else list(DEFAULT_SEEDS)
    ops = [args.op] if args.op else None
    failed = 0
    start = time.perf_counter()
    for r in run_gradchecks(ops, seeds):
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:<4} {r.op:<20} seed={r.seed} rel_err={r.error:.2e}")
    print(f"{failed} failure(s); tolerance {TOLERANCE:g}; {time.perf_counter() - start:.1f}s")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stark", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--data", required=True, help=f"directory with {TRAIN_FILE}, {DEV_FILE}, {VOCAB_FILE}")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a split and score WER")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--split", default="dev", help="dataset file stem inside --data (default: dev)")
    p.add_argument("--out", help="decode file (default: <data>/<split>.decode.txt)")
    p.add_argument("--report", help="also write a JSON per-sample report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic keypoint corpus")
    p.add_argument("--spec", required=True, help="key=value synth spec file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("params", help="print encoder parameter counts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", choices=sorted(SUITES))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, VocabularyError, CheckpointError, LayoutError, SynthSpecError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
