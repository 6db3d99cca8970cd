"""Training and evaluation loops."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndiff as nd
from .config import StarkConfig, TrainConfig, dump_config, parse_config
from .dataio import Checkpoint, GlossVocabulary, KeypointSample, load_checkpoint, save_checkpoint, validate_targets
from .decoding import beam_decode, corpus_wer, edit_distance, ensemble_probs, greedy_decode
from .encoder import pooled_length
from .model import StarkModel
from .objective import required_frames, total_loss
from .optim import Adam, cosine_lr
from .prep import AugmentConfig, StreamLayout, format_layout, load_layout, parse_layout, prepare_sample

log = logging.getLogger(__name__)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("STARK_THREADS", "1")))
    except ValueError:
        return 1


def augment_config(train_cfg: TrainConfig) -> AugmentConfig | None:
    if not train_cfg.augment:
        return None
    return AugmentConfig(
        speed_range=(train_cfg.speed_min, train_cfg.speed_max),
        rotation_range=(-train_cfg.rotation_deg, train_cfg.rotation_deg),
        seed=train_cfg.seed,
    )


@dataclass
class SampleResult:
    losses: dict[str, float]
    grads: dict[str, np.ndarray]
    stats: dict


def sample_pass(model: StarkModel, streams: dict[str, np.ndarray], targets: Sequence[int], train_cfg: TrainConfig) -> SampleResult:
    """Forward and backward for one sample on its own tape."""
    params = model.parameters()
    with nd.Tape() as tape:
        logits, stats = model.forward(streams, training=True)
        loss = total_loss(logits, targets, train_cfg.distill_weight, train_cfg.temperature, train_cfg.kl_direction)
    grads = nd.backward(tape, loss.total, params.values())
    return SampleResult(loss.values(), {name: grads[arr] for name, arr in params.items()}, stats)


def predict_log_probs(model: StarkModel, sample: KeypointSample) -> np.ndarray:
    """Evaluation-mode ensemble log-probabilities, ``T' x (V+1)``."""
    streams = prepare_sample(sample, model.layout, augment=None)
    logits, _ = model.forward(streams, training=False)
    return ensemble_probs([z.value for z in logits.values()])


def decode_samples(model: StarkModel, samples: Sequence[KeypointSample], beam_width: int = 1) -> list[tuple[int, ...]]:
    out = []
    for s in samples:
        lp = predict_log_probs(model, s)
        hyp = greedy_decode(lp) if beam_width == 1 else beam_decode(lp, beam_width)
        out.append(hyp.labels)
    return out


@dataclass
class TrainResult:
    model: StarkModel
    history: list[dict]
    best_dev_wer: float | None
    checkpoint_dir: Path | None = None
    steps: list[dict] = field(default_factory=list)


def _checkpoint(model, adam, epoch, rng, train_cfg, vocab, history, best) -> Checkpoint:
    return Checkpoint(
        params={name: arr.value for name, arr in model.parameters().items()},
        buffers=model.buffers(),
        adam_m=dict(adam.m),
        adam_v=dict(adam.v),
        epoch=epoch,
        step=adam.step,
        rng_state=rng.bit_generator.state,
        fingerprint=model.fingerprint,
        meta={
            "config": dump_config(model.config, train_cfg),
            "layout": format_layout(model.layout),
            "vocabulary": list(vocab.glosses),
            "history": history,
            "best_dev_wer": best,
        },
    )


def _json_state(state: dict) -> dict:
    # PCG64 state holds Python ints that JSON round-trips exactly
    return json.loads(json.dumps(state))


def train(
    model_cfg: StarkConfig,
    train_cfg: TrainConfig,
    train_set: Sequence[KeypointSample],
    dev_set: Sequence[KeypointSample],
    vocab: GlossVocabulary,
    layout: StreamLayout | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train from scratch or from ``resume``; ``stop_after`` ends early after that many epochs in total."""
    if not train_set:
        raise ValueError("training set is empty")
    layout = layout or load_layout(model_cfg.layout)
    validate_targets(train_set, vocab)
    validate_targets(dev_set, vocab)
    rng = np.random.default_rng(train_cfg.seed)
    model = StarkModel(model_cfg, layout, vocab.num_classes, rng)
    params = model.parameters()
    adam = Adam({name: arr.shape for name, arr in params.items()}, train_cfg)
    history: list[dict] = []
    best: float | None = None
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, fingerprint=model.fingerprint)
        model.load_arrays(ckpt.params, ckpt.buffers)
        adam.m = {k: v.copy() for k, v in ckpt.adam_m.items()}
        adam.v = {k: v.copy() for k, v in ckpt.adam_v.items()}
        adam.step = ckpt.step
        rng.bit_generator.state = ckpt.rng_state
        history = list(ckpt.meta.get("history", []))
        best = ckpt.meta.get("best_dev_wer")
        start = ckpt.epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(model_cfg, train_cfg), encoding="utf-8")

    aug = augment_config(train_cfg)
    workers = thread_count()
    end = train_cfg.epochs if stop_after is None else min(train_cfg.epochs, stop_after)
    for epoch in range(start, end):
        lr = cosine_lr(epoch, train_cfg)
        order = rng.permutation(len(train_set))
        sums: dict[str, float] = {}
        used, skipped, step_losses = 0, [], []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = []
            for i in order[lo : lo + train_cfg.batch_size]:
                sample = train_set[int(i)]
                streams = prepare_sample(sample, layout, aug, epoch)
                frames = next(iter(streams.values())).shape[0]
                if required_frames(sample.glosses) > pooled_length(frames, model_cfg.pools):
                    log.warning(
                        "skipping %s: %d glosses need %d frames, %d input frames pool to %d",
                        sample.id, len(sample.glosses), required_frames(sample.glosses),
                        frames, pooled_length(frames, model_cfg.pools),
                    )
                    skipped.append(sample.id)
                    continue
                batch.append((streams, sample.glosses))
            if not batch:
                continue
            if workers > 1:
                with ThreadPoolExecutor(workers) as pool:
                    results = list(pool.map(lambda b: sample_pass(model, b[0], b[1], train_cfg), batch))
            else:
                results = [sample_pass(model, s, t, train_cfg) for s, t in batch]
            # fixed summation and statistics order regardless of worker count
            grads = {name: np.zeros(arr.shape) for name, arr in params.items()}
            for r in results:
                for name in grads:
                    grads[name] += r.grads[name]
                model.apply_stats(r.stats)
                for k, v in r.losses.items():
                    sums[k] = sums.get(k, 0.0) + v
            for name in grads:
                grads[name] /= len(results)
            adam.apply(params, grads, lr)
            used += len(results)
            step_losses.append(float(np.mean([r.losses["total"] for r in results])))

        dev_wer = None
        if dev_set:
            hyps = decode_samples(model, dev_set, beam_width=1)
            dev_wer = corpus_wer([s.glosses for s in dev_set], hyps)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "samples": used,
            "skipped": skipped,
            "step_loss": step_losses,
            "train": {k: v / max(used, 1) for k, v in sums.items()},
            "dev_wer": dev_wer,
        }
        history.append(entry)
        log.info(
            "epoch %d lr %.3g loss %.4f dev WER %s",
            epoch, lr, entry["train"].get("total", float("nan")),
            "n/a" if dev_wer is None else f"{100 * dev_wer:.2f}%",
        )
        improved = dev_wer is not None and (best is None or dev_wer < best)
        if improved:
            best = dev_wer
        if out is not None:
            ckpt = _checkpoint(model, adam, epoch + 1, rng, train_cfg, vocab, history, best)
            ckpt.rng_state = _json_state(ckpt.rng_state)
            save_checkpoint(ckpt, out / "last.ckpt")
            if improved:
                save_checkpoint(ckpt, out / "best.ckpt")
            with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
                for row in history:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
    return TrainResult(model, history, best, out)


def load_model(path: str | Path) -> tuple[StarkModel, GlossVocabulary, TrainConfig]:
    """Rebuild the model stored in a checkpoint."""
    ckpt = load_checkpoint(path)
    model_cfg, train_cfg = parse_config(ckpt.meta["config"])
    layout = parse_layout(ckpt.meta["layout"])
    vocab = GlossVocabulary(ckpt.meta["vocabulary"])
    model = StarkModel(model_cfg, layout, vocab.num_classes, np.random.default_rng(0))
    if model.fingerprint != ckpt.fingerprint:
        raise ValueError("checkpoint metadata does not reproduce its own fingerprint")
    model.load_arrays(ckpt.params, ckpt.buffers)
    return model, vocab, train_cfg


@dataclass
class EvalReport:
    wer: float
    beam_width: int
    rows: list[dict]

    def summary(self) -> str:
        return f"WER {100 * self.wer:.2f}% over {len(self.rows)} samples (beam width {self.beam_width})"


def evaluate(
    model: StarkModel,
    samples: Sequence[KeypointSample],
    vocab: GlossVocabulary,
    beam_width: int = 5,
    decode_path: str | Path | None = None,
    model_vocab: GlossVocabulary | None = None,
) -> EvalReport:
    """Ensemble-decode ``samples`` without augmentation and score corpus WER."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    if model_vocab is not None and model_vocab != vocab:
        raise ValueError("dataset vocabulary does not match the checkpoint's vocabulary")
    if vocab.num_classes != model.num_classes:
        raise ValueError(f"vocabulary has {len(vocab)} glosses, model predicts {model.num_classes - 1}")
    validate_targets(samples, vocab)
    hyps = decode_samples(model, samples, beam_width)
    rows = [
        {"id": s.id, "ref": list(s.glosses), "hyp": list(h), "edits": edit_distance(s.glosses, h)}
        for s, h in zip(samples, hyps)
    ]
    report = EvalReport(corpus_wer([s.glosses for s in samples], hyps), beam_width, rows)
    if decode_path is not None:
        write_decode_file(decode_path, [(r["id"], vocab.decode(r["hyp"])) for r in rows])
    return report


def write_decode_file(path: str | Path, rows: Sequence[tuple[str, Sequence[str]]]) -> None:
    """One line per sample: ``id<TAB>gloss gloss ...``."""
    with open(path, "w", encoding="utf-8") as fh:
        for ident, glosses in rows:
            fh.write(f"{ident}\t{' '.join(glosses)}\n")


def read_decode_file(path: str | Path) -> list[tuple[str, tuple[str, ...]]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        ident, _, rest = line.partition("\t")
        rows.append((ident, tuple(rest.split())))
    return rows
