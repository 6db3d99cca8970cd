import struct

import numpy as np
import pytest

from stark_cslr.config import StarkConfig
from stark_cslr.dataio import (
    Checkpoint, CheckpointError, DatasetFormatError, DimensionMismatchError, FingerprintMismatchError, GlossVocabulary,
    KeypointSample, VocabularyError, load_checkpoint, load_dataset, load_vocabulary, read_dataset_header,
    save_checkpoint, save_dataset, save_vocabulary, validate_targets,
)
from stark_cslr.model import StarkModel
from stark_cslr.prep import PAPER_LAYOUT
from stark_cslr.synth import SynthSpec, SynthSpecError, parse_synth_spec, synthesize_dataset


def make_samples(n=3, points=79, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        frames = rng.uniform(0, 200, (int(rng.integers(1, 9)), points, 3)).astype(np.float32)
        glosses = tuple(int(g) for g in rng.integers(1, 6, size=int(rng.integers(0, 4))))
        out.append(KeypointSample(f"s{i}", frames, glosses, 210.0, 260.0))
    return out


# datasets


def test_empty_dataset_round_trip(tmp_path):
    save_dataset([], tmp_path / "e.bin")
    assert load_dataset(tmp_path / "e.bin") == []


def test_dataset_round_trip(tmp_path):
    samples = make_samples()
    save_dataset(samples, tmp_path / "d.bin")
    assert load_dataset(tmp_path / "d.bin", num_points=79) == samples
    header = read_dataset_header(tmp_path / "d.bin")
    assert (header.version, header.num_points, header.dims, header.count, header.layout) == (1, 79, 3, 3, "paper79")


def test_dataset_bytes_deterministic(tmp_path):
    samples = make_samples()
    save_dataset(samples, tmp_path / "a.bin")
    save_dataset(samples, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_eighty_points_under_79_layout_rejected(tmp_path):
    save_dataset(make_samples(points=80), tmp_path / "d.bin")
    with pytest.raises(DimensionMismatchError):
        load_dataset(tmp_path / "d.bin", num_points=79)


def test_record_disagreeing_with_header_names_record(tmp_path):
    samples = make_samples(2)
    save_dataset(samples, tmp_path / "d.bin")
    data = bytearray((tmp_path / "d.bin").read_bytes())
    # second record: patch its point count field
    header_end = 24 + 2 + len("paper79")
    first = struct.unpack_from("<I", data, header_end)[0]
    rec = header_end + 4 + first
    id_len = struct.unpack_from("<H", data, rec + 4)[0]
    struct.pack_into("<I", data, rec + 4 + 2 + id_len + 4, 80)
    (tmp_path / "d.bin").write_bytes(bytes(data))
    with pytest.raises(DimensionMismatchError) as err:
        load_dataset(tmp_path / "d.bin")
    assert err.value.record == 1


def test_unknown_version_and_bad_magic(tmp_path):
    save_dataset(make_samples(1), tmp_path / "d.bin")
    data = bytearray((tmp_path / "d.bin").read_bytes())
    struct.pack_into("<I", data, 8, 7)
    (tmp_path / "v.bin").write_bytes(bytes(data))
    with pytest.raises(DatasetFormatError, match="version 7"):
        load_dataset(tmp_path / "v.bin")
    (tmp_path / "m.bin").write_bytes(b"NOTADATA" + bytes(data[8:]))
    with pytest.raises(DatasetFormatError, match="magic"):
        load_dataset(tmp_path / "m.bin")


def test_truncated_file_reports_record(tmp_path):
    save_dataset(make_samples(2), tmp_path / "d.bin")
    data = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-10])
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(tmp_path / "t.bin")
    assert err.value.record == 1


def test_sample_requires_frames():
    with pytest.raises(ValueError):
        KeypointSample("x", np.zeros((0, 79, 3)), (), 1.0, 1.0)
    with pytest.raises(ValueError):
        KeypointSample("x", np.zeros((4, 79, 2)), (), 1.0, 1.0)


# vocabularies


def test_vocabulary_ids(tmp_path):
    (tmp_path / "v.txt").write_text("REGEN\nSONNE\n", encoding="utf-8")
    vocab = load_vocabulary(tmp_path / "v.txt")
    assert vocab.id_of("REGEN") == 1 and vocab.id_of("SONNE") == 2 and vocab.blank == 0
    assert vocab.gloss_of(2) == "SONNE" and vocab.num_classes == 3
    assert vocab.decode(vocab.encode(["SONNE", "REGEN"])) == ("SONNE", "REGEN")


def test_vocabulary_duplicate_names_gloss(tmp_path):
    (tmp_path / "v.txt").write_text("REGEN\nSONNE\nREGEN\n", encoding="utf-8")
    with pytest.raises(VocabularyError, match="REGEN"):
        load_vocabulary(tmp_path / "v.txt")


def test_vocabulary_empty_line_rejected(tmp_path):
    (tmp_path / "v.txt").write_text("REGEN\n\nSONNE\n", encoding="utf-8")
    with pytest.raises(VocabularyError):
        load_vocabulary(tmp_path / "v.txt")


def test_empty_vocabulary_is_blank_only(tmp_path):
    (tmp_path / "v.txt").write_text("", encoding="utf-8")
    vocab = load_vocabulary(tmp_path / "v.txt")
    assert len(vocab) == 0 and vocab.num_classes == 1


def test_vocabulary_save_round_trip(tmp_path):
    vocab = GlossVocabulary(["A", "B", "ÜBER"])
    save_vocabulary(vocab, tmp_path / "v.txt")
    assert load_vocabulary(tmp_path / "v.txt") == vocab


def test_blank_never_a_target():
    vocab = GlossVocabulary(["A", "B"])
    validate_targets([KeypointSample("ok", np.zeros((2, 3, 3)), (1, 2), 1, 1)], vocab)
    with pytest.raises(VocabularyError):
        validate_targets([KeypointSample("bad", np.zeros((2, 3, 3)), (0, 1), 1, 1)], vocab)
    with pytest.raises(VocabularyError):
        validate_targets([KeypointSample("bad", np.zeros((2, 3, 3)), (3,), 1, 1)], vocab)
    with pytest.raises(VocabularyError):
        vocab.id_of("C")


# checkpoints


def small_model(**kw):
    base = dict(stem_channels=4, channels=(4, 6), heads=1, head_dim=2, kernel=3, dec_hidden=8, dec_ffn=8)
    cfg = StarkConfig(**{**base, **kw})
    return StarkModel(cfg, PAPER_LAYOUT, 5, np.random.default_rng(0))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = small_model()
    params = {k: v.value for k, v in model.parameters().items()}
    rng = np.random.default_rng(3)
    rng.random(5)
    ckpt = Checkpoint(params, model.buffers(), {k: v * 2 for k, v in params.items()}, {k: v**2 for k, v in params.items()},
                      epoch=3, step=12, rng_state=rng.bit_generator.state, fingerprint=model.fingerprint,
                      meta={"note": "x"})
    save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt", fingerprint=model.fingerprint)
    for group in ("params", "buffers", "adam_m", "adam_v"):
        a, b = getattr(ckpt, group), getattr(back, group)
        assert list(a) == list(b)
        for k in a:
            assert np.array_equal(a[k], b[k])
    assert (back.epoch, back.step, back.meta) == (3, 12, {"note": "x"})
    restored = np.random.default_rng()
    restored.bit_generator.state = back.rng_state
    assert np.array_equal(restored.random(4), rng.random(4))
    save_checkpoint(back, tmp_path / "d.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()


def test_checkpoint_fingerprint_mismatch(tmp_path):
    model = small_model()
    other = small_model(kernel=5)
    assert model.fingerprint != other.fingerprint
    save_checkpoint(Checkpoint({}, fingerprint=model.fingerprint), tmp_path / "c.ckpt")
    with pytest.raises(FingerprintMismatchError):
        load_checkpoint(tmp_path / "c.ckpt", fingerprint=other.fingerprint)


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "c.ckpt").write_bytes(b"garbage!")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.ckpt")
    save_checkpoint(Checkpoint({"w": np.ones((4, 4))}, fingerprint="f"), tmp_path / "d.ckpt")
    data = (tmp_path / "d.ckpt").read_bytes()
    (tmp_path / "e.ckpt").write_bytes(data[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "e.ckpt")


# synthetic corpus


SMALL = SynthSpec(vocab_size=10, train_samples=12, dev_samples=4)


def test_synth_deterministic():
    a, b = synthesize_dataset(SMALL), synthesize_dataset(SMALL)
    assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]


def test_synth_target_lengths_and_ids():
    train, dev, vocab = synthesize_dataset(SMALL)
    assert len(train) == 12 and len(dev) == 4 and len(vocab) == 10
    for s in train + dev:
        assert 2 <= len(s.glosses) <= 4
        assert all(1 <= g <= 10 for g in s.glosses)
        assert s.num_points == 79
        assert np.all(s.frames[..., 0] >= 0) and np.all(s.frames[..., 0] <= s.width)
        assert np.all((s.frames[..., 2] >= 0) & (s.frames[..., 2] <= 1))


def test_synth_degenerate_spec_repeats_exactly():
    spec = SynthSpec(vocab_size=2, train_samples=30, dev_samples=0, glosses_per_sample=(1, 1),
                     speed_jitter=(1.0, 1.0), noise=0.0)
    train, _, _ = synthesize_dataset(spec)
    by_gloss = {}
    for s in train:
        by_gloss.setdefault(s.glosses, []).append(s.frames)
    assert len(by_gloss) == 2
    for frames in by_gloss.values():
        assert len(frames) > 1
        for f in frames[1:]:
            assert np.array_equal(f, frames[0])


def test_synth_glosses_differ_in_every_stream():
    spec = SynthSpec(vocab_size=4, train_samples=40, dev_samples=0, glosses_per_sample=(1, 1),
                     speed_jitter=(1.0, 1.0), noise=0.0)
    train, _, _ = synthesize_dataset(spec)
    firsts = {}
    for s in train:
        firsts.setdefault(s.glosses[0], s.frames)
    keys = sorted(firsts)
    for i in keys:
        for j in keys:
            if i < j:
                a, b = firsts[i], firsts[j]
                n = min(len(a), len(b))
                for name, idx in PAPER_LAYOUT.streams().items():
                    diff = np.abs(a[:n, list(idx), :2] - b[:n, list(idx), :2]).max()
                    assert diff > 5.0, (name, i, j)


def test_synth_spec_parsing_and_validation():
    spec = parse_synth_spec("vocab_size = 5\nglosses_per_sample = 1, 3  # comment\nnoise=0.5\n")
    assert (spec.vocab_size, spec.glosses_per_sample, spec.noise) == (5, (1, 3), 0.5)
    with pytest.raises(SynthSpecError):
        parse_synth_spec("bogus = 1")
    with pytest.raises(SynthSpecError):
        SynthSpec(vocab_size=1)
    with pytest.raises(SynthSpecError):
        SynthSpec(glosses_per_sample=(3, 2))
