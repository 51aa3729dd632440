import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sltrans import data
from sltrans.data import (BadHeader, BadMagic, DataError, DuplicateId, EmptyDataset, Example,
                          ManifestRecord, MissingFile, NonFiniteValue, SyntheticSpec, TruncatedFile,
                          collate, generate_synthetic, load_examples, make_batches, parse_manifest,
                          read_features, read_prototypes, verify_manifest, write_features,
                          write_manifest)
from sltrans.model import ModelConfig, build_model
from sltrans.textproc import BOS_ID, EOS_ID, PAD_ID
from sltrans.training import batch_loss


@settings(max_examples=40)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_features_round_trip(tmp_path_factory, frames):
    p = tmp_path_factory.mktemp("f") / "x.sltf"
    write_features(p, frames)
    back = read_features(p)
    assert back.dtype == np.float32
    assert back.tobytes() == frames.tobytes()
    assert data.read_features_header(p) == frames.shape


def test_features_layout(tmp_path):
    p = tmp_path / "x.sltf"
    write_features(p, np.array([[1.0, 2.0]], dtype=np.float32))
    raw = p.read_bytes()
    assert raw[:4] == b"SLTF"
    assert raw[4:16] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[16:], "<f4").tolist() == [1.0, 2.0]


def test_feature_errors(tmp_path):
    p = tmp_path / "x.sltf"
    write_features(p, np.ones((3, 2)))
    raw = p.read_bytes()
    (tmp_path / "magic.sltf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        read_features(tmp_path / "magic.sltf")
    (tmp_path / "short.sltf").write_bytes(raw[:-4])
    with pytest.raises(TruncatedFile):
        read_features(tmp_path / "short.sltf")
    with pytest.raises(TruncatedFile):
        data.read_features_header(tmp_path / "short.sltf")
    write_features(tmp_path / "nan.sltf", np.array([[np.nan]]))
    with pytest.raises(NonFiniteValue):
        read_features(tmp_path / "nan.sltf")
    with pytest.raises(MissingFile):
        read_features(tmp_path / "absent.sltf")


def test_convert_text_matrix(tmp_path):
    (tmp_path / "m.txt").write_text("1 2 3\n4 5 6\n")
    assert tuple(data.convert_text_matrix(tmp_path / "m.txt", tmp_path / "m.sltf")) == (2, 3)
    assert read_features(tmp_path / "m.sltf").tolist() == [[1, 2, 3], [4, 5, 6]]


HEADER = "id\tfeatures\tn_frames\ttranslation\n"


def test_manifest_cases(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text(HEADER)
    assert parse_manifest(p) == []
    p.write_text(HEADER + "a\tf.sltf\t3\thi\na\tg.sltf\t2\tho\n")
    with pytest.raises(DuplicateId):
        parse_manifest(p)
    p.write_text("id\tfeatures\ttranslation\n")
    with pytest.raises(BadHeader):
        parse_manifest(p)
    p.write_text(HEADER + "a\tf.sltf\thi\n")
    with pytest.raises(BadHeader):
        parse_manifest(p)
    # a missing feature file is only noticed at load time
    p.write_text(HEADER + "a\tnope.sltf\t3\thi\n")
    assert len(parse_manifest(p)) == 1
    with pytest.raises(MissingFile):
        load_examples(p)


text_field = st.text(alphabet=st.characters(blacklist_characters="\t\n\r", blacklist_categories=("Cs",)),
                     min_size=1, max_size=20)


@settings(max_examples=40)
@given(st.lists(st.tuples(text_field, st.integers(1, 500), text_field), max_size=8,
                unique_by=lambda r: r[0]))
def test_manifest_round_trip(tmp_path_factory, rows):
    records = [ManifestRecord(rid, f"features/{i}.sltf", n, text) for i, (rid, n, text) in enumerate(rows)]
    p = tmp_path_factory.mktemp("m") / "m.tsv"
    write_manifest(p, records)
    assert parse_manifest(p) == records


def test_manifest_rejects_tabs(tmp_path):
    with pytest.raises(DataError):
        write_manifest(tmp_path / "m.tsv", [ManifestRecord("a", "f", 1, "x\ty")])


def test_verify_manifest_checks_frames(tmp_path):
    write_features(tmp_path / "a.sltf", np.ones((3, 4)))
    write_manifest(tmp_path / "m.tsv", [ManifestRecord("a", "a.sltf", 3, "hi")])
    assert verify_manifest(tmp_path / "m.tsv") == 4
    write_manifest(tmp_path / "m.tsv", [ManifestRecord("a", "a.sltf", 5, "hi")])
    with pytest.raises(DataError):
        verify_manifest(tmp_path / "m.tsv")


def test_load_examples_truncates_with_warning(tmp_path, caplog):
    write_features(tmp_path / "a.sltf", np.arange(12, dtype=np.float32).reshape(6, 2))
    write_manifest(tmp_path / "m.tsv", [ManifestRecord("a", "a.sltf", 6, "hi")])
    with caplog.at_level(logging.WARNING):
        ex = load_examples(tmp_path / "m.tsv", max_frames=4)
    assert ex[0].features.shape == (4, 2)
    assert "truncating" in caplog.text


def make_examples(lengths, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return [Example(f"e{i}", rng.normal(size=(n, d)).astype(np.float32),
                    list(rng.integers(3, 9, size=1 + i % 4)), "x") for i, n in enumerate(lengths)]


def test_single_record_batch():
    batches = make_batches(make_examples([4]), 32, seed=1, epoch=0)
    assert len(batches) == 1 and len(batches[0]) == 1
    with pytest.raises(EmptyDataset):
        make_batches([], 32, 1, 0)


def test_collate_layout():
    ex = make_examples([2, 4])
    b = collate(ex)
    assert b.src.shape == (2, 4, 3)
    assert b.src_mask.tolist() == [[True, True, False, False], [True] * 4]
    assert np.all(b.src[0, 2:] == 0)
    for i, e in enumerate(ex):
        row = b.target[i].tolist()
        n = len(e.tokens)
        assert row[:n + 2] == [BOS_ID] + list(e.tokens) + [EOS_ID]
        assert all(t == PAD_ID for t in row[n + 2:])
    assert np.array_equal(b.target_mask, b.target != PAD_ID)
    assert np.array_equal(b.prev_tokens, b.target[:, :-1]) and np.array_equal(b.gold, b.target[:, 1:])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=120), st.integers(1, 16), st.integers(0, 5),
       st.integers(0, 3))
def test_batches_partition_epoch(lengths, bs, seed, epoch):
    ex = make_examples(lengths)
    batches = make_batches(ex, bs, seed, epoch)
    ids = [i for b in batches for i in b.ids]
    assert Counter(ids) == Counter(e.id for e in ex)
    assert all(len(b) == bs for b in batches[:-1]) and 1 <= len(batches[-1]) <= bs
    other = make_batches(ex, bs, seed + 1, epoch)
    assert Counter(i for b in other for i in b.ids) == Counter(ids)
    again = make_batches(ex, bs, seed, epoch)
    assert [b.ids for b in again] == [b.ids for b in batches]


def test_bucketing_limits_padding():
    ex = make_examples(list(np.random.default_rng(0).integers(1, 60, size=640)))
    batches = make_batches(ex, 32, seed=0, epoch=0)
    padded = sum(b.src.shape[0] * b.src.shape[1] for b in batches)
    real = sum(e.features.shape[0] for e in ex)
    assert padded < 1.3 * real


def test_batched_loss_equals_unbatched_sum():
    ex = make_examples([2, 5, 3, 7])
    cfg = ModelConfig(encoder_layers=1, decoder_layers=1, embed_dim=8, ffn_dim=16, attention_heads=2,
                      feature_dim=3, vocab_size=10, dropout=0.0)
    m = build_model(cfg, seed=0)
    batch = collate(ex)
    n_tok = int(batch.target_mask[:, 1:].sum())
    singles = [collate([e]) for e in ex]
    total = sum(float(batch_loss(m, b, 0.1).data) * int(b.target_mask[:, 1:].sum()) for b in singles)
    assert float(batch_loss(m, batch, 0.1).data) * n_tok == pytest.approx(total, abs=1e-5 * n_tok)


SMALL = SyntheticSpec(n_symbols=6, frames_per_symbol=2, feature_dim=5, noise_sigma=0.1, min_len=1,
                      max_len=3, n_train=100, n_val=10, n_test=10, seed=3)


def test_synthetic_layout(tmp_path):
    paths = generate_synthetic(SMALL, tmp_path)
    assert set(paths) == {"train", "valid", "test"}
    recs = parse_manifest(paths["train"])
    assert len(recs) == 100
    for r in recs:
        words = r.translation.split()
        assert SMALL.min_len <= len(words) <= SMALL.max_len
        assert r.n_frames == len(words) * SMALL.frames_per_symbol
        assert read_features(tmp_path / r.feature_path).shape == (r.n_frames, SMALL.feature_dim)
        assert r.translation[0] == "W" and r.translation[1:] == r.translation.lower()[1:]
    ids = [r.id for s in paths.values() for r in parse_manifest(s)]
    assert len(ids) == len(set(ids)) == 120
    assert verify_manifest(paths["valid"]) == SMALL.feature_dim


def test_synthetic_is_deterministic(tmp_path):
    generate_synthetic(SMALL, tmp_path / "a")
    generate_synthetic(SMALL, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_noiseless_repeats_are_identical(tmp_path):
    spec = SyntheticSpec(**{**SMALL.__dict__, "noise_sigma": 0.0, "n_symbols": 2, "max_len": 1})
    paths = generate_synthetic(spec, tmp_path)
    by_text = {}
    for r in parse_manifest(paths["train"]):
        by_text.setdefault(r.translation, []).append(r)
    group = next(g for g in by_text.values() if len(g) >= 2)
    assert (tmp_path / group[0].feature_path).read_bytes() == (tmp_path / group[1].feature_path).read_bytes()


@pytest.mark.parametrize("sigma", [0.0, 0.1])
def test_nearest_prototype_recovers_symbols(tmp_path, sigma):
    spec = SyntheticSpec(**{**SMALL.__dict__, "noise_sigma": sigma, "n_symbols": 40, "feature_dim": 16,
                            "frames_per_symbol": 4, "max_len": 8})
    paths = generate_synthetic(spec, tmp_path)
    protos = read_prototypes(tmp_path, spec).reshape(spec.n_symbols, -1)
    for r in parse_manifest(paths["test"]):
        frames = read_features(tmp_path / r.feature_path).reshape(-1, spec.frames_per_symbol * spec.feature_dim)
        dist = ((frames[:, None, :] - protos[None]) ** 2).sum(-1)
        guess = data.synthetic_sentence(dist.argmin(axis=1))
        assert guess == r.translation


def test_synthetic_spec_validation():
    with pytest.raises(DataError):
        SyntheticSpec(min_len=5, max_len=3).validate()
    with pytest.raises(DataError):
        SyntheticSpec(n_symbols=0).validate()
    with pytest.raises(DataError):
        SyntheticSpec(noise_sigma=-1).validate()
