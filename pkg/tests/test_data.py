import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trifuse.data import (
    DataError,
    Dataset,
    FormatError,
    SchemaError,
    SyntheticConfig,
    batches,
    gen_synthetic,
    load_features,
    minmax_normalize,
    save_features,
    train_val_test_split,
)

SMALL = SyntheticConfig(n_samples=64, seq_len=4, d_t=5, d_a=4, d_v=3, seed=1)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


def test_gen_same_seed_bit_identical():
    d1, d2 = gen_synthetic(SMALL), gen_synthetic(SMALL)
    assert np.array_equal(d1.text, d2.text)
    assert np.array_equal(d1.audio, d2.audio)
    assert np.array_equal(d1.visual, d2.visual)
    assert np.array_equal(d1.labels, d2.labels)


def test_gen_label_marginal():
    cfg = SyntheticConfig(n_samples=10_000, seq_len=2, d_t=2, d_a=2, d_v=2, seed=3)
    ds = gen_synthetic(cfg)
    assert abs(float(ds.labels.mean())) < 0.1
    assert float(np.abs(ds.labels).max()) <= 3.0


def test_gen_uninformative_modality_is_pure_noise():
    # w_a = 0: an acoustic least-squares probe cannot beat predicting the
    # label mean (held-out MAE ~= E|u| = 1.5 for Uniform[-3,3]).
    cfg = SyntheticConfig(n_samples=4000, seq_len=4, d_t=4, d_a=4, d_v=2,
                          w_t=1.0, w_a=0.0, w_v=0.5, noise_std=0.0, seed=5)
    ds = gen_synthetic(cfg)
    n_train = 3000
    X = ds.audio.reshape(len(ds), -1)
    X = np.hstack([X, np.ones((len(ds), 1))])
    coef, *_ = np.linalg.lstsq(X[:n_train], ds.labels[:n_train], rcond=None)
    pred = X[n_train:] @ coef
    mae = np.mean(np.abs(pred - ds.labels[n_train:]))
    assert mae > 1.3  # cannot do much better than the ~1.5 baseline


def test_gen_informative_text_recoverable_by_linear_probe():
    cfg = SyntheticConfig(n_samples=2000, seq_len=4, d_t=6, d_a=2, d_v=2,
                          w_t=10.0, w_a=0.1, w_v=0.1, noise_std=0.0, seed=6)
    ds = gen_synthetic(cfg)
    n_train = 1500
    X = ds.text.reshape(len(ds), -1)
    X = np.hstack([X, np.ones((len(ds), 1))])
    coef, *_ = np.linalg.lstsq(X[:n_train], ds.labels[:n_train], rcond=None)
    pred = X[n_train:] @ coef
    mae = np.mean(np.abs(pred - ds.labels[n_train:]))
    assert mae < 0.1


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(w_t=0.0, w_a=0.0, w_v=0.0)
    with pytest.raises(ValueError):
        SyntheticConfig(noise_std=-1.0)
    with pytest.raises(ValueError):
        SyntheticConfig(n_samples=0)


def test_split_fractions_and_determinism():
    ds = gen_synthetic(SMALL)
    tr1, va1, te1 = train_val_test_split(ds, 0.25, 0.25, seed=7)
    tr2, va2, te2 = train_val_test_split(ds, 0.25, 0.25, seed=7)
    assert len(tr1) == 32 and len(va1) == 16 and len(te1) == 16
    assert np.array_equal(tr1.labels, tr2.labels)
    assert (tr1.split, va1.split, te1.split) == ("train", "val", "test")
    # disjoint cover
    all_labels = np.sort(np.concatenate([tr1.labels, va1.labels, te1.labels]))
    assert np.array_equal(all_labels, np.sort(ds.labels))


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def test_round_trip_write_then_load_exact(tmp_path):
    ds = gen_synthetic(SMALL)
    path = tmp_path / "feat.jsonl"
    save_features(ds, path)
    loaded = load_features(path, seq_len=SMALL.seq_len)
    assert np.array_equal(loaded.text, ds.text)
    assert np.array_equal(loaded.audio, ds.audio)
    assert np.array_equal(loaded.visual, ds.visual)
    assert np.array_equal(loaded.labels, ds.labels)
    assert np.all(loaded.mask == 1.0)


def _write_records(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def _record(length=4, d_t=3, d_a=2, d_v=2, rid=0, label=0.5):
    rng = np.random.default_rng(rid)
    return {
        "id": rid,
        "label": label,
        "text": rng.normal(size=(length, d_t)).tolist(),
        "audio": rng.normal(size=(length, d_a)).tolist(),
        "visual": rng.normal(size=(length, d_v)).tolist(),
    }


def test_load_missing_modality_names_field(tmp_path):
    rec = _record()
    del rec["audio"]
    path = tmp_path / "bad.jsonl"
    _write_records(path, [rec])
    with pytest.raises(SchemaError, match="audio"):
        load_features(path, seq_len=4)


def test_load_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    with open(path, "w") as f:
        f.write(json.dumps(_record(rid=0)) + "\n")
        f.write("{not json}\n")
    with pytest.raises(FormatError, match="line 2"):
        load_features(path, seq_len=4)


def test_load_inconsistent_dims_schema_error(tmp_path):
    path = tmp_path / "bad.jsonl"
    _write_records(path, [_record(rid=0, d_a=2), _record(rid=1, d_a=3)])
    with pytest.raises(SchemaError, match="audio"):
        load_features(path, seq_len=4)


def test_load_truncates_long_records_keeping_first_steps(tmp_path):
    rec = _record(length=10, rid=0)
    path = tmp_path / "long.jsonl"
    _write_records(path, [rec])
    ds = load_features(path, seq_len=6)
    assert ds.text.shape == (1, 6, 3)
    assert np.array_equal(ds.text[0], np.asarray(rec["text"])[:6])
    assert np.all(ds.mask[0] == 1.0)


def test_load_pads_short_records_with_mask(tmp_path):
    rec = _record(length=3, rid=0)
    path = tmp_path / "short.jsonl"
    _write_records(path, [rec])
    ds = load_features(path, seq_len=5)
    assert ds.text.shape == (1, 5, 3)
    assert np.array_equal(ds.mask[0], [1, 1, 1, 0, 0])
    assert np.all(ds.text[0, 3:] == 0.0)


def test_load_mismatched_lengths_within_record(tmp_path):
    rec = _record(length=4, rid=0)
    rec["visual"] = rec["visual"][:2]
    path = tmp_path / "bad.jsonl"
    _write_records(path, [rec])
    with pytest.raises(SchemaError, match="lengths"):
        load_features(path, seq_len=4)


def test_load_non_numeric_label(tmp_path):
    rec = _record(rid=0)
    rec["label"] = "positive"
    path = tmp_path / "bad.jsonl"
    _write_records(path, [rec])
    with pytest.raises(SchemaError, match="label"):
        load_features(path, seq_len=4)


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(SchemaError, match="no records"):
        load_features(path, seq_len=4)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def test_minmax_hand_example():
    a = np.array([2.0, 4.0, 6.0]).reshape(3, 1, 1)
    v = np.zeros((3, 1, 1))
    na, nv = minmax_normalize(a, v)
    assert np.allclose(na.reshape(-1), [0.0, 0.5, 1.0])
    assert np.all(nv == 0.0)  # constant channel maps to 0


def test_minmax_constant_channel_all_zero():
    a = np.full((2, 3, 2), 7.0)
    na, _ = minmax_normalize(a, np.zeros((2, 3, 1)))
    assert np.all(na == 0.0)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_minmax_output_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 2, 4)) * rng.uniform(0.1, 10)
    v = rng.normal(size=(3, 2, 2))
    na, nv = minmax_normalize(a, v)
    for x in (na, nv):
        assert np.all(x >= 0.0) and np.all(x <= 1.0)


def test_minmax_idempotent_on_unit_range_channels():
    rng = np.random.default_rng(8)
    a = rng.uniform(size=(4, 3, 2))
    # pin each channel's range to [0, 1]
    a[0, 0, :] = 0.0
    a[1, 0, :] = 1.0
    na, _ = minmax_normalize(a, a.copy())
    assert np.allclose(na, a)
    nna, _ = minmax_normalize(na, na.copy())
    assert np.allclose(nna, na)


def test_minmax_per_channel_not_per_tensor():
    a = np.zeros((2, 1, 2))
    a[:, 0, 0] = [0.0, 1.0]
    a[:, 0, 1] = [0.0, 100.0]  # outlier channel must not crush channel 0
    na, _ = minmax_normalize(a, a.copy())
    assert na[1, 0, 0] == 1.0
    assert na[1, 0, 1] == 1.0


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def test_batches_sizes_with_partial_tail():
    ds = gen_synthetic(SyntheticConfig(n_samples=10, seq_len=2, d_t=2, d_a=2, d_v=2, seed=0))
    bs = batches(ds, 4)
    assert [len(b) for b in bs] == [4, 4, 2]


def test_batches_same_seed_same_order():
    ds = gen_synthetic(SMALL)
    b1 = batches(ds, 8, shuffle_seed=13)
    b2 = batches(ds, 8, shuffle_seed=13)
    for x, y in zip(b1, b2):
        assert np.array_equal(x.labels, y.labels)


def test_batches_different_seeds_differ():
    ds = gen_synthetic(SMALL)
    b1 = batches(ds, 64, shuffle_seed=1)[0]
    b2 = batches(ds, 64, shuffle_seed=2)[0]
    assert not np.array_equal(b1.labels, b2.labels)


def test_batches_none_seed_preserves_order():
    ds = gen_synthetic(SMALL)
    b = batches(ds, 64)[0]
    assert np.array_equal(b.labels, ds.labels)


def test_batches_rejects_bad_batch_size():
    ds = gen_synthetic(SMALL)
    with pytest.raises(DataError):
        batches(ds, 0)
