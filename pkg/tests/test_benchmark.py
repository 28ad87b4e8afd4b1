import numpy as np
import pytest
from scipy import stats

from varenc.benchmark import (
    SOURCE,
    TARGET,
    TEST,
    TRAIN,
    AugmentError,
    BenchConfig,
    DatasetFormatError,
    Example,
    gen_benchmark,
    paper_scale_config,
    read_dataset,
    speed_augment,
    temporal_pad_augment,
    with_seed,
    write_dataset,
)
from varenc.nn import ConfigError


def small_cfg(**kw):
    base = dict(n_classes=5, content_len=8, n_dims=4, max_len=12,
                n_source_per_class=6, k_target_train=1,
                n_target_test_per_class=4, seed=0)
    base.update(kw)
    return BenchConfig(**base)


def ramp_example(n_frames=16, n_dims=3, max_len=24):
    t = np.arange(1, n_frames + 1, dtype=np.float64)[:, None]
    slopes = np.array([[1.0, -0.5, 2.0]])
    features = np.zeros((max_len, n_dims))
    features[:n_frames] = t * slopes
    return Example(features, label=0, domain=TARGET, content_len=n_frames,
                   split=TRAIN)


def test_config_validation():
    with pytest.raises(ConfigError):
        BenchConfig(k_target_train=5, n_source_per_class=2)
    with pytest.raises(ConfigError):
        BenchConfig(domain_gap=-0.1)
    with pytest.raises(ConfigError):
        BenchConfig(max_len=10, content_len=16)


def test_generation_counts_and_tags():
    cfg = small_cfg()
    ds = gen_benchmark(cfg)
    per_class = cfg.n_source_per_class + cfg.k_target_train + cfg.n_target_test_per_class
    assert len(ds.examples) == cfg.n_classes * per_class
    for c in range(cfg.n_classes):
        assert sum(1 for e in ds.select(domain=SOURCE) if e.label == c) == 6
        tgt_train = [e for e in ds.select(domain=TARGET, split=TRAIN) if e.label == c]
        assert len(tgt_train) == 1
        tgt_test = [e for e in ds.select(domain=TARGET, split=TEST) if e.label == c]
        assert len(tgt_test) == 4
    for ex in ds.examples:
        assert np.all(np.isfinite(ex.features))
        assert ex.features.shape == (cfg.max_len, cfg.n_dims)
        assert np.all(ex.features[ex.content_len:] == 0.0)


def test_generation_bitwise_deterministic():
    a = gen_benchmark(small_cfg())
    b = gen_benchmark(small_cfg())
    for ea, eb in zip(a.examples, b.examples):
        assert np.array_equal(ea.features, eb.features)
        assert (ea.label, ea.domain, ea.split) == (eb.label, eb.domain, eb.split)


def test_zero_gap_zero_jitter_zero_noise_degenerates():
    cfg = small_cfg(domain_gap=0.0, style_jitter=0.0, noise_sigma=0.0)
    ds = gen_benchmark(cfg)
    for c in range(cfg.n_classes):
        src = [e.features for e in ds.select(domain=SOURCE) if e.label == c]
        tgt = [e.features for e in ds.select(domain=TARGET) if e.label == c]
        for f in src + tgt:
            np.testing.assert_allclose(f, src[0], atol=1e-12)


def test_oracle_gap_recorded_on_default_config():
    ds = gen_benchmark(BenchConfig())
    assert ds.oracle_accuracy[SOURCE] > 95.0
    assert ds.oracle_accuracy[TARGET] < ds.oracle_accuracy[SOURCE]


def test_different_seed_changes_data():
    a = gen_benchmark(small_cfg())
    b = gen_benchmark(with_seed(small_cfg(), 1))
    assert not np.array_equal(a.examples[0].features, b.examples[0].features)


def test_speed_identity():
    ex = ramp_example()
    out = speed_augment(ex, 1.0)
    np.testing.assert_array_equal(out.features, ex.features)
    assert out.content_len == ex.content_len
    assert (out.label, out.domain, out.split) == (ex.label, ex.domain, ex.split)


def test_speed_halves_frames():
    ex = ramp_example(n_frames=8)
    out = speed_augment(ex, 2.0)
    assert out.content_len == 4
    base = np.arange(8, dtype=np.float64)
    pos = np.arange(4) * 7.0 / 3.0
    expect = np.interp(pos, base, ex.features[:8, 0])
    np.testing.assert_allclose(out.features[:4, 0], expect)


def test_speed_round_trip_on_ramp():
    ex = ramp_example()
    fast = speed_augment(ex, 1.2)
    back = speed_augment(fast, 1.0 / 1.2)
    assert back.content_len == ex.content_len
    np.testing.assert_allclose(back.features[:16], ex.features[:16], atol=1e-6)


def test_speed_errors():
    ex = ramp_example(n_frames=4, max_len=6)
    with pytest.raises(AugmentError):
        speed_augment(ex, 100.0)
    with pytest.raises(AugmentError):
        speed_augment(ex, 0.3)  # needs 13 frames, max_len is 6


def test_pad_zero_is_plain_padding():
    ex = ramp_example()
    out = temporal_pad_augment(ex, np.random.default_rng(0), max_len=24, pad_max=0)
    np.testing.assert_array_equal(out.features, ex.features)


def test_pad_places_content_contiguously():
    ex = ramp_example()
    rng = np.random.default_rng(3)
    for _ in range(50):
        out = temporal_pad_augment(ex, rng, max_len=24, pad_max=4)
        nz = np.nonzero(np.any(out.features != 0.0, axis=1))[0]
        head = nz[0] if len(nz) else 0
        assert 0 <= head <= 4
        np.testing.assert_array_equal(out.features[head:head + 16],
                                      ex.features[:16])
        assert out.content_len == ex.content_len


def test_pad_precondition():
    ex = ramp_example(n_frames=20, max_len=24)
    with pytest.raises(AugmentError):
        temporal_pad_augment(ex, np.random.default_rng(0), max_len=24, pad_max=4)


def test_pad_head_counts_uniform_chi_square():
    ex = ramp_example()
    rng = np.random.default_rng(11)
    pad_max = 4
    counts = np.zeros(pad_max + 1)
    for _ in range(10_000):
        out = temporal_pad_augment(ex, rng, max_len=24, pad_max=pad_max)
        nz = np.nonzero(np.any(out.features != 0.0, axis=1))[0]
        counts[nz[0]] += 1
    chi2, p = stats.chisquare(counts)
    assert p > 0.01


def test_dataset_round_trip(tmp_path):
    ds = gen_benchmark(small_cfg())
    path = tmp_path / "bench.txt"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert (back.n_classes, back.content_len, back.n_dims, back.max_len) == (
        ds.n_classes, ds.content_len, ds.n_dims, ds.max_len)
    assert len(back.examples) == len(ds.examples)
    for a, b in zip(ds.examples, back.examples):
        assert np.array_equal(a.features, b.features)
        assert (a.label, a.domain, a.split, a.content_len) == (
            b.label, b.domain, b.split, b.content_len)


def test_row_count_matches_config(tmp_path):
    cfg = small_cfg()
    ds = gen_benchmark(cfg)
    path = tmp_path / "bench.txt"
    write_dataset(ds, path)
    n_lines = len(path.read_text().strip().split("\n"))
    per_class = cfg.n_source_per_class + cfg.k_target_train + cfg.n_target_test_per_class
    assert n_lines == 1 + cfg.n_classes * per_class


def test_truncated_file_is_parse_error(tmp_path):
    ds = gen_benchmark(small_cfg())
    path = tmp_path / "bench.txt"
    write_dataset(ds, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(DatasetFormatError):
        read_dataset(path)


def test_malformed_lines_name_position(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("5 8 4 12 1 1\n0 source train abc 1.0\n")
    with pytest.raises(DatasetFormatError, match=":2"):
        read_dataset(path)
    path.write_text("not a header\n")
    with pytest.raises(DatasetFormatError, match=":1"):
        read_dataset(path)


def test_paper_scale_preset_fits_padding():
    cfg = paper_scale_config()
    assert cfg.max_len == 85 and cfg.pad_max == 20
    assert cfg.content_len + 2 * cfg.pad_max <= cfg.max_len
