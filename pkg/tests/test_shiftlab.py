import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chi2_uniform
from ttabench.numcore import make_rng
from ttabench.shiftlab import (
    DomainSpec,
    LabeledBatch,
    ShiftTransform,
    StreamSpec,
    corrupt_labels,
    derive_target,
    make_stream,
    random_domain,
    read_csv,
    sample_domain,
    to_csv,
    write_csv,
)
from ttabench.similarity import MmdConfig, median_bandwidth, similarity_score

# chi-square critical value, 6 degrees of freedom, alpha = 0.001
CHI2_6_999 = 22.458


def test_domain_spec_invariants():
    with pytest.raises(ValueError):
        DomainSpec("d", np.zeros((2, 3)))  # repeated means
    with pytest.raises(ValueError):
        DomainSpec("d", np.eye(2), label_noise=1.0)
    with pytest.raises(ValueError):
        DomainSpec("d", np.eye(2), cov_scale=0.0)


def test_clean_domain_has_no_label_mismatch():
    spec = random_domain("s", seed=1)
    b = sample_domain(spec, 500, make_rng(0))
    assert np.array_equal(b.y, b.y_true)


def test_noise_rate_concentrates():
    spec = random_domain("s", label_noise=0.5, seed=1)
    b = sample_domain(spec, 10_000, make_rng(0))
    assert abs(np.mean(b.y != b.y_true) - 0.5) <= 0.02


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.floats(0.3, 0.99), st.integers(0, 1000))
def test_corruption_never_maps_label_to_itself(C, rate, seed):
    # a self-map would show up as a changed fraction of rate * (C - 1) / C instead of rate
    rng = make_rng(seed)
    y = rng.integers(0, C, 20_000)
    z = corrupt_labels(y, C, rate, rng)
    assert np.all((z >= 0) & (z < C))
    assert abs(np.mean(z != y) - rate) < 0.02


def test_zero_rate_changes_nothing():
    y = np.arange(10) % 3
    assert np.array_equal(corrupt_labels(y, 3, 0.0, make_rng(0)), y)


def test_sampling_is_deterministic():
    spec = random_domain("s", label_noise=0.2, seed=1)
    a = sample_domain(spec, 200, make_rng(3))
    b = sample_domain(spec, 200, make_rng(3))
    assert a.X.tobytes() == b.X.tobytes() and np.array_equal(a.y, b.y)


def test_identity_transform_keeps_spec():
    src = random_domain("s", label_noise=0.1, seed=2)
    t = ShiftTransform(np.zeros(src.dim))
    assert derive_target(src, t, 0.1) == src


def test_derive_target_is_pure_and_affine():
    src = random_domain("s", seed=2)
    t = ShiftTransform.from_magnitude(src.dim, 2.0, angle=0.3, scale=1.5, seed=4)
    a, b = derive_target(src, t, 0.2), derive_target(src, t, 0.2)
    assert a == b
    R = t.rotation(src.dim)
    np.testing.assert_allclose(R @ R.T, np.eye(src.dim), atol=1e-15)
    np.testing.assert_allclose(a.means, src.means @ R.T * 1.5 + t.offset, atol=1e-12)
    assert abs(np.linalg.norm(t.offset) - 2.0) < 1e-12
    with pytest.raises(ValueError):
        derive_target(src, ShiftTransform(np.zeros(3)), 0.0)


def _S_raw(a, b, sigma, n=2000, seed=0):
    Xa = sample_domain(a, n, make_rng(seed, 1)).X
    Xb = sample_domain(b, n, make_rng(seed, 2)).X
    return similarity_score(Xa, Xb, MmdConfig(bandwidth=sigma, max_samples=n)).S


def test_similarity_decreases_with_offset():
    src = random_domain("s", separation=1.0, seed=5)
    X = sample_domain(src, 2000, make_rng(0, 1)).X
    sigma = median_bandwidth(X)
    S = [_S_raw(src, derive_target(src, ShiftTransform.from_magnitude(src.dim, off, seed=1), 0.0),
                sigma) for off in (0, 1, 2, 3, 5)]
    assert all(a > b for a, b in zip(S, S[1:]))


def test_label_noise_alone_leaves_similarity_near_one():
    src = random_domain("s", separation=1.0, seed=5)
    noisy = derive_target(src, ShiftTransform(np.zeros(src.dim)), 0.3)
    X = sample_domain(src, 2000, make_rng(0, 1)).X
    assert _S_raw(src, noisy, median_bandwidth(X)) >= 0.98


def test_iid_stream_batches_are_uniform():
    spec = random_domain("s", seed=1)
    data = sample_domain(spec, 1600, make_rng(0), class_weights=np.full(7, 1 / 7))
    stream = make_stream(data, StreamSpec(order="correlated", run_length=1, batch_size=16),
                         make_rng(1))[:100]
    counts = np.bincount(np.concatenate([b.y_true for b in stream]), minlength=7)
    assert chi2_uniform(counts) < CHI2_6_999


def test_correlated_stream_runs():
    spec = random_domain("s", seed=1)
    data = sample_domain(spec, 700, make_rng(0))
    full = make_stream(data, StreamSpec(order="correlated", run_length=700, batch_size=700),
                       make_rng(1))
    labels = full[0].y_true
    # run length >= stream length: every class forms one contiguous block
    changes = np.count_nonzero(np.diff(labels))
    assert changes == len(np.unique(labels)) - 1
    stream = make_stream(data, StreamSpec(order="correlated", run_length=50), make_rng(1))
    y = np.concatenate([b.y_true for b in stream])
    runs = np.diff(np.flatnonzero(np.diff(np.r_[-1, y, -1]) != 0))
    assert runs.max() <= 50 and np.median(runs) == 50


def test_stream_batches_and_ragged_tail():
    spec = random_domain("s", seed=1)
    data = sample_domain(spec, 100, make_rng(0))
    stream = make_stream(data, StreamSpec(batch_size=16), make_rng(2))
    assert [len(b) for b in stream] == [16] * 6 + [4]
    again = make_stream(data, StreamSpec(batch_size=16), make_rng(2))
    assert all(a.X.tobytes() == b.X.tobytes() for a, b in zip(stream, again))
    assert sorted(np.concatenate([b.y for b in stream])) == sorted(data.y)


def test_stream_errors():
    with pytest.raises(ValueError):
        StreamSpec(run_length=0)
    with pytest.raises(ValueError):
        StreamSpec(order="bursty")
    empty = LabeledBatch(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, int))
    with pytest.raises(ValueError):
        make_stream(empty, StreamSpec(), make_rng(0))


def test_class_weights_shape_the_stream():
    spec = random_domain("s", n_classes=3, seed=1)
    data = sample_domain(spec, 3000, make_rng(0))
    w = (0.7, 0.2, 0.1)
    stream = make_stream(data, StreamSpec(class_weights=w, length=2000), make_rng(1))
    freq = np.bincount(np.concatenate([b.y_true for b in stream]), minlength=3) / 2000
    np.testing.assert_allclose(freq, w, atol=0.03)


def test_csv_roundtrip(tmp_path):
    spec = random_domain("dom", label_noise=0.3, seed=1)
    data = sample_domain(spec, 50, make_rng(0))
    path = tmp_path / "d.csv"
    write_csv(data, path)
    back = read_csv(path)
    assert back.X.tobytes() == data.X.tobytes()
    assert np.array_equal(back.y, data.y) and np.array_equal(back.y_true, data.y_true)
    assert back.domain == "dom"
    assert to_csv(data).splitlines()[0].endswith("observed_label,true_label,domain")
