import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dittofl.core import (
    DimensionError,
    Device,
    DivergenceError,
    LocalDataset,
    RoundUpdate,
    derive_rng,
    derive_stream,
    vec_axpy,
)


def test_vec_axpy_examples():
    np.testing.assert_array_equal(vec_axpy(0, [1, 2], [3, 4]), [3, 4])
    np.testing.assert_array_equal(vec_axpy(1, [1, 2], [0, 0]), [1, 2])
    np.testing.assert_array_equal(vec_axpy(2, [1, -1], [1, 1]), [3, -1])


def test_vec_axpy_dimension_mismatch():
    with pytest.raises(DimensionError):
        vec_axpy(1.0, [1, 2], [1, 2, 3])


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 1000).flatmap(lambda d: st.tuples(
    finite, arrays(np.float64, d, elements=finite), arrays(np.float64, d, elements=finite))))
def test_vec_axpy_linear(args):
    a, x, y = args
    out = vec_axpy(a, x, y)
    np.testing.assert_allclose(out, a * x + y, rtol=1e-12, atol=1e-12 * (1 + abs(a)) * 1e6)


def test_stream_determinism_and_separation():
    a = derive_rng(42, "local", 3, 7).standard_normal(100)
    b = derive_rng(42, "local", 3, 7).standard_normal(100)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, derive_rng(42, "local", 3, 8).standard_normal(100))
    assert not np.array_equal(a, derive_rng(43, "local", 3, 7).standard_normal(100))
    assert not np.array_equal(a, derive_rng(42, "personal", 3, 7).standard_normal(100))
    assert not np.array_equal(a, derive_rng(42, "local", 4, 7).standard_normal(100))


def test_stream_object_matches_shortcut():
    s = derive_stream(5, "select", 2, 0)
    np.testing.assert_array_equal(s.generator().random(5), derive_rng(5, "select", 2, 0).random(5))
    assert s.child_seed() == derive_stream(5, "select", 2, 0).child_seed()


def test_streams_look_independent():
    # correlation between neighbouring device streams is at noise level
    a = derive_rng(1, "x", 0, 0).standard_normal(20000)
    b = derive_rng(1, "x", 0, 1).standard_normal(20000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(20000)


def test_negative_path_rejected():
    with pytest.raises(ValueError):
        derive_rng(1, "x", -1, 0)


def test_dataset_readonly_and_shapes():
    ds = LocalDataset(np.ones((3, 2)), np.zeros(3))
    assert len(ds) == 3 and ds.dim == 2
    with pytest.raises(ValueError):
        ds.features[0, 0] = 5.0
    with pytest.raises(DimensionError):
        LocalDataset(np.ones((3, 2)), np.zeros(4))
    assert len(LocalDataset.empty(4)) == 0


def test_device_byzantine_flag_is_immutable():
    ds = LocalDataset(np.ones((2, 1)), np.zeros(2))
    dev = Device(0, ds, LocalDataset.empty(1), LocalDataset.empty(1), byzantine=True)
    with pytest.raises(AttributeError):
        dev.byzantine = False
    assert dev.replace_train(ds).byzantine is True


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)))
def test_round_update_norm(delta):
    up = RoundUpdate(0, delta, 0.0)
    assert abs(up.norm - np.linalg.norm(delta)) <= 1e-12 * max(1.0, np.linalg.norm(delta))


def test_round_update_rejects_negative_loss():
    with pytest.raises(ValueError):
        RoundUpdate(0, [1.0], -0.5)


def test_divergence_error_message():
    err = DivergenceError(4, 2, "update")
    assert "round 4" in str(err) and "device 2" in str(err)
