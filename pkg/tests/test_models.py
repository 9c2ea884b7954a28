import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unlearn_lab.errors import BadLabel, DimensionMismatch, InvariantViolation, ParseError, UnsupportedVersion
from unlearn_lab.models import (MAGIC, Checkpoint, ModelSpec, accuracy, decode_checkpoint, encode_checkpoint,
                                forward, init_params, load_checkpoint, loss, predict, save_checkpoint)


def test_param_count_logistic():
    spec = ModelSpec.logistic(4, 3)
    assert spec.n_params == 15
    assert init_params(spec, 0).shape == (15,)


def test_param_count_mlp():
    assert ModelSpec.mlp(2, [5], 2).n_params == 27


def test_init_deterministic_and_bounded():
    spec = ModelSpec.mlp(6, [10], 3)
    a, b = init_params(spec, 4), init_params(spec, 4)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, init_params(spec, 5))
    W1 = a[:60]
    assert np.abs(W1).max() <= math.sqrt(6 / 16)
    np.testing.assert_array_equal(a[60:70], 0.0)


@pytest.mark.parametrize("kwargs", [
    dict(kind="logistic", input_dim=2, classes=1),
    dict(kind="logistic", input_dim=2, classes=2, hidden=(3,)),
    dict(kind="mlp", input_dim=2, classes=2, hidden=()),
    dict(kind="mlp", input_dim=2, classes=2, hidden=(3,), activation="gelu"),
    dict(kind="svm", input_dim=2, classes=2),
    dict(kind="logistic", input_dim=2, classes=2, l2=-1.0),
])
def test_spec_invariants(kwargs):
    with pytest.raises(InvariantViolation):
        ModelSpec(**kwargs)


def test_forward_zero_params_uniform():
    spec = ModelSpec.logistic(5, 4)
    np.testing.assert_allclose(forward(spec, np.zeros(spec.n_params), np.ones(5)), np.full(4, 0.25))


def test_forward_matches_hand_softmax_seed1():
    # softmax(Wx + b) worked out by hand from the seed-1 Glorot draw
    spec = ModelSpec.logistic(3, 3)
    p = forward(spec, init_params(spec, 1), np.array([0.5, -1.0, 2.0]))
    np.testing.assert_allclose(p, [0.02600602348955123, 0.4410189477503765, 0.5329750287600723], rtol=1e-12)


def test_forward_dimension_mismatch():
    spec = ModelSpec.logistic(3, 2)
    with pytest.raises(DimensionMismatch):
        forward(spec, np.zeros(spec.n_params), np.ones(4))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), scale=st.floats(0.1, 50))
def test_forward_normalized(seed, scale):
    r = np.random.default_rng(seed)
    spec = ModelSpec.mlp(3, [6], 4, "relu")
    p = forward(spec, scale * r.standard_normal(spec.n_params), scale * r.standard_normal((5, 3)))
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all((p >= 0) & (p <= 1))


def test_loss_zero_params_is_log_classes():
    spec = ModelSpec.logistic(3, 5)
    X = np.random.default_rng(0).standard_normal((7, 3))
    assert loss(spec, np.zeros(spec.n_params), X, [0, 1, 2, 3, 4, 0, 1]) == pytest.approx(math.log(5), rel=1e-14)


def test_loss_certain_prediction_leaves_only_l2():
    spec = ModelSpec.logistic(2, 2, l2=0.1)
    theta = np.zeros(spec.n_params)
    theta[4] = 1000.0  # bias of class 0
    assert loss(spec, theta, [[0.0, 0.0]], [0]) == pytest.approx(0.5 * 0.1 * 1000.0 ** 2, rel=1e-15)


def test_loss_bad_label():
    spec = ModelSpec.logistic(2, 2)
    with pytest.raises(BadLabel):
        loss(spec, np.zeros(spec.n_params), [[0.0, 1.0]], [2])


def test_predict_and_accuracy():
    spec = ModelSpec.logistic(1, 2)
    theta = np.array([-1.0, 1.0, 0.0, 0.0])
    X = np.array([[2.0], [-2.0], [3.0]])
    np.testing.assert_array_equal(predict(spec, theta, X), [1, 0, 1])
    assert accuracy(spec, theta, X, [1, 0, 0]) == pytest.approx(2 / 3)


# ---------------------------------------------------------------------------
# checkpoints


def _ckpt(seed=0):
    spec = ModelSpec.mlp(3, [4, 2], 3, "tanh", 1e-3)
    return Checkpoint(spec, init_params(spec, seed) + 1e-300, {"seed": seed, "epochs": 12, "alpha": 0.05})


def test_checkpoint_round_trip_bit_exact(tmp_path):
    spec = ModelSpec.logistic(4, 3, 1e-2)
    ck = Checkpoint(spec, init_params(spec, 0), {"seed": 0, "epochs": 5})
    save_checkpoint(ck, tmp_path / "a.ulck")
    back = load_checkpoint(tmp_path / "a.ulck")
    assert back == ck
    assert back.params.tobytes() == ck.params.tobytes()


def test_checkpoint_truncated():
    data = encode_checkpoint(_ckpt())
    for cut in (3, 8, 20, len(data) - 5, len(data) - 1):
        with pytest.raises(ParseError):
            decode_checkpoint(data[:cut])


def test_checkpoint_bad_magic():
    data = encode_checkpoint(_ckpt())
    with pytest.raises(ParseError):
        decode_checkpoint(b"XXXX" + data[4:])


def test_checkpoint_unsupported_version():
    data = encode_checkpoint(_ckpt())
    with pytest.raises(UnsupportedVersion):
        decode_checkpoint(MAGIC + struct.pack("<H", 2) + data[6:])


def test_checkpoint_crc_mismatch():
    data = bytearray(encode_checkpoint(_ckpt()))
    data[-12] ^= 0xFF
    with pytest.raises(ParseError, match="checksum"):
        decode_checkpoint(bytes(data))


def test_checkpoint_param_length_mismatch():
    ck = _ckpt()
    data = encode_checkpoint(ck)
    body = data[6:-4]
    n = ck.params.size
    count_at = len(body) - 8 * n - 8
    assert struct.unpack("<Q", body[count_at:count_at + 8])[0] == n
    short = body[:count_at] + struct.pack("<Q", n - 1) + body[count_at + 8:-8]
    forged = data[:6] + short + struct.pack("<I", zlib.crc32(short))
    with pytest.raises(InvariantViolation):
        decode_checkpoint(forged)


def test_checkpoint_params_read_only():
    ck = _ckpt()
    with pytest.raises(ValueError):
        ck.params[0] = 1.0


def test_checkpoint_rejects_wrong_length():
    spec = ModelSpec.logistic(2, 2)
    with pytest.raises(InvariantViolation):
        Checkpoint(spec, np.zeros(spec.n_params + 1))


@settings(max_examples=30, deadline=None)
@given(values=st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=6, max_size=6),
       seed=st.integers(0, 10 ** 6))
def test_checkpoint_round_trip_property(values, seed):
    spec = ModelSpec.logistic(2, 2, 0.5)
    ck = Checkpoint(spec, values, {"seed": seed, "note": "x"})
    assert decode_checkpoint(encode_checkpoint(ck)) == ck
