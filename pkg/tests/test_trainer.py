import math
import struct
import zlib

import numpy as np
import pytest

from cbsmseg.augment import SamplePair
from cbsmseg.dataset import SynthConfig, generate_synthetic, split_pairs
from cbsmseg.tensor import GeometryError, Tensor
from cbsmseg.trainer import (
    LOG_COLUMNS,
    Adam,
    AdamState,
    BadMagicError,
    ChecksumError,
    TrainConfig,
    UnsupportedVersionError,
    adam_step,
    bce_loss,
    checkpoint_bytes,
    compute_loss,
    load_checkpoint,
    model_from_bytes,
    read_log,
    save_checkpoint,
    soft_dice_loss,
    train,
)
from cbsmseg.unet import UNetConfig, build_model
from oracles import gradcheck


def _probs(rng, shape):
    return rng.uniform(0.05, 0.95, shape)


def test_bce_at_half_is_ln2(rng):
    y = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
    assert bce_loss(Tensor(np.full(y.shape, 0.5)), y).data.item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_near_zero_on_clamped_target(rng):
    y = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    assert bce_loss(Tensor(y), y).data.item() <= 1e-6 * abs(math.log(1e-7))


def test_bce_non_negative_and_shape_check(rng):
    for _ in range(20):
        p = rng.random((1, 1, 3, 3))
        assert bce_loss(Tensor(p), rng.random((1, 1, 3, 3)) > 0.5).data.item() >= 0
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), np.zeros((1, 1, 2, 3)))


def test_soft_dice_values(rng):
    y = (rng.random((2, 1, 5, 5)) > 0.5).astype(float)
    assert soft_dice_loss(Tensor(y), y).data.item() == pytest.approx(0.0, abs=1e-15)
    assert soft_dice_loss(Tensor(1 - y), y).data.item() > 0.95
    p = rng.random(y.shape)
    num = den = 0.0
    for idx in np.ndindex(y.shape):
        num += p[idx] * y[idx]
        den += p[idx] + y[idx]
    assert soft_dice_loss(Tensor(p), y).data.item() == pytest.approx(1 - (2 * num + 1) / (den + 1), abs=1e-12)


@pytest.mark.parametrize("kind", ["bce", "bce+dice"])
def test_loss_gradients(rng, kind):
    for _ in range(10):
        shape = (int(rng.integers(1, 3)), 1, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        y = (rng.random(shape) > 0.5).astype(float)
        p = Tensor(_probs(rng, shape), requires_grad=True)
        assert gradcheck(lambda t: compute_loss(t, y, kind), [p], rng) <= 1e-4


def test_compute_loss_rejects_unknown():
    with pytest.raises(ValueError):
        compute_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), np.zeros((1, 1, 2, 2)), "focal")


def test_adam_zero_grad_is_identity(rng):
    p = rng.standard_normal(5)
    before = p.copy()
    adam_step([p], [np.zeros(5)], AdamState(), 1e-3)
    assert np.array_equal(p, before)


def test_adam_first_step_moves_by_lr():
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    p = np.array([0.3])
    adam_step([p], [np.array([1.0])], AdamState(), 1e-3)
    assert abs((0.3 - p[0]) - 1e-3 / (1 + 1e-8)) < 1e-15
    assert abs((0.3 - p[0]) - 1e-3) < 1e-6


def test_adam_matches_recurrence(rng):
    p = rng.standard_normal(3)
    ref = p.copy()
    state, m, v = AdamState(), np.zeros(3), np.zeros(3)
    for t in range(1, 6):
        g = rng.standard_normal(3)
        adam_step([p], [g], state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-13)


def test_adam_skips_missing_grads():
    a, b = np.ones(2), np.ones(2)
    adam_step([a, b], [np.ones(2), None], AdamState(), 0.1)
    assert np.all(a < 1) and np.array_equal(b, np.ones(2))


def test_adam_class_wraps_tensors():
    t = Tensor(np.ones(3), requires_grad=True)
    t.grad = np.ones(3)
    opt = Adam([t], lr=0.5)
    opt.step()
    opt.zero_grad()
    assert t.grad is None and np.allclose(t.data, 0.5)


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(learning_rate=-1), dict(loss="l2"), dict(threshold=1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.fixture(scope="module")
def tiny_data():
    pairs = generate_synthetic(SynthConfig(count=10, size=16, seed=5))
    return split_pairs(pairs)


def _tiny_model(seed=0):
    return build_model(UNetConfig(depth=2, base_channels=4, variant="proposed"), seed=seed)


def test_epoch_rows_and_log_file(tiny_data, tmp_path):
    tr, va = tiny_data
    res = train(_tiny_model(), tr, va, TrainConfig(epochs=3, batch_size=3), log_path=tmp_path / "log.csv")
    assert [r["epoch"] for r in res.log] == [1, 2, 3]
    text = (tmp_path / "log.csv").read_text().splitlines()
    assert text[0] == "# shuffle seed 42"
    assert all(line.startswith(f"# epoch {i} order ") for i, line in enumerate(text[1:4], 1))
    assert text[4] == ",".join(LOG_COLUMNS)
    rows = read_log(tmp_path / "log.csv")
    assert rows == res.log
    assert sorted(res.orders[0]) == list(range(len(tr)))


def test_zero_lr_leaves_parameters_unchanged(tiny_data):
    tr, va = tiny_data
    model = _tiny_model()
    before = [p.data.copy() for p in model.parameters()]
    res = train(model, tr, va, TrainConfig(epochs=2, learning_rate=0.0))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))
    # batches regroup each epoch, so the float32 mean differs only by rounding
    assert res.log[0]["loss"] == pytest.approx(res.log[1]["loss"], rel=1e-6)
    assert res.log[0]["dice"] == res.log[1]["dice"]


def test_training_is_reproducible(tiny_data, tmp_path):
    tr, va = tiny_data
    train(_tiny_model(3), tr, va, TrainConfig(epochs=2, seed=9), log_path=tmp_path / "a.csv")
    train(_tiny_model(3), tr, va, TrainConfig(epochs=2, seed=9), log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_geometry_error_before_training(tiny_data):
    tr, va = tiny_data
    model = build_model(UNetConfig(depth=3, base_channels=2))
    progress = []
    odd = [SamplePair("odd", np.zeros((12, 12)), np.zeros((12, 12), dtype=np.uint8))]
    with pytest.raises(GeometryError):
        train(model, odd, va, TrainConfig(epochs=1), progress=progress.append)
    assert progress == []


def test_checkpoint_roundtrip_is_bitwise(rng, tmp_path):
    model = build_model(UNetConfig(depth=2, base_channels=4, variant="conventional"), seed=8)
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    x = rng.random((2, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(model.forward(x).data, back.forward(x).data)
    assert checkpoint_bytes(back) == checkpoint_bytes(model)


def test_checkpoint_errors_are_distinct():
    buf = checkpoint_bytes(build_model(UNetConfig(depth=1, base_channels=2), seed=0))
    for cut in (3, 20, len(buf) - 1):
        with pytest.raises(ChecksumError):
            model_from_bytes(buf[:cut])
    bumped = bytearray(buf)
    struct.pack_into("<I", bumped, 8, 2)
    with pytest.raises(UnsupportedVersionError, match="version 2"):
        model_from_bytes(bytes(bumped))
    with pytest.raises(BadMagicError):
        model_from_bytes(b"NOTACKPT" + buf[8:])
    flipped = bytearray(buf)
    flipped[len(buf) // 2] ^= 0xFF
    with pytest.raises(ChecksumError):
        model_from_bytes(bytes(flipped))


def test_checkpoint_layout(rng):
    model = build_model(UNetConfig(depth=1, base_channels=2), seed=0)
    buf = checkpoint_bytes(model)
    assert buf[:8] == b"CBSMCKPT" and struct.unpack_from("<I", buf, 8)[0] == 1
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])
    (n,) = struct.unpack_from("<I", buf, 12)
    (count,) = struct.unpack_from("<Q", buf, 16 + n)
    assert count == model.num_parameters()
