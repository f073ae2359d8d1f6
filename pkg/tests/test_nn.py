import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defix.nn import (GradientError, LayerSpec, Model, ModelCheckpoint, OptimizerState, RecurrentCell,
                      backward_and_step, bce_loss, checkpoint_from_model, gradient_suite, mce_loss, mlp_specs,
                      recurrent_encode, relative_error, train_supervised, trunk_specs)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_suite_small(seed):
    errs = gradient_suite(seed)
    assert set(errs) == {"dense", "relu", "sigmoid", "softmax", "recurrent_cell", "bce", "mce"}
    assert max(errs.values()) < 1e-4


def test_relative_error_detects_wrong_gradient():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([1.0], [1.1]) > 1e-2


def test_loss_values():
    assert bce_loss([0.5], [1.0]) == pytest.approx(math.log(2))
    assert bce_loss([1.0], [1.0]) == pytest.approx(-math.log(1 - 1e-7), abs=1e-9)
    p = np.array([[0.25, 0.25, 0.25, 0.25]])
    assert mce_loss(p, [2], 4) == pytest.approx(math.log(4) / 4)
    with pytest.raises(ValueError):
        mce_loss(p, [4], 4)
    with pytest.raises(ValueError):
        bce_loss([], [])


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("conv", 1, 1)
    with pytest.raises(ValueError):
        LayerSpec("dense", 0, 1)
    with pytest.raises(ValueError):
        Model("mlp", [LayerSpec("dense", 2, 2), LayerSpec("softmax", 2, 2), LayerSpec("dense", 2, 2)])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10**6))
def test_recurrent_bounded_and_matches_reference(T, seed):
    rng = np.random.default_rng(seed)
    cell = RecurrentCell(1, 6, rng)
    seq = rng.normal(size=T) * 5
    h = recurrent_encode(cell, seq)
    assert np.all(np.abs(h) <= 1.0)
    Wz, Uz, bz, Wc, Uc, bc = cell.params
    ref = np.zeros(6)
    for x in seq:
        z = 1 / (1 + np.exp(-(Wz[:, 0] * x + Uz @ ref + bz)))
        c = np.tanh(Wc[:, 0] * x + Uc @ ref + bc)
        ref = (1 - z) * ref + z * c
    assert np.allclose(h, ref, atol=1e-12)


def test_softmax_rows_sum_to_one():
    m = Model("mlp", mlp_specs([3, 5, 4], final="softmax"), np.random.default_rng(0))
    out = m.forward(np.random.default_rng(1).normal(size=(7, 3)) * 50)
    assert np.allclose(out.sum(axis=1), 1.0) and np.all(out >= 0)


def test_checkpoint_round_trip_and_id_stable(tmp_path):
    m = Model("trunk", trunk_specs(8, 4, 3, 2, 5, 1, "sigmoid"), np.random.default_rng(0))
    ck = checkpoint_from_model(m, {"note": "x"})
    path = ck.save(tmp_path / "m.ckpt")
    back = ModelCheckpoint.load(path)
    assert back.id == ck.id and back.metadata == {"note": "x"}
    x = (np.ones((2, 8)), np.ones((2, 4)), np.ones((2, 6)))
    assert np.allclose(back.build().forward(x), m.forward(x), atol=1e-5)
    with pytest.raises(ValueError):
        ModelCheckpoint.from_bytes(b"junk")
    with pytest.raises(ValueError):
        ModelCheckpoint.from_bytes(path.read_bytes()[:-4])


def test_trunk_rejects_wrong_dims():
    m = Model("trunk", trunk_specs(8, 4, 3, 2, 5, 1, "sigmoid"))
    with pytest.raises(ValueError):
        m.forward((np.ones((1, 7)), np.ones((1, 4)), np.ones((1, 3))))


def test_non_finite_gradient_raises():
    m = Model("mlp", mlp_specs([2, 3, 1], final="sigmoid"))
    with pytest.raises(GradientError), np.errstate(invalid="ignore"):
        backward_and_step(m, (np.array([[np.inf, 1.0]]), np.array([1.0])), "bce", OptimizerState())


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_training_learns_xor(kind):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(400, 2))
    y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(float)
    m = Model("mlp", mlp_specs([2, 16, 1], final="sigmoid"), rng)
    lr = 0.01 if kind == "adam" else 0.1
    hist = train_supervised(m, x, y, "bce", 60, rng, OptimizerState(kind, lr=lr), batch=32)
    assert hist[-1] < hist[0]
    acc = np.mean((m.forward(x).ravel() > 0.5) == y)
    assert acc > 0.9
