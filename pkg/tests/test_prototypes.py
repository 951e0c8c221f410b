import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmmia.errors import ContractError, ShapeError
from dmmia.numerics import Rng, Tensor, backward
from dmmia.prototypes import (
    Banks,
    IdrBank,
    ImrBank,
    idr_loss,
    imr_loss,
    memory_update,
    normalize_rows,
    p_idr,
    p_imr,
)
from oracles import central_difference, rel_error

E = math.e


def bank(rows, rho):
    return ImrBank(np.array(rows, dtype=float), rho)


def memory(rows, momentum=0.7, written=True):
    m = IdrBank(len(rows), len(rows[0]), momentum)
    m.M.data[...] = rows
    m.written[:] = written
    return m


def test_equal_dots_give_rho_over_nw():
    assert p_imr(np.array([1.0, 2.0]), bank(np.ones((4, 2)), 2)) == pytest.approx(0.5, abs=1e-15)


def test_zero_bank_any_feature():
    b = ImrBank(np.zeros((10, 3)), 3)
    assert p_imr(np.array([5.0, -1.0, 2.0]), b) == pytest.approx(0.3, abs=1e-15)


def test_three_prototype_scalar_example():
    b = bank([[1, 0], [0, 1], [-1, 0]], 1)
    f = np.array([1.0, 0.0])
    expected = E / (E + 1 + 1 / E)
    assert p_imr(f, b) == pytest.approx(expected, abs=1e-14)
    assert round(expected, 5) == 0.66524
    assert imr_loss(f, b).item() == pytest.approx(-math.log(expected), abs=1e-14)
    assert round(-math.log(expected), 5) == 0.40761


def test_symmetric_bank_loss_is_ln2():
    b = ImrBank(np.zeros((500, 8)), 250)
    assert imr_loss(np.ones(8), b).item() == pytest.approx(math.log(2), abs=1e-15)


def test_fresh_memory_gives_ln_k():
    m = IdrBank(5, 4, 0.7)
    assert idr_loss(np.array([3.0, -1.0, 0.5, 2.0]), m, 2).item() == pytest.approx(math.log(5), abs=1e-15)
    assert p_idr(np.ones(4), m, 0) == pytest.approx(0.2, abs=1e-15)


def test_two_class_memory_example():
    m = memory([[1, 0], [0, 1]])
    f = np.array([1.0, 0.0])
    assert p_idr(f, m, 0) == pytest.approx(E / (E + 1), abs=1e-14)
    assert round(E / (E + 1), 5) == 0.73106
    assert idr_loss(f, m, 0).item() == pytest.approx(0.31326, abs=5e-6)


def test_memory_shift_invariance(nprng):
    rows = nprng.normal(size=(4, 6))
    f = nprng.normal(size=6)
    shift = nprng.normal(size=6)
    assert p_idr(f, memory(rows + shift), 1) == pytest.approx(p_idr(f, memory(rows), 1), rel=1e-12)


def test_rotation_invariance(nprng):
    q, _ = np.linalg.qr(nprng.normal(size=(5, 5)))
    w = nprng.normal(size=(7, 5))
    m = nprng.normal(size=(3, 5))
    f = nprng.normal(size=5)
    assert p_imr(q @ f, ImrBank(w @ q.T, 3)) == pytest.approx(p_imr(f, ImrBank(w, 3)), rel=1e-12)
    assert p_idr(q @ f, memory(m @ q.T), 2) == pytest.approx(p_idr(f, memory(m), 2), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-30, 30)),
    arrays(np.float64, (6, 4), elements=st.floats(-3, 3)),
)
def test_probabilities_in_open_unit_interval(f, w):
    p = p_imr(f, ImrBank(w, 2))
    assert np.all((p > 0) & (p <= 1))
    q = p_idr(f, memory(w[:3]), 0)
    assert np.all((q > 0) & (q <= 1))


def test_imr_gradients_match_finite_differences(nprng):
    f = nprng.normal(size=(3, 8))
    w = nprng.normal(size=(6, 8))
    ft = Tensor(f, requires_grad=True)
    b = ImrBank(Tensor(w.copy(), requires_grad=True), 2)
    backward(imr_loss(ft, b))
    gf = central_difference(lambda x: imr_loss(x, ImrBank(w, 2)).item(), f)
    gw = central_difference(lambda x: imr_loss(f, ImrBank(x, 2)).item(), w)
    assert rel_error(ft.grad, gf) <= 1e-4
    assert rel_error(b.W.grad, gw) <= 1e-4


def test_idr_gradient_reaches_features_only(nprng):
    f = nprng.normal(size=(4, 8))
    m = memory(nprng.normal(size=(5, 8)))
    ft = Tensor(f, requires_grad=True)
    backward(idr_loss(ft, m, 3))
    g = central_difference(lambda x: idr_loss(x, m, 3).item(), f)
    assert rel_error(ft.grad, g) <= 1e-4
    assert m.M.grad is None
    assert not m.M.requires_grad


def test_bank_validation():
    with pytest.raises(ContractError):
        ImrBank(np.zeros((4, 2)), 4)
    with pytest.raises(ContractError):
        ImrBank(np.zeros((4, 2)), 0)
    with pytest.raises(ContractError):
        IdrBank(3, 2, 1.5)
    with pytest.raises(ShapeError):
        p_imr(np.ones(3), ImrBank(np.zeros((4, 2)), 1))
    with pytest.raises(ContractError):
        p_idr(np.ones(2), IdrBank(3, 2, 0.5), 3)


def test_fresh_bank_scale():
    b = ImrBank.init(Rng(0), 500, 128, 250)
    assert b.W.shape == (500, 128)
    assert abs(b.W.data.std() * math.sqrt(128) - 1) < 0.02
    assert b.W.requires_grad


# -- memory update -------------------------------------------------------------

def test_momentum_update_arithmetic():
    m = memory([[1.0, 1.0]], momentum=0.7)
    memory_update(m, np.array([[0.0, 2.0]]), [0])
    assert np.allclose(m.M.data[0], [0.7, 1.3], atol=1e-15)


def test_momentum_one_freezes_after_first_write():
    m = IdrBank(2, 2, 1.0)
    memory_update(m, np.array([[3.0, 4.0]]), [1])
    memory_update(m, np.array([[9.0, 9.0]]), [1])
    assert np.array_equal(m.M.data[1], [3.0, 4.0])


def test_batch_mean_per_class():
    m = IdrBank(5, 2, 0.7)
    memory_update(m, np.array([[2.0, 0.0], [0.0, 2.0]]), [3, 3])
    assert np.array_equal(m.M.data[3], [1.0, 1.0])
    assert m.written.tolist() == [False, False, False, True, False]


def test_absent_classes_untouched_and_zero_until_written(nprng):
    m = IdrBank(4, 3, 0.5)
    memory_update(m, nprng.normal(size=(6, 3)), [0, 2, 0, 2, 2, 0])
    before = m.M.data.copy()
    memory_update(m, nprng.normal(size=(2, 3)), [2, 2])
    assert np.array_equal(m.M.data[0], before[0])
    assert np.all(m.M.data[~m.written] == 0)


def test_memory_class_out_of_range():
    with pytest.raises(ContractError):
        memory_update(IdrBank(3, 2, 0.5), np.ones((1, 2)), [3])


def test_normalize_rows_unit_length(nprng):
    f = normalize_rows(nprng.normal(size=(5, 7))).data
    assert np.allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-15)


def test_banks_state_round_trip(tmp_path):
    from dmmia.checkpoint import load_checkpoint, save_checkpoint

    banks = Banks.fresh(Rng(3), 10, 4, 5, 6, 0.7)
    memory_update(banks.idr, np.arange(12.0).reshape(2, 6), [1, 4])
    save_checkpoint(banks, tmp_path / "b.ckpt")
    loaded = load_checkpoint(tmp_path / "b.ckpt")
    assert np.array_equal(loaded.imr.W.data, banks.imr.W.data)
    assert np.array_equal(loaded.idr.M.data, banks.idr.M.data)
    assert loaded.idr.written.tolist() == banks.idr.written.tolist()
    assert loaded.imr.n_positive == 4 and loaded.idr.momentum == 0.7
