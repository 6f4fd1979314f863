import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import scripted_dice_loss
from multiprior.metrics import (adjacency_count, confusion, dice_report, dice_rows, dice_score,
                                generalized_dice_loss, read_tsv, volume_fractions, write_tsv)
from multiprior.volume_io import CSF, GM, LabelVolume, one_hot


def random_pair(rng, shape=(2, 7, 3, 3, 3)):
    logits = rng.normal(size=shape)
    pred = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    lab = rng.integers(0, shape[1], size=(shape[0],) + shape[2:])
    truth = np.moveaxis(np.eye(shape[1])[lab], -1, 1)
    return pred, truth


def test_dice_loss_extremes():
    lab = np.arange(7).repeat(4).reshape(1, 4, 7)
    t = np.moveaxis(np.eye(7)[lab], -1, 0)
    assert generalized_dice_loss(t, t)[0] == pytest.approx(0.0, abs=1e-12)
    shifted = np.roll(t, 1, axis=0)
    assert generalized_dice_loss(shifted, t)[0] == pytest.approx(1.0, abs=1e-5)


def test_dice_loss_hand_value():
    pred = np.array([[1.0, 0.0]])
    truth = np.array([[1.0, 1.0]])
    # 2*1 / (1 + 2) = 2/3
    assert generalized_dice_loss(pred, truth, eps=0.0)[0] == pytest.approx(1 / 3)


def test_dice_loss_matches_loop_oracle(rng):
    pred, truth = random_pair(rng)
    for eps in (0.0, 1e-5, 0.5):
        assert generalized_dice_loss(pred, truth, eps=eps)[0] == pytest.approx(
            scripted_dice_loss(pred, truth, eps), rel=1e-12)


@pytest.mark.parametrize("norm", ["l2", "l1"])
def test_dice_loss_gradient_finite_difference(rng, norm):
    pred, truth = random_pair(rng, (1, 4, 2, 2, 3))
    _, g = generalized_dice_loss(pred, truth, norm=norm)
    h = 1e-6
    num = np.zeros_like(pred)
    for i in np.ndindex(pred.shape):
        p, m = pred.copy(), pred.copy()
        p[i] += h
        m[i] -= h
        num[i] = (generalized_dice_loss(p, truth, norm=norm)[0]
                  - generalized_dice_loss(m, truth, norm=norm)[0]) / (2 * h)
    np.testing.assert_allclose(g, num, atol=1e-7, rtol=1e-5)


def test_dice_loss_rejects_bad_input():
    with pytest.raises(ValueError):
        generalized_dice_loss(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        generalized_dice_loss(np.full((2, 2), np.nan), np.zeros((2, 2)))


def test_dice_half_overlapping_cubes():
    a = np.zeros((8, 8, 8), np.uint8)
    b = np.zeros_like(a)
    a[0:4, 0:4, 0:4] = 1
    b[2:6, 0:4, 0:4] = 1
    assert dice_score(a, b, 1) == pytest.approx(0.5)
    assert dice_score(a, b, 3) is None
    rep = dice_report(a, b)
    assert rep.per_class[1] == pytest.approx(0.5)
    assert rep.per_class[2] is None


def test_confusion_counts(rng):
    t = rng.integers(0, 7, size=(5, 6, 7))
    p = rng.integers(0, 7, size=(5, 6, 7))
    cm = confusion(t, p)
    for i in range(7):
        for j in range(7):
            assert cm[i, j] == np.count_nonzero((t == i) & (p == j))
    mask = t > 2
    assert confusion(t, p, mask=mask).sum() == mask.sum()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_report_bounds_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 7, size=(4, 4, 4))
    p = rng.integers(0, 7, size=(4, 4, 4))
    a, b = dice_report(t, p), dice_report(p, t)
    for x, y in zip(a.per_class, b.per_class):
        assert (x is None) == (y is None)
        if x is not None:
            assert 0.0 <= x <= 1.0 and x == pytest.approx(y)


def test_volume_fractions():
    lab = np.zeros((4, 4, 4), np.uint8)
    lab[0, :, :] = GM
    lab[1, :2, :] = CSF
    vol, frac = volume_fractions(LabelVolume(lab, (1.0, 2.0, 1.0)))
    assert vol["gm"] == pytest.approx(32.0)
    assert frac["gm"] == pytest.approx(16 / 24)
    assert frac["csf"] == pytest.approx(8 / 24)
    assert sum(frac.values()) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        volume_fractions(np.zeros((2, 2, 2), np.uint8))


def test_adjacency_count():
    lab = np.zeros((3, 3, 3), np.uint8)
    lab[1, 1, 1] = CSF
    assert adjacency_count(lab, CSF, 0) == 6
    assert adjacency_count(lab, 0, CSF) == 6
    lab[1, 1, 2] = GM
    assert adjacency_count(lab, CSF, GM) == 1
    assert adjacency_count(lab, CSF, 0) == 5


def test_tsv_roundtrip(tmp_path, rng):
    t = rng.integers(0, 7, size=(4, 4, 4))
    rows = dice_rows("s1", dice_report(t, t))
    write_tsv(rows, tmp_path / "d.tsv")
    back = read_tsv(tmp_path / "d.tsv")
    assert [r["class"] for r in back] == [r["class"] for r in rows]
    assert float(back[-2]["dice"]) == pytest.approx(1.0)
