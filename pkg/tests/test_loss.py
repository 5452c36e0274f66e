import itertools
import math

import numpy as np
import pytest

from petrlite.diffarray import constant
from petrlite.errors import ContractError, DimensionError, ParameterError
from petrlite.loss import (Assignment, assignment_cost, focal_loss, hungarian, l1_box_loss,
                           matching_cost, one_hot_targets, total_loss)
from petrlite.model import HeadOutput


def brute_force(cost):
    m, g = cost.shape
    return min(sum(cost[p, j] for j, p in enumerate(perm))
               for perm in itertools.permutations(range(m), g))


# ---- Hungarian ------------------------------------------------------------------

def test_diagonal_optimum():
    cost = np.array([[1.0, 5, 5], [5, 1, 5], [5, 5, 1]])
    a = hungarian(cost)
    assert a.pairs == [(0, 0), (1, 1), (2, 2)]
    assert a.unmatched == []


def test_single_entry_and_empty():
    assert hungarian([[3.5]]).pairs == [(0, 0)]
    a = hungarian(np.zeros((4, 0)))
    assert a.pairs == [] and a.unmatched == [0, 1, 2, 3]


def test_anti_diagonal_and_rectangular():
    cost = np.array([[9.0, 1], [1, 9], [5, 5]])
    a = hungarian(cost)
    assert sorted(a.pairs) == [(0, 1), (1, 0)]
    assert a.unmatched == [2]


@pytest.mark.parametrize("shape", [(6, 6), (7, 4)])
def test_matches_brute_force(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(20):
        cost = rng.uniform(0, 10, size=shape)
        a = hungarian(cost)
        assert assignment_cost(cost, a) == pytest.approx(brute_force(cost), abs=1e-9)
        assert len({p for p, _ in a.pairs}) == shape[1]
        assert sorted(g for _, g in a.pairs) == list(range(shape[1]))


def test_integer_costs_exact():
    rng = np.random.default_rng(11)
    for _ in range(100):
        g = int(rng.integers(1, 6))
        m = int(rng.integers(g, 7))
        cost = rng.integers(0, 20, size=(m, g)).astype(float)
        assert assignment_cost(cost, hungarian(cost)) == brute_force(cost)


def test_assignment_invariant_to_scale_and_shift():
    rng = np.random.default_rng(12)
    cost = rng.uniform(size=(5, 3))
    a = hungarian(cost)
    b = hungarian(3.0 * cost + 7.0)
    assert a.pairs == b.pairs


def test_hungarian_rejects_bad_input():
    with pytest.raises(ContractError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        hungarian([[np.nan]])
    with pytest.raises(DimensionError):
        hungarian(np.zeros(3))


# ---- focal -------------------------------------------------------------------------

def test_focal_point_value():
    ref = -0.25 * (1 - 0.5) ** 2 * math.log(0.5)
    assert ref == pytest.approx(0.043321, abs=1e-6)
    assert focal_loss(constant([[0.0]]), [[1.0]]).item() == pytest.approx(ref, abs=1e-12)


def test_focal_negative_value():
    ref = -0.75 * 0.5**2 * math.log(0.5)
    assert focal_loss(constant([[0.0]]), [[0.0]]).item() == pytest.approx(ref, abs=1e-12)


def test_focal_gamma_zero_is_weighted_bce():
    z = np.array([[0.3, -1.2], [2.0, 0.1]])
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = 1 / (1 + np.exp(-z))
    bce = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    got = focal_loss(constant(z), t, alpha=0.5, gamma=0.0).item()
    assert got == pytest.approx(0.5 * bce.sum(), rel=1e-12)


def test_focal_confident_correct_goes_to_zero():
    vals = [focal_loss(constant([[z]]), [[1.0]]).item() for z in (0.0, 2.0, 5.0, 10.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-8


def test_focal_normalizer_and_shape_check():
    z = constant(np.zeros((3, 2)))
    t = np.zeros((3, 2))
    assert focal_loss(z, t, normalizer=2.0).item() == pytest.approx(focal_loss(z, t).item() / 2)
    with pytest.raises(DimensionError):
        focal_loss(z, np.zeros((2, 3)))


# ---- L1 ----------------------------------------------------------------------------------

def test_l1_zero_on_identity():
    gt = np.random.default_rng(0).normal(size=(2, 8))
    pred = constant(np.vstack([gt, np.ones((1, 8))]))
    assert l1_box_loss(pred, gt, Assignment([(0, 0), (1, 1)], [2])).item() == 0.0


def test_l1_single_component():
    gt = np.zeros((1, 8))
    pred = np.zeros((1, 8))
    pred[0, 3] = 1.0
    assert l1_box_loss(constant(pred), gt, hungarian([[0.0]])).item() == pytest.approx(1 / 8)


def test_l1_matches_loop():
    rng = np.random.default_rng(1)
    pred, gt = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
    a = Assignment([(0, 2), (3, 0), (4, 1)], [1, 2])
    ref = sum(abs(pred[p, k] - gt[g, k]) for p, g in a.pairs for k in range(8)) / 8 / 3
    assert l1_box_loss(constant(pred), gt, a).item() == pytest.approx(ref, abs=1e-12)


def test_one_hot_targets():
    t = one_hot_targets(3, 4, Assignment([(0, 1), (2, 0)], [1]), [3, 2])
    ref = np.zeros((3, 4))
    ref[0, 2] = ref[2, 3] = 1
    np.testing.assert_array_equal(t, ref)


# ---- total -------------------------------------------------------------------------------

def fake_heads(rng, n_layers=2, m=5, k=3):
    out = []
    for _ in range(n_layers):
        boxes = constant(rng.normal(size=(m, 8)))
        out.append(HeadOutput(constant(rng.normal(size=(m, k))), boxes, boxes))
    return out


def test_no_ground_truth_is_pure_negative_focal():
    rng = np.random.default_rng(2)
    heads = fake_heads(rng)
    res = total_loss(heads, np.zeros((0, 8)), [])
    ref = sum(focal_loss(h.class_logits, np.zeros((5, 3))).item() for h in heads) * 2.0
    assert res.total.item() == pytest.approx(ref, rel=1e-12)
    assert res.reg == [0.0, 0.0]


def test_lambda_scales_classification_only():
    rng = np.random.default_rng(3)
    heads = fake_heads(rng)
    gt = rng.normal(size=(2, 8))
    a = total_loss(heads, gt, [0, 2], lambda_cls=1e-9)
    b = total_loss(heads, gt, [0, 2], lambda_cls=1e-9 * 2)
    assert a.total.item() >= 0
    # with lambda near zero the assignment is purely box-driven, so both share it
    assert [x.pairs for x in a.assignments] == [x.pairs for x in b.assignments]
    assert b.total.item() - sum(b.reg) == pytest.approx(2 * (a.total.item() - sum(a.reg)), rel=1e-9)


def test_layers_matched_independently_and_summed():
    rng = np.random.default_rng(4)
    heads = fake_heads(rng, n_layers=3)
    gt = rng.normal(size=(2, 8))
    res = total_loss(heads, gt, [1, 1])
    assert len(res.assignments) == 3
    parts = [2.0 * c + r for c, r in zip(res.cls, res.reg)]
    assert res.total.item() == pytest.approx(sum(parts), rel=1e-12)
    for h, a in zip(heads, res.assignments):
        cost = matching_cost(h.class_logits.data, h.boxes.data, gt, [1, 1], 2.0)
        assert assignment_cost(cost, a) == pytest.approx(brute_force(cost), abs=1e-9)


def test_total_loss_errors():
    rng = np.random.default_rng(5)
    heads = fake_heads(rng)
    with pytest.raises(ParameterError):
        total_loss(heads, np.zeros((1, 8)), [0], lambda_cls=0.0)
    with pytest.raises(DimensionError):
        total_loss(heads, np.zeros((2, 8)), [0])
