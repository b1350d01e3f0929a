import math

import pytest
import torch

from core.errors import DegenerateSampleError, InputValidationError
from core.tasks import Task
from losses.functional import loss_au, loss_expr, loss_multi, loss_va
from losses.models import LossWeights, TargetBatch, TargetSet
from model.network import MultiTaskPrediction

DOUBLE = torch.float64


def t(values):
    return torch.tensor(values, dtype=DOUBLE)


class TestLossVA:
    def test_examples(self):
        assert float(loss_va(t([0.5, -0.5]), t([0.5, -0.5]))) == 0.0
        assert float(loss_va(t([1.0, 0.0]), t([0.0, 0.0]))) == 1.0
        assert float(loss_va(t([1.0, 1.0]), t([-1.0, -1.0]))) == 8.0

    def test_batch_shape(self):
        values = loss_va(t([[0.0, 0.0], [1.0, 0.0]]), t([[0.0, 0.0], [0.0, 0.0]]))
        assert values.tolist() == [0.0, 1.0]

    def test_target_out_of_range(self):
        with pytest.raises(InputValidationError):
            loss_va(t([0.0, 0.0]), t([1.5, 0.0]))


class TestLossExpr:
    def test_uniform_logits_give_ln7(self):
        for target in range(7):
            assert abs(float(loss_expr(torch.zeros(7, dtype=DOUBLE), target)) - math.log(7)) < 1e-9

    def test_dominant_logit_limit(self):
        logits = torch.zeros(7, dtype=DOUBLE)
        logits[2] = 50.0
        value = float(loss_expr(logits, 2))
        assert 0.0 <= value < 1e-20

    def test_soft_one_hot_matches_hard(self):
        logits = torch.randn(7, dtype=DOUBLE)
        one_hot = torch.zeros(7, dtype=DOUBLE)
        one_hot[4] = 1.0
        assert torch.allclose(loss_expr(logits, one_hot), loss_expr(logits, 4), atol=1e-12)

    def test_soft_target_is_weighted_hard_losses(self):
        logits = torch.randn(7, dtype=DOUBLE)
        soft = torch.softmax(torch.randn(7, dtype=DOUBLE), dim=-1)
        expected = sum(float(soft[c]) * float(loss_expr(logits, c)) for c in range(7))
        assert abs(float(loss_expr(logits, soft)) - expected) < 1e-9

    def test_class_out_of_range(self):
        with pytest.raises(InputValidationError):
            loss_expr(torch.zeros(7), 7)
        with pytest.raises(InputValidationError):
            loss_expr(torch.zeros(7), -1)

    def test_large_logits_are_stable(self):
        logits = torch.tensor([1e4, -1e4, 0.0, 0.0, 0.0, 0.0, 0.0], dtype=DOUBLE)
        assert math.isfinite(float(loss_expr(logits, 1)))


class TestLossAU:
    def test_zero_logits_give_k_ln2(self):
        target = (torch.arange(12) % 2).to(DOUBLE)
        assert abs(float(loss_au(torch.zeros(12, dtype=DOUBLE), target)) - 12 * math.log(2)) < 1e-9

    def test_target_equal_to_sigmoid(self):
        value = float(loss_au(torch.zeros(1, dtype=DOUBLE), t([0.5])))
        assert abs(value - math.log(2)) < 1e-12

    def test_confident_positive_limit(self):
        assert float(loss_au(t([50.0]), t([1.0]))) < 1e-20

    def test_extreme_logits_are_finite(self):
        value = loss_au(t([1e4, -1e4, 1e4]), t([0.0, 1.0, 1.0]))
        assert math.isfinite(float(value))

    def test_target_outside_unit_interval(self):
        with pytest.raises(InputValidationError):
            loss_au(torch.zeros(2), torch.tensor([0.0, 1.5]))
        with pytest.raises(InputValidationError):
            loss_au(torch.zeros(2), torch.tensor([0.0, 1.0, 1.0]))

    def test_permutation_equivariance(self):
        logits = torch.randn(12, dtype=DOUBLE)
        target = torch.rand(12, dtype=DOUBLE)
        perm = torch.randperm(12)
        assert torch.allclose(loss_au(logits, target), loss_au(logits[perm], target[perm]), atol=1e-12)


def make_prediction(batch_size=3, num_aus=12, requires_grad=False, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return MultiTaskPrediction(
        va=torch.tanh(torch.randn(batch_size, 2, generator=generator, dtype=DOUBLE)).requires_grad_(requires_grad),
        expr_logits=torch.randn(batch_size, 7, generator=generator, dtype=DOUBLE).requires_grad_(requires_grad),
        au_logits=torch.randn(batch_size, num_aus, generator=generator, dtype=DOUBLE).requires_grad_(requires_grad),
    )


def make_targets(targets):
    return TargetBatch.from_targets(targets, 7, 12, dtype=DOUBLE)


FULL = [
    TargetSet(va=(0.2, -0.3), expr=3, au=[1.0, 0.0] * 6),
    TargetSet(va=(-0.5, 0.5), expr=0, au=[0.0] * 12),
    TargetSet(va=(0.9, 0.1), expr=6, au=[1.0] * 12),
]


class TestLossMulti:
    def test_all_present_equals_sum(self):
        prediction = make_prediction()
        targets = make_targets(FULL)
        total, (l_va, l_expr, l_au) = loss_multi(prediction, targets)
        assert abs(float(total) - float(l_va + l_expr + l_au)) < 1e-12
        expected_va = float(loss_va(prediction.va, targets.va).mean())
        assert abs(float(l_va) - expected_va) < 1e-12

    def test_weights_scale_components(self):
        prediction = make_prediction()
        targets = make_targets(FULL)
        total, (l_va, l_expr, l_au) = loss_multi(prediction, targets, LossWeights(alpha=2.0, beta=0.5, gamma=3.0))
        assert abs(float(total) - float(2 * l_va + 0.5 * l_expr + 3 * l_au)) < 1e-12

    def test_masked_tasks_have_zero_gradient(self):
        prediction = make_prediction(requires_grad=True)
        targets = make_targets([TargetSet(expr=1), TargetSet(expr=2), TargetSet(expr=5)])
        total, (l_va, l_expr, l_au) = loss_multi(prediction, targets)
        assert float(l_va) == 0.0 and float(l_au) == 0.0
        assert abs(float(total) - float(l_expr)) < 1e-12
        total.backward()
        assert torch.count_nonzero(prediction.va.grad) == 0
        assert torch.count_nonzero(prediction.au_logits.grad) == 0
        assert torch.count_nonzero(prediction.expr_logits.grad) > 0

    def test_zero_alpha_ignores_va_target(self):
        prediction = make_prediction()
        weights = LossWeights(alpha=0.0, beta=1.0, gamma=1.0)
        first = loss_multi(prediction, make_targets(FULL), weights)[0]
        changed = [TargetSet(va=(-1.0, 1.0), expr=t.expr, au=t.au) for t in FULL]
        second = loss_multi(prediction, make_targets(changed), weights)[0]
        assert float(first) == float(second)

    def test_partial_masks_average_over_batch(self):
        prediction = make_prediction()
        targets = make_targets([FULL[0], TargetSet(expr=0), TargetSet(au=[0.0] * 12)])
        _, (l_va, _, _) = loss_multi(prediction, targets)
        only_first = float(loss_va(prediction.va[0], targets.va[0]))
        assert abs(float(l_va) - only_first / 3) < 1e-12

    def test_degenerate_sample(self):
        prediction = make_prediction(batch_size=2)
        targets = make_targets([FULL[0], TargetSet()])
        with pytest.raises(DegenerateSampleError):
            loss_multi(prediction, targets)

    def test_losses_are_non_negative(self):
        prediction = make_prediction(seed=3)
        total, components = loss_multi(prediction, make_targets(FULL))
        assert float(total) >= 0.0
        assert all(float(c) >= 0.0 for c in components)

    def test_gradient_matches_finite_differences(self):
        prediction = make_prediction(requires_grad=True, seed=1)
        targets = make_targets([FULL[0], TargetSet(expr=[0.1, 0.2, 0.3, 0.1, 0.1, 0.1, 0.1]), FULL[2]])

        def total(va, expr_logits, au_logits):
            pred = MultiTaskPrediction(va=va, expr_logits=expr_logits, au_logits=au_logits)
            return loss_multi(pred, targets, LossWeights(alpha=1.0, beta=0.7, gamma=1.3))[0]

        assert torch.autograd.gradcheck(
            total, (prediction.va, prediction.expr_logits, prediction.au_logits), eps=1e-6, atol=1e-6
        )


def test_target_set_mask_and_encoding():
    target = TargetSet(expr=[0.5, 0.5, 0, 0, 0, 0, 0])
    assert target.mask == (False, True, False)
    assert target.is_soft_expr
    batch = make_targets([target])
    assert batch.expr_mask.tolist() == [True]
    assert batch.va_mask.tolist() == [False]
    assert torch.isfinite(batch.va).all() and torch.isfinite(batch.au).all()
    assert batch.mask(Task.AU).tolist() == [False]


def test_target_set_validation():
    with pytest.raises(ValueError):
        TargetSet(va=(1.5, 0.0))
    with pytest.raises(ValueError):
        TargetSet(expr=[0.5, 0.6])
    with pytest.raises(ValueError):
        TargetSet(au=[2.0])
    with pytest.raises(InputValidationError):
        make_targets([TargetSet(expr=9)])
