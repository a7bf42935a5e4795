import math

import pytest
import torch

from common.errors import NumericError
from trainer.loss import (
    DescriptorLossTerms, descriptor_matching_loss, landmark_probability_loss, matching_loss_terms, total_loss
)
from trainer.sampling import GroundTruth

LN2 = math.log(2.0)


def _t(values):
    return torch.tensor(values, dtype=torch.float64)


def test_perfect_landmark_prediction_is_near_zero():
    assert float(landmark_probability_loss(_t([1.0 - 1e-7]), [1])) == pytest.approx(0.0, abs=1e-5)


def test_landmark_loss_hand_examples():
    assert float(landmark_probability_loss(_t([0.5]), [0])) == pytest.approx(0.5 + LN2)
    assert float(landmark_probability_loss(_t([0.5, 0.5]), [1, 0])) == pytest.approx(1.193147, abs=1e-6)


def test_landmark_loss_empty_and_misaligned():
    assert float(landmark_probability_loss(_t([]), [])) == 0.0
    with pytest.raises(ValueError):
        landmark_probability_loss(_t([0.5, 0.5]), [1])


def test_hinge_terms_inside_margins_vanish():
    pos = matching_loss_terms(_t([[0.05]]), _t([[0.5]]), [[1]], 0.1, 1.0)
    assert float(pos.hinge_pos) == 0.0
    neg = matching_loss_terms(_t([[1.5]]), _t([[0.5]]), [[0]], 0.1, 1.0)
    assert float(neg.hinge_neg) == 0.0


def test_one_positive_one_negative():
    terms = matching_loss_terms(_t([[0.3, 0.4]]), _t([[0.5, 0.5]]), [[1, 0]], 0.1, 1.0)
    assert float(terms.hinge_pos) == pytest.approx(0.2)
    assert float(terms.hinge_neg) == pytest.approx(0.6)
    assert float(terms.weighted_ce) == pytest.approx(0.346574, abs=1e-6)
    assert float(terms.total) == pytest.approx(1.146574, abs=1e-6)


def test_zero_denominators_contribute_nothing():
    only_neg = matching_loss_terms(_t([[0.5, 0.2]]), _t([[0.3, 0.3]]), [[0, 0]], 0.1, 1.0)
    assert float(only_neg.hinge_pos) == 0.0
    # positives absent: the negative class weight K_pos / total is 0
    assert float(only_neg.weighted_ce) == 0.0

    empty = matching_loss_terms(torch.zeros((0, 3), dtype=torch.float64),
                                torch.zeros((0, 3), dtype=torch.float64), torch.zeros((0, 3)), 0.1, 1.0)
    assert float(empty.total) == 0.0


def test_margin_and_shape_errors():
    with pytest.raises(ValueError):
        matching_loss_terms(_t([[0.1]]), _t([[0.5]]), [[1]], 1.0, 0.5)
    with pytest.raises(ValueError):
        matching_loss_terms(_t([[0.1, 0.2]]), _t([[0.5]]), [[1, 0]], 0.1, 1.0)


def test_descriptor_matching_loss_uses_squared_distance():
    f1 = _t([[1.0, 0.0]])
    f2 = _t([[0.0, 1.0], [1.0, 0.0]])
    gt = GroundTruth(p1=torch.ones(1).numpy(), p2=torch.ones(2).numpy(), c=_t([[0.0, 1.0]]).numpy())
    terms = descriptor_matching_loss(f1, f2, _t([[0.5, 0.5]]), gt, 0.1, 1.0)
    # d2 = [2, 0]: positive inside m_pos, negative beyond m_neg
    assert float(terms.hinge_pos) == 0.0
    assert float(terms.hinge_neg) == 0.0
    with pytest.raises(ValueError):
        descriptor_matching_loss(f1, _t([[1.0, 0.0, 0.0]]), _t([[0.5]]), gt, 0.1, 1.0)


def test_total_loss_sums_components():
    terms = DescriptorLossTerms(_t(0.2), _t(0.6), _t(0.346574))
    breakdown = total_loss(_t(1.0), _t(0.5), terms)
    assert float(breakdown.total) == pytest.approx(2.646574)
    assert float(breakdown.descriptor_loss) == pytest.approx(1.146574)
    assert set(breakdown.to_log_dict()) == {"landmark_loss_I1", "landmark_loss_I2", "descriptor_loss", "total",
                                            "hinge_pos", "hinge_neg", "weighted_ce"}


def test_non_finite_component_is_named():
    terms = DescriptorLossTerms(_t(0.0), _t(float("nan")), _t(0.0))
    with pytest.raises(NumericError) as info:
        total_loss(_t(1.0), _t(1.0), terms)
    assert info.value.component == "hinge_neg"


def test_loss_gradient_flows_to_predictions():
    p_hat = _t([0.3, 0.8]).requires_grad_(True)
    landmark_probability_loss(p_hat, [1, 0]).backward()
    assert torch.all(torch.isfinite(p_hat.grad))
    assert float(p_hat.grad[0]) < 0 < float(p_hat.grad[1])
