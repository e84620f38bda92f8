import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mccf.autodiff import Tensor, finite_diff_check
from mccf import autodiff as ad
from mccf.errors import ContractError, NumericError
from mccf.losses import (batch_loss, cosine_sim, cross_entropy, cross_entropy_loss, ntxent_loss,
                         ntxent_pair_loss)

from oracles import naive_cosine, naive_ntxent

WORKED = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
WORKED_VALUE = -math.log(math.e / (math.e + 2))


class TestCosine:
    def test_self_and_opposite(self):
        a = Tensor([0.3, -2.0, 1.0])
        assert cosine_sim(a, a).item() == pytest.approx(1.0, abs=1e-15)
        assert cosine_sim(a, Tensor(-a.data)).item() == pytest.approx(-1.0, abs=1e-15)

    def test_hand_value(self):
        assert cosine_sim(Tensor([1.0, 2.0, 2.0]), Tensor([2.0, 1.0, 2.0])).item() == pytest.approx(8 / 9, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(NumericError):
            cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
    def test_matches_oracle(self, a, b):
        if max(map(abs, a)) < 1e-3 or max(map(abs, b)) < 1e-3:
            return
        assert cosine_sim(Tensor(a), Tensor(b)).item() == pytest.approx(naive_cosine(a, b), abs=1e-12)


class TestNtXent:
    def test_no_negatives_is_exactly_zero(self):
        Z = Tensor([[1.0, 2.0], [-3.0, 0.5]])
        for v in (ntxent_pair_loss(0, 1, Z, 0.5).item(), ntxent_loss(Z, 0.5).item()):
            assert v == 0.0 and math.copysign(1.0, v) == 1.0

    def test_worked_pair(self):
        assert ntxent_pair_loss(0, 1, Tensor(WORKED), 1.0).item() == pytest.approx(0.55144, abs=1e-5)
        assert ntxent_pair_loss(0, 1, Tensor(WORKED), 1.0).item() == pytest.approx(WORKED_VALUE, abs=1e-14)

    def test_worked_batch(self):
        assert batch_loss(Tensor(WORKED), 1.0).item() == pytest.approx(0.55144, abs=1e-5)
        for i, j in ((0, 1), (1, 0), (2, 3), (3, 2)):
            assert ntxent_pair_loss(i, j, Tensor(WORKED), 1.0).item() == pytest.approx(WORKED_VALUE, abs=1e-14)

    def test_denominator_includes_partner(self):
        # a separate oracle: exclude only k = i
        Z = np.random.default_rng(0).normal(size=(6, 3))
        zn = Z / np.linalg.norm(Z, axis=1, keepdims=True)
        s = zn @ zn.T / 0.7
        expected = -(s[2, 3] - np.log(np.exp(np.delete(s[2], 2)).sum()))
        assert ntxent_pair_loss(2, 3, Tensor(Z), 0.7).item() == pytest.approx(expected, abs=1e-13)

    def test_matches_naive_oracle_on_50_batches(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            M = int(rng.integers(1, 9))
            Z = rng.normal(size=(2 * M, int(rng.integers(2, 9))))
            tau = float(rng.uniform(0.1, 2.0))
            assert abs(ntxent_loss(Tensor(Z), tau).item() - naive_ntxent(Z, tau)) <= 1e-12

    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_nonnegative(self, seed, M):
        Z = np.random.default_rng(seed).normal(size=(2 * M, 4))
        assert ntxent_loss(Tensor(Z), 0.5).item() >= 0.0

    def test_power_of_two_row_scaling_is_exact(self):
        rng = np.random.default_rng(1)
        Z = rng.normal(size=(8, 5))
        c = 2.0 ** rng.integers(-4, 5, size=(8, 1))
        assert ntxent_loss(Tensor(Z * c), 0.5).item() == ntxent_loss(Tensor(Z), 0.5).item()

    @given(st.integers(0, 10_000))
    def test_positive_row_scaling(self, seed):
        rng = np.random.default_rng(seed)
        Z = rng.normal(size=(6, 4))
        c = rng.uniform(0.01, 100.0, size=(6, 1))
        assert ntxent_loss(Tensor(Z * c), 0.5).item() == pytest.approx(ntxent_loss(Tensor(Z), 0.5).item(), abs=1e-12)

    def test_worked_pair_invariant_to_scaling_by_three(self):
        Z = np.array(WORKED) * 3
        assert ntxent_pair_loss(0, 1, Tensor(Z), 1.0).item() == pytest.approx(WORKED_VALUE, abs=1e-14)

    def test_temperature_monotonicity(self):
        # positive similarity exceeds every negative similarity for each row
        Z = np.array([[1.0, 0.1, 0.0], [1.0, -0.1, 0.0], [0.0, 1.0, 0.2], [0.1, 1.0, -0.2]])
        taus = [2.0, 1.0, 0.5, 0.2, 0.1, 0.05]
        vals = [ntxent_loss(Tensor(Z), t).item() for t in taus]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(ContractError):
            ntxent_loss(Tensor(WORKED), tau)
        with pytest.raises(ContractError):
            ntxent_pair_loss(0, 1, Tensor(WORKED), tau)

    def test_bad_shapes(self):
        with pytest.raises(ContractError):
            ntxent_loss(Tensor(np.ones((3, 2))), 0.5)
        with pytest.raises(ContractError):
            ntxent_pair_loss(1, 1, Tensor(WORKED), 0.5)

    def test_regulariser_adds_half_lambda_w_squared(self):
        w = Tensor([3.0], requires_grad=True)
        base = batch_loss(Tensor(WORKED), 1.0).item()
        assert batch_loss(Tensor(WORKED), 1.0, 0.1, [w]).item() == pytest.approx(base + 0.05 * 9, abs=1e-14)

    def test_gradient(self):
        Z = Tensor(np.random.default_rng(2).normal(size=(6, 4)), requires_grad=True)
        w = Tensor(np.random.default_rng(3).normal(size=(2, 2)), requires_grad=True)
        assert finite_diff_check(lambda: batch_loss(Z, 0.5, 0.01, [w]), [Z, w]) <= 1e-5


class TestCrossEntropy:
    def test_certain_prediction(self):
        assert cross_entropy(Tensor([[1.0, 0.0]]), [0]).item() == 0.0

    def test_uniform_prediction(self):
        assert cross_entropy(Tensor([[0.5, 0.5], [0.5, 0.5]]), [0, 1]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_zero_probability_is_clamped(self):
        assert cross_entropy(Tensor([[1.0, 0.0]]), [1]).item() == pytest.approx(-math.log(1e-12))

    def test_with_penalty(self):
        w = Tensor([2.0, 1.0], requires_grad=True)
        v = cross_entropy_loss(Tensor([[0.5, 0.5]]), [1], 0.2, [w]).item()
        assert v == pytest.approx(math.log(2) + 0.1 * 5, abs=1e-14)

    def test_gradient(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(5, 2)), requires_grad=True)
        labels = [0, 1, 1, 0, 1]
        assert finite_diff_check(lambda: cross_entropy(ad.softmax(logits), labels), [logits]) <= 1e-6

    def test_label_checks(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor([[0.5, 0.5]]), [2])
        with pytest.raises(ContractError):
            cross_entropy(Tensor([[0.5, 0.5]]), [0, 1])
