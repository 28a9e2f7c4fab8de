import math

import pytest
import torch

from bitlatent.binary import LOG_EPS, bce, bernoulli_sample, quantize, soft_xor, straight_through

from helpers import rel_err


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


class TestBernoulliSample:
    def test_all_zeros(self):
        p = torch.zeros(8, 8)
        assert torch.equal(bernoulli_sample(p, gen()), torch.zeros(8, 8))

    def test_all_ones(self):
        p = torch.ones(8, 8)
        assert torch.equal(bernoulli_sample(p, gen()), torch.ones(8, 8))

    def test_fair_coin_mean(self):
        n = 10 ** 5
        draws = bernoulli_sample(torch.full((n,), 0.5), gen(3))
        bound = 4 * math.sqrt(0.25 / n)
        assert abs(float(draws.mean()) - 0.5) < bound

    def test_domain_error(self):
        with pytest.raises(ValueError):
            bernoulli_sample(torch.tensor([1.2]), gen())
        with pytest.raises(ValueError):
            bernoulli_sample(torch.tensor([-0.1]), gen())

    def test_determinism(self):
        p = torch.rand(4, 4, generator=gen(1))
        assert torch.equal(bernoulli_sample(p, gen(7)), bernoulli_sample(p, gen(7)))


class TestQuantize:
    def test_hard_threshold_positive(self):
        code, probs = quantize(torch.full((3, 5), 2.0), 0.0)
        assert torch.equal(code, torch.ones(3, 5))
        assert torch.equal(probs, code)

    def test_zero_logits_unit_temperature(self):
        _, probs = quantize(torch.zeros(2, 2), 1.0, gen())
        assert torch.equal(probs, torch.full((2, 2), 0.5))

    def test_formula_value(self):
        _, probs = quantize(torch.tensor([[1.0]]), 0.5, gen())
        assert abs(float(probs) - 0.880797) < 1e-6

    def test_tie_maps_to_zero(self):
        code, _ = quantize(torch.tensor([[0.0, -1.0, 1e-9]]), 0.0)
        assert code.tolist() == [[0.0, 0.0, 1.0]]

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            quantize(torch.zeros(1, 1), -0.5, gen())

    def test_stochastic_requires_generator(self):
        with pytest.raises(ValueError):
            quantize(torch.zeros(1, 1), 0.5)

    def test_determinism_with_seed(self):
        logits = torch.randn(6, 6, generator=gen(2))
        c1, p1 = quantize(logits, 0.7, gen(11))
        c2, p2 = quantize(logits, 0.7, gen(11))
        assert torch.equal(c1, c2) and torch.equal(p1, p2)

    def test_probs_monotone_in_logits(self):
        lo = torch.linspace(-4, 4, 33)
        _, probs = quantize(lo, 0.3, gen())
        assert (probs[1:] > probs[:-1]).all()


class TestStraightThrough:
    def test_forward_passes_code(self):
        out = straight_through(torch.tensor([0.9]), torch.tensor([1.0]))
        assert float(out) == 1.0

    def test_unit_gradient_on_probs(self):
        probs = torch.rand(3, 4, requires_grad=True)
        code = (probs > 0.5).double().detach()
        straight_through(probs, code).sum().backward()
        assert torch.equal(probs.grad, torch.ones(3, 4))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            straight_through(torch.zeros(2), torch.zeros(3))

    def test_end_to_end_matches_relaxed_finite_difference(self):
        # loss is linear in the quantizer output, so the straight-through
        # gradient must equal the finite-difference gradient of the same
        # loss evaluated on the probabilities
        g = gen(5)
        logits = torch.randn(4, 4, dtype=torch.float64, generator=g, requires_grad=True)
        weights = torch.randn(4, 4, dtype=torch.float64, generator=g)
        tau = 0.7

        probs = torch.sigmoid(logits / tau)
        code = bernoulli_sample(probs.detach(), gen(9))
        (weights * straight_through(probs, code)).sum().backward()

        def relaxed(lg):
            return float((weights * torch.sigmoid(lg / tau)).sum())

        eps = 1e-6
        for idx in range(logits.numel()):
            flat = logits.detach().clone().view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            f_plus = relaxed(flat.view(4, 4))
            flat[idx] = orig - eps
            f_minus = relaxed(flat.view(4, 4))
            fd = (f_plus - f_minus) / (2 * eps)
            assert rel_err(fd, float(logits.grad.view(-1)[idx])) <= 1e-4


class TestSoftXor:
    def test_identity_element(self):
        p = torch.rand(5, 5, generator=gen(1))
        assert torch.equal(soft_xor(p, torch.zeros(5, 5)), p)

    def test_negation(self):
        p = torch.rand(5, 5, generator=gen(2))
        assert torch.equal(soft_xor(p, torch.ones(5, 5)), 1 - p)

    def test_involution_exact(self):
        for seed in range(20):
            g = gen(seed)
            p = torch.rand(6, 6, generator=g)
            b = bernoulli_sample(torch.full((6, 6), 0.5), g)
            assert torch.equal(soft_xor(soft_xor(p, b), b), p)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_xor(torch.zeros(2), torch.zeros(3))


class TestBce:
    def test_perfect_prediction_clamped(self):
        target = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        loss = float(bce(target.clone(), target))
        assert abs(loss - (-math.log(1 - LOG_EPS))) < 1e-12
        # float32 path stays within rounding of the clamp value
        loss32 = float(bce(target.float().clone(), target.float()))
        assert loss32 < 2e-7

    def test_max_entropy(self):
        loss = float(bce(torch.full((3, 3), 0.5), torch.ones(3, 3)))
        assert abs(loss - math.log(2)) < 1e-7

    def test_single_bit_value(self):
        loss = float(bce(torch.tensor([[0.9]]), torch.tensor([[1.0]])))
        assert abs(loss - 0.105361) < 1e-6

    def test_nonnegative(self):
        for seed in range(10):
            g = gen(seed)
            p = torch.rand(4, 4, generator=g)
            t = bernoulli_sample(torch.full((4, 4), 0.5), g)
            assert float(bce(p, t)) >= 0.0
