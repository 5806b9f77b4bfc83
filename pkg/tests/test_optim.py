import math

import numpy as np
import pytest

from discgen import tensor as T
from discgen.errors import ContractError
from discgen.optim import AdamState, AdamW, adamw_step, cosine_lr


class TestAdamwStep:
    def test_single_step_hand_value(self):
        # p=0, g=1, lr=1e-4, wd=0: mhat=1, vhat=1 -> p = -lr/(1+eps)
        p = np.zeros((1, 1))
        state = AdamState.for_param(p)
        adamw_step(p, np.ones((1, 1)), state, lr=1e-4, weight_decay=0.0)
        assert p[0, 0] == pytest.approx(-1e-4, rel=1e-6)

    def test_decay_is_decoupled(self):
        # zero gradient, nonzero decay: parameter shrinks exactly by lr*wd,
        # moments stay zero
        p = np.full((1, 1), 2.0)
        state = AdamState.for_param(p)
        adamw_step(p, np.zeros((1, 1)), state, lr=0.1, weight_decay=0.5)
        assert p[0, 0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))
        assert np.all(state.m == 0) and np.all(state.v == 0)

    def test_zero_grad_zero_decay_unchanged(self):
        p = np.full((2, 2), 1.5)
        state = AdamState.for_param(p)
        adamw_step(p, np.zeros((2, 2)), state, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p, np.full((2, 2), 1.5))

    def test_two_steps_hand_computed(self):
        # constant gradient 1: bias correction keeps the step at ~lr
        p = np.zeros((1, 1))
        state = AdamState.for_param(p)
        adamw_step(p, np.ones((1, 1)), state, lr=1e-3, weight_decay=0.0)
        adamw_step(p, np.ones((1, 1)), state, lr=1e-3, weight_decay=0.0)
        assert p[0, 0] == pytest.approx(-2e-3, rel=1e-6)

    def test_shape_mismatch(self):
        p = np.zeros((2, 2))
        with pytest.raises(ContractError):
            adamw_step(p, np.zeros((1, 2)), AdamState.for_param(p), lr=0.1)

    def test_nonpositive_lr(self):
        p = np.zeros((1, 1))
        with pytest.raises(ContractError):
            adamw_step(p, np.ones((1, 1)), AdamState.for_param(p), lr=0.0)


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 3e-4) == pytest.approx(3e-4)
        assert cosine_lr(100, 100, 3e-4) == pytest.approx(0.0, abs=1e-20)
        assert cosine_lr(50, 100, 3e-4) == pytest.approx(1.5e-4)

    def test_quarter_point(self):
        expect = 3e-4 * 0.5 * (1 + math.cos(math.pi * 0.25))
        assert cosine_lr(25, 100, 3e-4) == pytest.approx(expect)

    def test_monotone_decreasing(self):
        vals = [cosine_lr(s, 1000, 1e-4) for s in range(0, 1001, 50)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_beyond_total_clamps_with_warning(self):
        with pytest.warns(UserWarning):
            assert cosine_lr(101, 100, 1e-4) == 0.0

    def test_negative_step(self):
        with pytest.raises(ContractError):
            cosine_lr(-1, 100, 1e-4)


class TestAdamWWrapper:
    def test_updates_only_params_with_grads(self):
        a = T.Tensor(np.ones((2, 2)), requires_grad=True)
        b = T.Tensor(np.ones((2, 2)), requires_grad=True)
        a.grad = np.ones((2, 2))
        opt = AdamW({"a": a, "b": b}, lr=0.01, weight_decay=0.0)
        opt.step()
        assert not np.array_equal(a.data, np.ones((2, 2)))
        np.testing.assert_array_equal(b.data, np.ones((2, 2)))

    def test_zero_grad_clears(self):
        a = T.Tensor(np.ones((1, 1)), requires_grad=True)
        a.grad = np.ones((1, 1))
        opt = AdamW({"a": a})
        opt.zero_grad()
        assert a.grad is None

    def test_deterministic_across_runs(self):
        def run():
            rng = np.random.default_rng(3)
            ps = {n: T.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
                  for n in ("x", "y")}
            opt = AdamW(ps, lr=1e-2)
            for _ in range(5):
                for p in ps.values():
                    p.grad = p.data * 0.1
                opt.step()
            return {n: p.data.copy() for n, p in ps.items()}
        r1, r2 = run(), run()
        for n in r1:
            assert np.array_equal(r1[n], r2[n])
