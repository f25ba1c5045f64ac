import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from finepim.errors import ConfigError, NumericError
from finepim.optim import (SGD, AdamW, AdamWState, Lion, LionConfig, LionState, adamw_step, lion_step,
                           make_optimizer, sgd_step)
from finepim.tensor import Tensor


def reference_lion(w, g, mu, alpha, beta, gamma, delta):
    """Straight-line scalar loop, written independently of the vectorized step."""
    w_out, mu_out = [], []
    for wi, gi, mi in zip(w.ravel().tolist(), g.ravel().tolist(), mu.ravel().tolist()):
        c = alpha * mi + (1.0 - alpha) * gi
        s = 1.0 if c > 0 else (-1.0 if c < 0 else 0.0)
        w_out.append(wi - delta * (s + gamma * wi))
        mu_out.append(beta * mi + (1.0 - beta) * gi)
    return np.array(w_out).reshape(w.shape), np.array(mu_out).reshape(w.shape)


class TestLionOracle:
    def test_thousand_random_tuples(self):
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
            w, g, mu = (rng.normal(size=shape) * rng.choice([1e-3, 1.0, 1e3]) for _ in range(3))
            if rng.random() < 0.2:
                g[rng.random(shape) < 0.5] = 0.0
                mu[rng.random(shape) < 0.5] = 0.0
            cfg = LionConfig(alpha=rng.uniform(0.01, 0.99), beta=rng.uniform(0.01, 0.999),
                             gamma=rng.uniform(0, 0.5), delta=10 ** rng.uniform(-7, -1))
            new, state = lion_step({"p": w}, {"p": g}, LionState({"p": mu}), cfg)
            rw, rmu = reference_lion(w, g, mu, cfg.alpha, cfg.beta, cfg.gamma, cfg.delta)
            worst = max(worst, np.max(np.abs(new["p"] - rw)), np.max(np.abs(state.momentum["p"] - rmu)))
        assert worst < 1e-12
        assert time.perf_counter() - start < 1.0

    def test_scalar_hand_case(self):
        cfg = LionConfig(alpha=0.9, beta=0.99, gamma=0.1, delta=0.01)
        new, state = lion_step({"w": np.array(1.0)}, {"w": np.array(0.5)}, LionState.zeros_like({"w": 1.0}), cfg)
        assert abs(new["w"] - 0.989) < 1e-15
        assert abs(state.momentum["w"] - 0.005) < 1e-15

    def test_fixed_point(self):
        w = np.array([0.3, -2.0])
        new, state = lion_step({"w": w}, {"w": np.zeros(2)}, LionState.zeros_like({"w": w}), LionConfig())
        np.testing.assert_array_equal(new["w"], w)
        np.testing.assert_array_equal(state.momentum["w"], 0.0)

    def test_inputs_not_mutated(self, rng):
        w, g, mu = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
        copies = w.copy(), g.copy(), mu.copy()
        lion_step({"w": w}, {"w": g}, LionState({"w": mu}), LionConfig())
        for a, b in zip((w, g, mu), copies):
            np.testing.assert_array_equal(a, b)


class TestLionProperties:
    def test_uniform_magnitude(self, rng):
        """gamma = 0: every coordinate with c != 0 moves by exactly delta."""
        delta = 2.0 ** -10
        w = rng.integers(-64, 64, size=200) / 64.0
        g = rng.normal(size=200)
        mu = rng.normal(size=200)
        new, _ = lion_step({"w": w}, {"w": g}, LionState({"w": mu}), LionConfig(delta=delta))
        assert np.all(np.abs(new["w"] - w) == delta)

    def test_zero_c_does_not_move(self):
        w = np.array([0.5, 0.25])
        new, _ = lion_step({"w": w}, {"w": np.array([0.0, 1.0])}, LionState.zeros_like({"w": w}),
                           LionConfig(delta=0.125))
        np.testing.assert_array_equal(new["w"], [0.5, 0.125])

    @given(hnp.arrays(np.float64, 8, elements=st.floats(-1e3, 1e3, allow_subnormal=False)),
           st.floats(1e-6, 1e6))
    def test_positive_gradient_scaling(self, g, lam):
        w = np.linspace(-1, 1, 8)
        zero = LionState.zeros_like({"w": w})
        a, _ = lion_step({"w": w}, {"w": g}, zero, LionConfig(gamma=0.1))
        b, _ = lion_step({"w": w}, {"w": g * lam}, zero, LionConfig(gamma=0.1))
        np.testing.assert_array_equal(a["w"], b["w"])

    def test_momentum_recurrence_exact(self):
        """With beta = 1/2 the recurrence is exact in binary floating point."""
        g = np.array([1.0, -4.0, 0.5])
        state = LionState.zeros_like({"w": g})
        w = np.zeros(3)
        for t in range(1, 40):
            new, state = lion_step({"w": w}, {"w": g}, state, LionConfig(beta=0.5))
            assert np.array_equal(state.momentum["w"], g * (1 - 0.5 ** t))

    def test_momentum_recurrence_default_beta(self):
        g = np.array([0.3, -1.7])
        state = LionState.zeros_like({"w": g})
        for t in range(1, 200):
            _, state = lion_step({"w": np.zeros(2)}, {"w": g}, state, LionConfig())
        np.testing.assert_allclose(state.momentum["w"], g * (1 - 0.99 ** 199), rtol=1e-13)

    def test_one_state_array_per_parameter(self, rng):
        params = {"a": Tensor(rng.normal(size=(2, 3))), "b": Tensor(rng.normal(size=4))}
        lion, adamw = Lion(params), AdamW(params)
        for p in params.values():
            p.grad = np.ones(p.shape)
        lion.step()
        adamw.step()
        assert len(lion.state_arrays()) == len(params)
        assert len(adamw.state_arrays()) == 2 * len(params)
        for name, p in params.items():
            assert lion.state.momentum[name].shape == p.shape

    @pytest.mark.parametrize("kwargs", [{"alpha": 0.0}, {"alpha": 1.0}, {"beta": 1.0}, {"gamma": -0.1},
                                        {"delta": 0.0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            LionConfig(**kwargs)


class TestRejection:
    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_grad_leaves_state_untouched(self, bad):
        params = {"w": Tensor(np.array([1.0, 2.0]))}
        opt = Lion(params, LionConfig(delta=0.1))
        params["w"].grad = np.array([1.0, 1.0])
        opt.step()
        before_w, before_mu = params["w"].data.copy(), opt.state.momentum["w"].copy()
        params["w"].grad = np.array([1.0, bad])
        with pytest.raises(NumericError):
            opt.step()
        np.testing.assert_array_equal(params["w"].data, before_w)
        np.testing.assert_array_equal(opt.state.momentum["w"], before_mu)

    @pytest.mark.parametrize("step", ["sgd", "adamw"])
    def test_other_steps_reject(self, step):
        w, g = {"w": np.ones(2)}, {"w": np.array([np.nan, 0.0])}
        with pytest.raises(NumericError):
            if step == "sgd":
                sgd_step(w, g, 0.1)
            else:
                adamw_step(w, g, AdamWState())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            lion_step({"w": np.ones(2)}, {"w": np.ones(3)}, LionState(), LionConfig())


class TestSgd:
    def test_plain_step(self):
        new, _ = sgd_step({"w": np.array(1.0)}, {"w": np.array(2.0)}, 0.1)
        assert abs(new["w"] - 0.8) < 1e-15

    def test_zero_grad(self):
        new, _ = sgd_step({"w": np.array([3.0])}, {"w": np.zeros(1)}, 0.1, 0.9)
        np.testing.assert_array_equal(new["w"], [3.0])

    def test_two_momentum_steps(self):
        """v1 = g1, w1 = w0 - lr g1; v2 = 0.9 v1 + g2, w2 = w1 - lr v2."""
        w0, g1, g2, lr = 1.0, 2.0, -1.0, 0.1
        w, st_ = sgd_step({"w": np.array(w0)}, {"w": np.array(g1)}, lr, 0.9)
        w, st_ = sgd_step(w, {"w": np.array(g2)}, lr, 0.9, st_)
        v2 = 0.9 * g1 + g2
        assert abs(w["w"] - (w0 - lr * g1 - lr * v2)) < 1e-15
        assert abs(st_.velocity["w"] - v2) < 1e-15

    def test_invalid(self):
        with pytest.raises(ConfigError):
            SGD({}, lr=0.0)


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        new, state = adamw_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamWState(), wd=0.0)
        np.testing.assert_allclose(new["w"], [-5e-3], rtol=1e-6)
        assert state.t == 1

    def test_zero_grad_no_decay(self):
        new, _ = adamw_step({"w": np.array([2.0])}, {"w": np.zeros(1)}, AdamWState(), wd=0.0)
        np.testing.assert_array_equal(new["w"], [2.0])

    def test_pure_decay(self):
        new, _ = adamw_step({"w": np.array([2.0])}, {"w": np.zeros(1)}, AdamWState(), lr=0.1, wd=0.5)
        np.testing.assert_allclose(new["w"], [2.0 * (1 - 0.1 * 0.5)], atol=1e-15)


class TestFactory:
    @pytest.mark.parametrize("name,cls", [("lion", Lion), ("SGD", SGD), ("adamw", AdamW)])
    def test_known(self, name, cls):
        assert isinstance(make_optimizer(name, {}), cls)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            make_optimizer("rmsprop", {})

    def test_bad_hyperparameter(self):
        with pytest.raises(TypeError):
            make_optimizer("lion", {}, lr=0.1)

    def test_parameters_without_grad_are_skipped(self):
        params = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
        opt = make_optimizer("sgd", params, lr=0.5)
        params["a"].grad = np.ones(2)
        opt.step()
        np.testing.assert_array_equal(params["a"].data, 0.5)
        np.testing.assert_array_equal(params["b"].data, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_lion_step_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    w, g, mu = rng.normal(size=5), rng.normal(size=5), rng.normal(size=5)
    a = lion_step({"w": w}, {"w": g}, LionState({"w": mu}), LionConfig())
    b = lion_step({"w": w}, {"w": g}, LionState({"w": mu}), LionConfig())
    assert a[0]["w"].tobytes() == b[0]["w"].tobytes()
