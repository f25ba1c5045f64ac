"""LION, SGD and AdamW as pure step functions plus thin stateful wrappers.

The step functions take ``{name: ndarray}`` mappings and return fresh
arrays; inputs are never mutated. A step with any non-finite gradient raises
:class:`NumericError` before anything is computed.

LION, per step and per parameter::

    c     = alpha * mu + (1 - alpha) * g
    w_new = w - delta * (sign(c) + gamma * w)
    mu    = beta * mu + (1 - beta) * g

``w_new`` uses the momentum from before this step's update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, NumericError

Arrays = Mapping[str, np.ndarray]


def _check_finite(grads: Arrays) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")


def _check_shapes(params: Arrays, grads: Arrays) -> None:
    for name, w in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for {name}")
        if np.shape(grads[name]) != np.shape(w):
            raise ValueError(f"{name}: gradient shape {np.shape(grads[name])} != {np.shape(w)}")


# ---------------------------------------------------------------------------
# LION


@dataclass(frozen=True)
class LionConfig:
    alpha: float = 0.9
    beta: float = 0.99
    gamma: float = 0.0
    delta: float = 5e-6

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must be in (0, 1), got {self.beta}")
        if not self.gamma >= 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not self.delta > 0:
            raise ConfigError(f"delta must be > 0, got {self.delta}")


@dataclass
class LionState:
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Arrays) -> "LionState":
        return cls({k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()})


def lion_step(params: Arrays, grads: Arrays, state: LionState,
              config: LionConfig) -> tuple[dict[str, np.ndarray], LionState]:
    _check_shapes(params, grads)
    _check_finite(grads)
    a, b, gamma, delta = config.alpha, config.beta, config.gamma, config.delta
    new_params, new_mom = {}, {}
    for name, w in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        mu = state.momentum.get(name)
        if mu is None:
            mu = np.zeros_like(g)
        c = a * mu + (1 - a) * g
        new_params[name] = w - delta * (np.sign(c) + gamma * w)
        new_mom[name] = b * mu + (1 - b) * g
    return new_params, LionState(new_mom)


# ---------------------------------------------------------------------------
# SGD


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Arrays, grads: Arrays, lr: float, momentum: float = 0.0,
             state: SgdState | None = None) -> tuple[dict[str, np.ndarray], SgdState]:
    """Heavy-ball SGD: ``v = momentum * v + g``; ``w -= lr * v``."""
    _check_shapes(params, grads)
    _check_finite(grads)
    state = state or SgdState()
    new_params, new_vel = {}, {}
    for name, w in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        v = g if momentum == 0 else momentum * state.velocity.get(name, np.zeros_like(g)) + g
        new_params[name] = w - lr * v
        new_vel[name] = v
    return new_params, SgdState(new_vel if momentum else {})


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: Arrays, grads: Arrays, state: AdamWState, lr: float = 5e-3,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               wd: float = 0.01) -> tuple[dict[str, np.ndarray], AdamWState]:
    _check_shapes(params, grads)
    _check_finite(grads)
    b1, b2 = betas
    t = state.t + 1
    new_params, ms, vs = {}, {}, {}
    for name, w in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m.get(name, np.zeros_like(g)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(g)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = w - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * w)
        ms[name], vs[name] = m, v
    return new_params, AdamWState(ms, vs, t)


# ---------------------------------------------------------------------------
# wrappers over model parameters


class Optimizer:
    """Applies a step function to ``{name: Tensor}`` parameters in place."""

    name = "base"

    def __init__(self, params):
        self.params = params

    def _arrays(self):
        names = [n for n, p in self.params.items() if p.grad is not None]
        return ({n: self.params[n].data for n in names},
                {n: self.params[n].grad for n in names})

    def step(self) -> None:
        w, g = self._arrays()
        new = self._update(w, g)
        for name, arr in new.items():
            self.params[name].data = arr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _update(self, w, g):
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        pass


class Lion(Optimizer):
    name = "lion"

    def __init__(self, params, config: LionConfig = LionConfig()):
        super().__init__(params)
        self.config = config
        self.state = LionState.zeros_like({n: p.data for n, p in params.items()})

    def _update(self, w, g):
        new, st = lion_step(w, g, LionState({n: self.state.momentum[n] for n in w}), self.config)
        self.state.momentum.update(st.momentum)
        return new

    def state_arrays(self):
        return {f"optim/lion/momentum/{k}": v for k, v in self.state.momentum.items()}

    def load_state_arrays(self, arrays):
        prefix = "optim/lion/momentum/"
        for k, v in arrays.items():
            if k.startswith(prefix):
                self.state.momentum[k[len(prefix):]] = np.array(v)


class SGD(Optimizer):
    name = "sgd"

    def __init__(self, params, lr: float = 5e-4, momentum: float = 0.0):
        super().__init__(params)
        if lr <= 0 or not 0 <= momentum < 1:
            raise ConfigError("sgd needs lr > 0 and momentum in [0, 1)")
        self.lr, self.momentum = lr, momentum
        self.state = SgdState()

    def _update(self, w, g):
        new, st = sgd_step(w, g, self.lr, self.momentum, self.state)
        self.state.velocity.update(st.velocity)
        return new

    def state_arrays(self):
        return {f"optim/sgd/velocity/{k}": v for k, v in self.state.velocity.items()}


class AdamW(Optimizer):
    name = "adamw"

    def __init__(self, params, lr: float = 5e-3, betas=(0.9, 0.999), eps: float = 1e-8, wd: float = 0.01):
        super().__init__(params)
        if lr <= 0 or not all(0 <= b < 1 for b in betas) or eps <= 0 or wd < 0:
            raise ConfigError("invalid adamw hyperparameters")
        self.lr, self.betas, self.eps, self.wd = lr, tuple(betas), eps, wd
        self.state = AdamWState()

    def _update(self, w, g):
        new, st = adamw_step(w, g, self.state, self.lr, self.betas, self.eps, self.wd)
        self.state.m.update(st.m)
        self.state.v.update(st.v)
        self.state.t = st.t
        return new

    def state_arrays(self):
        out = {f"optim/adamw/m/{k}": v for k, v in self.state.m.items()}
        out.update({f"optim/adamw/v/{k}": v for k, v in self.state.v.items()})
        return out


def make_optimizer(name: str, params, **hyper) -> Optimizer:
    name = name.lower()
    if name == "lion":
        return Lion(params, LionConfig(**hyper))
    if name == "sgd":
        return SGD(params, **hyper)
    if name == "adamw":
        return AdamW(params, **hyper)
    raise ConfigError(f"unknown optimizer {name!r}")
