"""Adam optimizer and early stopping over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def adam_state(params: dict[str, Tensor]) -> dict:
    """Fresh first/second moment buffers shaped like the parameters."""
    return {
        "step": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on params and state.

    Parameters without an entry in `grads` (or with a None gradient) keep
    their value and moments untouched.
    """
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        dt = p.data.dtype
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / np.asarray(bc1, dtype=dt)
        vhat = v / np.asarray(bc2, dtype=dt)
        p.data -= np.asarray(lr, dtype=dt) * mhat / (np.sqrt(vhat) + np.asarray(eps, dtype=dt))


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = adam_state(params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


class EarlyStopper:
    """Stop after `patience` evaluations without improvement of a min-metric."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.bad_evals = 0

    def update(self, metric: float) -> bool:
        """Record one evaluation; returns True when this is a new best."""
        if metric < self.best:
            self.best = metric
            self.bad_evals = 0
            return True
        self.bad_evals += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_evals >= self.patience
