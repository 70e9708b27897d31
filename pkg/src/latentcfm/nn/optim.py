from __future__ import annotations

import numpy as np

from .autograd import GradientError


class Adam:
    """Adam with bias-corrected moment estimates.

    ``params`` is a list of tensors or of ``(name, tensor)`` pairs; names make
    the state dict portable across processes.
    """

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        params = list(params)
        if params and not isinstance(params[0], tuple):
            params = [(str(i), p) for i, p in enumerate(params)]
        self.names = [n for n, _ in params]
        self.params = [p for _, p in params]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                raise GradientError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        step_size = self.lr / c1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= step_size * m / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        state = {"step_count": self.step_count, "lr": self.lr,
                 "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        arrays = {}
        for name, m, v in zip(self.names, self.m, self.v):
            arrays[f"m/{name}"] = m.copy()
            arrays[f"v/{name}"] = v.copy()
        return state, arrays

    def load_state_dict(self, state, arrays):
        self.step_count = int(state["step_count"])
        self.lr = float(state["lr"])
        self.beta1, self.beta2, self.eps = float(state["beta1"]), float(state["beta2"]), float(state["eps"])
        for i, name in enumerate(self.names):
            self.m[i][...] = arrays[f"m/{name}"]
            self.v[i][...] = arrays[f"v/{name}"]
