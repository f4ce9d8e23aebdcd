"""SGD with momentum, Adam, and AMSGrad over lists of parameter tensors.

All state lives in per-parameter numpy slots so it can round-trip through
checkpoints. Parameters with a ``None`` grad are skipped. Updates are plain
numpy and therefore deterministic.
"""

from __future__ import annotations

import numpy as np

from bqf import tensor as T
from bqf.tensor import Tensor

OPTIMIZER_KINDS = ("sgdm", "adam", "amsgrad")


class Optimizer:
    kind = "base"

    def __init__(self, params: list[Tensor], lr: float):
        if lr <= 0:
            raise ValueError(f"optimizer: lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
            p._backward_done = False

    def _check_grad(self, p: Tensor) -> np.ndarray:
        g = p.grad
        if T.is_checked() and not np.all(np.isfinite(g)):
            raise T.DomainError("optimizer: non-finite gradient")
        return g

    def step(self) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.state_dict()[k][:] = v


class SGDM(Optimizer):
    """v <- momentum * v + g;  p <- p - lr * v."""

    kind = "sgdm"

    def __init__(self, params, lr: float, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.v):
            if p.grad is None:
                continue
            g = self._check_grad(p)
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def state_dict(self):
        return {f"v{i}": v for i, v in enumerate(self.v)}

    def load_state_dict(self, state):
        for i, v in enumerate(self.v):
            v[:] = state[f"v{i}"]


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, p: Tensor, m: np.ndarray, v: np.ndarray) -> None:
        g = self._check_grad(p)
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * (g * g)
        mhat = m / (1 - self.beta1 ** self.t)
        vhat = v / (1 - self.beta2 ** self.t)
        p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            self._update(p, m, v)

    def state_dict(self):
        out = {"t": np.asarray(self.t)}
        for i in range(len(self.params)):
            out[f"m{i}"] = self.m[i]
            out[f"v{i}"] = self.v[i]
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for i in range(len(self.params)):
            self.m[i][:] = state[f"m{i}"]
            self.v[i][:] = state[f"v{i}"]


class AMSGrad(Adam):
    """Adam with a monotone elementwise maximum of the second moment."""

    kind = "amsgrad"

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params, lr, beta1, beta2, eps)
        self.vmax = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for p, m, v, vm in zip(self.params, self.m, self.v, self.vmax):
            if p.grad is None:
                continue
            g = self._check_grad(p)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            np.maximum(vm, v, out=vm)
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = vm / (1 - self.beta2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        out = super().state_dict()
        for i in range(len(self.params)):
            out[f"vmax{i}"] = self.vmax[i]
        return out

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for i in range(len(self.params)):
            self.vmax[i][:] = state[f"vmax{i}"]


def make_optimizer(kind: str, params: list[Tensor], lr: float,
                   momentum: float = 0.9) -> Optimizer:
    if kind == "sgdm":
        return SGDM(params, lr, momentum=momentum)
    if kind == "adam":
        return Adam(params, lr)
    if kind == "amsgrad":
        return AMSGrad(params, lr)
    raise ValueError(f"unknown optimizer kind {kind!r} (expected one of {OPTIMIZER_KINDS})")
