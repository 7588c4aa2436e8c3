"""
Optimizers over named leaf tensors.

Parameters are updated by rebinding `.data` to a fresh array, so closures
recorded by an earlier forward pass never see mutated values.
"""

import numpy as np

from tensor_engine import Tensor


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 decay_filter=None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        # names for which weight decay applies; None means all
        self.decay_filter = decay_filter
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.weight_decay and (self.decay_filter is None or self.decay_filter(name)):
                g = g + self.weight_decay * p.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            p.data = p.data - self.lr * v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k in self.velocity:
            self.velocity[k] = np.array(state[f"velocity/{k}"], dtype=np.float64)


class Adam:
    """Per-parameter step scaling: m/(sqrt(v)+eps) with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.array(float(self.t))}
        state.update({f"m/{k}": v for k, v in self.m.items()})
        state.update({f"v/{k}": v for k, v in self.v.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])
        for k in self.m:
            self.m[k] = np.array(state[f"m/{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"v/{k}"], dtype=np.float64)


OPTIMIZERS = {
    "sgd": SGD,
    "adam": Adam,
}


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0, **kwargs):
    if kind not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer '{kind}', expected one of {sorted(OPTIMIZERS)}")
    if kind == "sgd":
        return SGD(params, lr, momentum=kwargs.get("momentum", 0.9), weight_decay=weight_decay,
                   decay_filter=kwargs.get("decay_filter"))
    return Adam(params, lr, weight_decay=weight_decay)
