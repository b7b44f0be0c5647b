"""
Adam with bias correction.
"""
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from d2hnet import config
from d2hnet.core.tensor import GradNode
from d2hnet.utils.validators import validate_same_shape


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = config.ADAM_BETA1,
    beta2: float = config.ADAM_BETA2,
    eps: float = config.ADAM_EPSILON,
) -> AdamState:
    """Update ``params`` in place and advance ``state``.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient (their moments still decay).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        validate_same_shape(p.shape, g.shape, f"adam_step {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    """Optimizer over a named set of GradNode leaves."""

    def __init__(
        self,
        params: Mapping[str, GradNode],
        beta1: float = config.ADAM_BETA1,
        beta2: float = config.ADAM_BETA2,
        eps: float = config.ADAM_EPSILON,
    ):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState.zeros_like({k: p.value for k, p in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        values = {k: p.value for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(values, grads, self.state, lr, self.beta1, self.beta2, self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"optim/m/{name}"] = self.state.m[name]
            out[f"optim/v/{name}"] = self.state.v[name]
        out["optim/step"] = np.array([self.state.step], dtype=np.int64)
        return out

    def load_state_dict(self, entries: Mapping[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            m = entries.get(f"optim/m/{name}")
            v = entries.get(f"optim/v/{name}")
            if m is None or v is None:
                continue
            validate_same_shape(m.shape, p.shape, f"optimizer state {name}")
            self.state.m[name] = m.astype(p.dtype, copy=True)
            self.state.v[name] = v.astype(p.dtype, copy=True)
        if "optim/step" in entries:
            self.state.step = int(entries["optim/step"][0])
