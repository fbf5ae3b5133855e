"""SGD with Nesterov momentum, weight decay, and per-parameter freeze masks.

Update order per step, matching the common deep-learning formulation:

    g <- grad + weight_decay * w
    v <- momentum * v + g
    w <- w - lr * (g + momentum * v)

A frozen mask (same shape as the parameter, 1 = live, 0 = frozen) forces
both the applied update and the stored velocity to zero at masked
positions, so pruned weights stay exactly zero for the rest of training.
"""

from __future__ import annotations

import numpy as np

from .errors import CondenseError
from .tensor import Tensor


class MissingGradient(CondenseError):
    """step() was called while some parameter had no gradient."""


class SGDNesterov:
    def __init__(self, params: list[Tensor], momentum: float = 0.9,
                 weight_decay: float = 1e-4, no_decay: list[Tensor] | None = None):
        if not params:
            raise CondenseError("optimizer needs at least one parameter")
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr = 0.0
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        # Masks alias arrays owned by layers; pruning mutates them in place
        # and the optimizer picks the change up on the next step.
        self._masks: list[np.ndarray | None] = [None] * len(self.params)
        skip = {id(p) for p in (no_decay or [])}
        self._decay = [0.0 if id(p) in skip else weight_decay for p in self.params]

    def attach_mask(self, param: Tensor, mask: np.ndarray):
        for i, p in enumerate(self.params):
            if p is param:
                if mask.shape != p.data.shape:
                    raise CondenseError(
                        f"mask shape {mask.shape} does not match parameter {p.data.shape}"
                    )
                self._masks[i] = mask
                return
        raise CondenseError("attach_mask: parameter is not managed by this optimizer")

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        mu = self.momentum
        for p, v, mask, wd in zip(self.params, self.velocity, self._masks, self._decay):
            if p.grad is None:
                raise MissingGradient(
                    f"parameter with shape {p.data.shape} has no gradient"
                )
            g = p.grad
            if wd:
                g = g + wd * p.data
            v *= mu
            v += g
            upd = g + mu * v
            if mask is not None:
                upd = upd * mask
                v *= mask
            p.data -= self.lr * upd

    # -- serialization -----------------------------------------------------

    def state_arrays(self, names: list[str]) -> dict[str, np.ndarray]:
        if len(names) != len(self.params):
            raise CondenseError("state_arrays: name count does not match parameters")
        return {f"optim/{n}": v for n, v in zip(names, self.velocity)}

    def load_state_arrays(self, names: list[str], state: dict[str, np.ndarray]):
        if len(names) != len(self.params):
            raise CondenseError("load_state_arrays: name count does not match parameters")
        for n, v in zip(names, self.velocity):
            key = f"optim/{n}"
            if key not in state:
                raise CondenseError(f"missing optimizer state {key!r}")
            src = np.asarray(state[key])
            if src.shape != v.shape:
                raise CondenseError(
                    f"optimizer state {key!r}: shape {src.shape} vs {v.shape}"
                )
            v[...] = src.astype(v.dtype, copy=False)
