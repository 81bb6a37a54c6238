"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Apply one AdamW update in place.

    ``state`` is a dict carrying first/second moments and the step count; pass
    the same dict on every call.  Weight decay is decoupled: it scales the
    parameter directly instead of entering the moment estimates.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    b1, b2 = betas
    t = state.get("t", 0) + 1
    state["t"] = t
    ms = state.setdefault("m", [np.zeros_like(p.data) for p in params])
    vs = state.setdefault("v", [np.zeros_like(p.data) for p in params])
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.data.shape}")
        ms[i] = b1 * ms[i] + (1.0 - b1) * g
        vs[i] = b2 * vs[i] + (1.0 - b2) * (g * g)
        m_hat = ms[i] / c1
        v_hat = vs[i] / c2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


class AdamW:
    """Optimizer over parameter groups, each with its own learning rate.

    ``groups`` is a list of ``(params, lr)`` where params is a list of
    Tensors.  Parameters without a gradient after backward are skipped.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._states = [{} for _ in self.groups]

    @classmethod
    def single(cls, params, lr, **kw):
        return cls([(params, lr)], **kw)

    def step(self):
        for (params, lr), state in zip(self.groups, self._states):
            live = [(p, p.grad) for p in params if p.grad is not None]
            if not live:
                continue
            # moments are keyed per group member, so a partially present group
            # still has to update all-or-nothing to keep indices aligned
            if len(live) != len(params):
                live = [(p, p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params]
            adamw_step(
                [p for p, _ in live],
                [g for _, g in live],
                state,
                lr,
                betas=self.betas,
                eps=self.eps,
                weight_decay=self.weight_decay,
            )

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params:
                p.grad = None
