"""Adam with the warmup-then-linear-decay learning-rate schedule.

Parameters are any objects exposing ``values`` / ``grad`` ndarrays and a
``zero_grad()`` method (:class:`~occulift.fields.VoxelGrid` and the scalar
wrapper below both qualify).
"""

from __future__ import annotations

import numpy as np


class ScalarParam:
    """Trainable scalar (e.g. the logistic inverse-bandwidth s)."""

    def __init__(self, value: float):
        self.values = np.array([float(value)], dtype=np.float64)
        self.grad = np.zeros(1, dtype=np.float64)

    @property
    def item(self) -> float:
        return float(self.values[0])

    def accumulate(self, d_value: float):
        """Add dL/d(item) to the stored gradient."""
        self.grad[0] += d_value

    def zero_grad(self):
        self.grad.fill(0.0)


class LogScalarParam(ScalarParam):
    """Positive scalar trained in log space, so fixed-size optimizer steps
    scale the value geometrically (the inverse-bandwidth s must be able to
    grow by orders of magnitude over training)."""

    def __init__(self, value: float):
        if value <= 0:
            raise ValueError("LogScalarParam requires a positive value")
        super().__init__(np.log(float(value)))

    @property
    def item(self) -> float:
        return float(np.exp(self.values[0]))

    def accumulate(self, d_value: float):
        # chain rule through item = exp(x)
        self.grad[0] += d_value * self.item


def lr_schedule(step, total_steps, peak=1e-3, final=1e-5, warmup_frac=0.25):
    """Learning rate at ``step`` (1-based): linear 0 -> peak over the warmup
    window, then linear decay peak -> final.

    The reference schedule warms up over the first 5k of 20k iterations;
    shorter runs keep the same fraction.
    """
    warmup = max(1, int(round(total_steps * warmup_frac)))
    if step <= warmup:
        return peak * step / warmup
    if total_steps <= warmup:
        return peak
    frac = (step - warmup) / (total_steps - warmup)
    return peak + (final - peak) * min(frac, 1.0)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        # moment buffers follow the parameter dtype (float32 for grids)
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def step(self, lr=None):
        """One update from the accumulated gradients; ``lr`` overrides the
        stored rate for this step (used by schedules)."""
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            denom = np.sqrt(v / bc2)
            denom += self.eps
            p.values -= (lr / bc1) * m / denom

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
