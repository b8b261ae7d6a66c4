"""Adam with a linear learning-rate warmup."""

import numpy as np


class Adam:
    def __init__(self, params, lr=1e-3, warmup_steps=100, beta1=0.9, beta2=0.999, eps=1e-6):
        """``params`` maps names to Tensors; moments are kept per name."""
        if warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        self.params = params
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def lr_at(self, t):
        if self.warmup_steps == 0:
            return self.lr
        return self.lr * min(1.0, t / self.warmup_steps)

    def step(self, grads):
        """One update from ``grads`` (name -> array); missing names count as zero."""
        self.t += 1
        t = self.t
        lr = self.lr_at(t)
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, expected {p.data.shape}")
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr

    def state_arrays(self):
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array([float(self.t)])
        return out
