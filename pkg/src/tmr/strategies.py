"""Initial-weight and weight-update policies for replay buffer entries."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .text import example_features

log = logging.getLogger(__name__)

INIT_KINDS = ("average", "lsr", "linucb")
UPDATE_KINDS = ("loss_diff", "grad_norm", "grad_bound")


@dataclass(frozen=True)
class StrategyConfig:
    init_kind: str = "average"
    update_kind: str = "loss_diff"
    ridge: float = 1.0
    ucb_alpha: float = 1.0
    feature_dim: int = 32
    lsr_refit_every: int = 100

    def __post_init__(self):
        if self.init_kind not in INIT_KINDS:
            raise ValueError(f"init_kind must be one of {INIT_KINDS}, got {self.init_kind!r}")
        if self.update_kind not in UPDATE_KINDS:
            raise ValueError(f"update_kind must be one of {UPDATE_KINDS}, got {self.update_kind!r}")
        if not self.ridge > 0:
            raise ValueError("ridge must be > 0")
        if not self.ucb_alpha > 0:
            raise ValueError("ucb_alpha must be > 0")
        if self.feature_dim < 1 or self.lsr_refit_every < 1:
            raise ValueError("feature_dim and lsr_refit_every must be >= 1")


# -- initial weights -----------------------------------------------------------

def init_weight_average(stats):
    return stats["mean_weight"]


@dataclass
class LsrState:
    theta: Optional[np.ndarray] = None
    fitted_at_step: int = -1


class LsrFitError(ValueError):
    pass


def lsr_fit(entries, ridge, step=0):
    """Ridge least squares over ``(features, weight)`` pairs.

    Solves ``(X^T X + ridge I) theta = X^T r`` directly (LU), never forming an inverse.
    """
    if not entries:
        raise LsrFitError("need at least one entry to fit")
    X = np.array([f for f, _ in entries], dtype=np.float64)
    r = np.array([w for _, w in entries], dtype=np.float64)
    if not (np.isfinite(X).all() and np.isfinite(r).all()):
        raise LsrFitError("non-finite features or weights")
    A = X.T @ X + ridge * np.eye(X.shape[1])
    try:
        theta = np.linalg.solve(A, X.T @ r)
    except np.linalg.LinAlgError as exc:
        raise LsrFitError(str(exc)) from exc
    if not np.isfinite(theta).all():
        raise LsrFitError("solve produced non-finite coefficients")
    return LsrState(theta, step)


def lsr_init_weight(state, x, stats=None):
    if state.theta is None:
        log.info("LSR not fitted yet; using the buffer average")
        return init_weight_average(stats or {"mean_weight": 1.0})
    return max(0.0, float(state.theta @ x))


class LinUcbState:
    """Shared-arm LinUCB: ``A = I + sum x x^T``, ``b = sum reward * x``."""

    def __init__(self, dim):
        self.A = np.eye(dim)
        self.b = np.zeros(dim)

    def theta(self):
        return np.linalg.solve(self.A, self.b)


def linucb_init_weight(state, x, ucb_alpha):
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    Ainv_x = np.linalg.solve(state.A, x)
    theta = np.linalg.solve(state.A, state.b)
    score = theta @ x + ucb_alpha * math.sqrt(max(0.0, float(x @ Ainv_x)))
    return max(0.0, float(score))


def linucb_observe(state, x, reward):
    x = np.asarray(x, dtype=np.float64)
    state.A += np.outer(x, x)
    state.b += reward * x


# -- weight updates ------------------------------------------------------------

def update_weight_loss_diff(prev_loss, curr_loss):
    """|current - previous| loss, or None on an entry's first sampling."""
    if not math.isfinite(curr_loss):
        raise ValueError("current loss must be finite")
    if prev_loss is None:
        return None
    return abs(curr_loss - prev_loss)


def update_weight_grad_norm(norm):
    if not (norm >= 0.0) or not math.isfinite(norm):
        raise ValueError(f"gradient norm must be finite and >= 0, got {norm}")
    return float(norm)


def update_weight_grad_bound(logit_grads):
    g = np.asarray(logit_grads, dtype=np.float64)
    if not np.isfinite(g).all():
        raise ValueError("pre-activation gradients must be finite")
    return float(np.sqrt(g @ g))


class WeightPolicy:
    """Strategy state owned by the trainer: assigns and refreshes entry weights."""

    def __init__(self, cfg: StrategyConfig, vocab_size):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.lsr = LsrState()
        self.linucb = LinUcbState(cfg.feature_dim)
        self._reward_max = 0.0

    def features(self, example):
        return example_features(example.tokens, self.vocab_size, self.cfg.feature_dim)

    def maybe_refit(self, buffer, step):
        """Refit LSR on the buffer every ``lsr_refit_every`` steps."""
        if self.cfg.init_kind != "lsr" or buffer.live_count == 0:
            return False
        due = self.lsr.theta is None or step - self.lsr.fitted_at_step >= self.cfg.lsr_refit_every
        if not due:
            return False
        entries = [(self.features(e.example), e.weight) for e in buffer.live_entries()]
        self.lsr = lsr_fit(entries, self.cfg.ridge, step)
        return True

    def initial_weights(self, examples, stats):
        kind = self.cfg.init_kind
        if kind == "average":
            w = init_weight_average(stats)
            return [w] * len(examples)
        if kind == "lsr":
            return [lsr_init_weight(self.lsr, self.features(e), stats) for e in examples]
        return [linucb_init_weight(self.linucb, self.features(e), self.cfg.ucb_alpha)
                for e in examples]

    def observe_reward(self, example, loss_change):
        """Feed |delta L_D| (normalized by its running max) to LinUCB."""
        if self.cfg.init_kind != "linucb" or loss_change is None:
            return
        self._reward_max = max(self._reward_max, loss_change)
        reward = loss_change / self._reward_max if self._reward_max > 0 else 0.0
        linucb_observe(self.linucb, self.features(example), reward)
