"""Parameter update rules.

Optimizers keep per-parameter slot state keyed by parameter name so the
state survives checkpointing, and they only touch parameters present in the
gradient map of the current step: masked branches therefore stay bitwise
untouched (no update, no decay) until restored.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, NumericError


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    kind = "adamw"

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay}

    def step(self, grads: dict[Tensor, np.ndarray]):
        for name, t in self.params:
            g = grads.get(t)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                self.m[name] = m
                self.v[name] = np.zeros_like(t.data)
                self.steps[name] = 0
            v = self.v[name]
            self.steps[name] += 1
            k = self.steps[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** k)
            vhat = v / (1.0 - self.beta2 ** k)
            t.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)
                       + self.lr * self.weight_decay * t.data)

    # -- checkpoint plumbing -------------------------------------------------
    def slot_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in self.m:
            out.append((f"m::{name}", self.m[name]))
            out.append((f"v::{name}", self.v[name]))
        return out

    def state_meta(self) -> dict:
        return {"steps": dict(self.steps)}

    def load_state(self, meta: dict, slots: dict[str, np.ndarray]):
        self.steps = {k: int(v) for k, v in meta["steps"].items()}
        self.m = {}
        self.v = {}
        for key, arr in slots.items():
            tag, name = key.split("::", 1)
            (self.m if tag == "m" else self.v)[name] = arr


class SGD:
    """Momentum SGD with coupled weight decay."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf: dict[str, np.ndarray] = {}

    kind = "sgd"

    def hyper(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay}

    def step(self, grads: dict[Tensor, np.ndarray]):
        for name, t in self.params:
            g = grads.get(t)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            b = self.buf.get(name)
            if b is None:
                b = np.zeros_like(t.data)
                self.buf[name] = b
            b *= self.momentum
            b += g
            t.data -= self.lr * b

    def slot_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(f"buf::{name}", arr) for name, arr in self.buf.items()]

    def state_meta(self) -> dict:
        return {}

    def load_state(self, meta: dict, slots: dict[str, np.ndarray]):
        self.buf = {key.split("::", 1)[1]: arr for key, arr in slots.items()}


def adamw_step(theta: np.ndarray, grad: np.ndarray, state: dict, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> np.ndarray:
    """Single-array update used by tests; state holds m, v, and step."""
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    if "m" not in state:
        state["m"] = np.zeros_like(theta)
        state["v"] = np.zeros_like(theta)
        state["step"] = 0
    state["step"] += 1
    k = state["step"]
    state["m"] = beta1 * state["m"] + (1 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1 - beta2) * grad * grad
    mhat = state["m"] / (1 - beta1 ** k)
    vhat = state["v"] / (1 - beta2 ** k)
    return theta - lr * mhat / (np.sqrt(vhat) + eps) - lr * weight_decay * theta


def make_optimizer(kind: str, params, hyper: dict):
    if kind == "adamw":
        return AdamW(params, **hyper)
    if kind == "sgd":
        return SGD(params, **hyper)
    raise ConfigError(f"unknown optimizer kind {kind!r}")
