"""
backend/optim.py
Adam over the named parameter arrays of a ModelParams.

Moments are keyed by parameter name. ``step`` returns updated arrays and
never mutates the ones it was given.
"""

import logging
from typing import Dict, Mapping

import numpy as np

logger = logging.getLogger(__name__)


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """One bias-corrected Adam update; returns the new arrays by name."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        updated = {}
        for name, value in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            delta = (self.lr / bc1) * self.m[name] / (np.sqrt(self.v[name] / bc2) + self.eps)
            updated[name] = (value - delta).astype(value.dtype, copy=False)
        return updated

    def decay(self, factor: float):
        self.lr *= factor

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
            "m": self.m,
            "v": self.v,
        }

    def load_state_dict(self, state: dict):
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state.get("m", {}).items()}
        self.v = {k: np.array(v) for k, v in state.get("v", {}).items()}
