"""SGD and (lazy, sparse-aware) Adam over named parameter arrays.

Table updates touch only the rows that received gradient in the step; Adam
moment rows for untouched indices are left as-is (lazy variant), which keeps
updates sparse and deterministic.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def make_optimizer(train_config, params):
    if train_config.optimizer == "adam":
        return AdamOptimizer(
            params,
            lr=train_config.learning_rate,
            beta1=train_config.adam_beta1,
            beta2=train_config.adam_beta2,
            eps=train_config.adam_eps,
        )
    if train_config.optimizer == "sgd":
        return SgdOptimizer(params, lr=train_config.learning_rate)
    raise ConfigError(f"unknown optimizer {train_config.optimizer!r}")


class SgdOptimizer:
    kind = "sgd"

    def __init__(self, params, lr):
        self.lr = lr
        self.t = 0

    def step(self, params, buf, scale=1.0):
        """Apply one update; returns {table_name: touched_row_indices}."""
        self.t += 1
        touched = {}
        for name in buf.dense_names():
            arr = params[name]
            arr -= self.lr * scale * buf.dense_grad(name)
        for name in buf.table_names():
            idx, g = buf.consolidated_rows(name)
            if len(idx):
                params[name][idx] -= self.lr * scale * g
                touched[name] = idx
        return touched

    def state_arrays(self):
        return []

    def load_state_arrays(self, arrays):
        if arrays:
            raise ConfigError("sgd optimizer carries no state arrays")


class AdamOptimizer:
    kind = "adam"

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._names = params.names()
        self.m = {n: np.zeros_like(params[n]) for n in self._names}
        self.v = {n: np.zeros_like(params[n]) for n in self._names}

    def _update(self, theta, m, v, g):
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        mhat = m / (1.0 - self.beta1**self.t)
        vhat = v / (1.0 - self.beta2**self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def step(self, params, buf, scale=1.0):
        """Apply one update; returns {table_name: touched_row_indices}."""
        self.t += 1
        touched = {}
        for name in buf.dense_names():
            self._update(params[name], self.m[name], self.v[name], scale * buf.dense_grad(name))
        for name in buf.table_names():
            idx, g = buf.consolidated_rows(name)
            if not len(idx):
                continue
            m_rows, v_rows = self.m[name][idx], self.v[name][idx]
            theta = params[name][idx]
            self._update(theta, m_rows, v_rows, scale * g)
            params[name][idx] = theta
            self.m[name][idx] = m_rows
            self.v[name][idx] = v_rows
            touched[name] = idx
        return touched

    def state_arrays(self):
        """Moment arrays in a fixed order for checkpoint serialization."""
        return [(f"m.{n}", self.m[n]) for n in self._names] + [
            (f"v.{n}", self.v[n]) for n in self._names
        ]

    def load_state_arrays(self, arrays):
        expected = [name for name, _ in self.state_arrays()]
        got = [name for name, _ in arrays]
        if expected != got:
            raise ConfigError("optimizer state arrays do not match the parameter registry")
        for name, arr in arrays:
            slot, pname = name.split(".", 1)
            target = self.m if slot == "m" else self.v
            target[pname][...] = arr
