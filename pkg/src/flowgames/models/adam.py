"""Adam optimisation for dense parameter dicts and lazily grown row tables.

The log partition scalar gets its own learning rate (it wants a much larger
one than the policy parameters). Row tables use sparse moment updates: only
rows touched by the step decay/accumulate, with bias correction taken from
the global step counter, as is standard for embedding-style parameters.
"""

from __future__ import annotations

import numpy as np

from .tabular import LazyRows, TabularModel


class NonFiniteGradientError(RuntimeError):
    def __init__(self, path: str):
        super().__init__(f"non-finite gradient in parameter '{path}'")
        self.path = path


def _check_finite(grad, path: str) -> None:
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(path)


class AdamCore:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def alpha(self, lr: float) -> float:
        return lr * np.sqrt(1.0 - self.beta2 ** self.t) / (1.0 - self.beta1 ** self.t)

    def apply(self, param, grad, m, v, lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * np.square(grad)
        param -= self.alpha(lr) * m / (np.sqrt(v) + self.eps)


class DenseAdam(AdamCore):
    """Adam over a dict of named numpy parameters (neural models, logZ)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 lr_overrides: dict[str, float] | None = None, **kw):
        super().__init__(lr, **kw)
        self.params = params
        self.lr_overrides = lr_overrides or {}
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, grad in grads.items():
            _check_finite(grad, name)
            self.apply(self.params[name], grad, self.m[name], self.v[name],
                       self.lr_overrides.get(name, self.lr))

    def state_dict(self) -> dict:
        out = {"t": self.t}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.asarray(state[f"m.{k}"], dtype=np.float64).copy()
            self.v[k] = np.asarray(state[f"v.{k}"], dtype=np.float64).copy()


class TabularAdam(AdamCore):
    """Adam over a TabularModel: sparse row updates plus the logZ scalar."""

    def __init__(self, model: TabularModel, lr: float = 1e-3, lr_z: float = 5e-2, **kw):
        super().__init__(lr, **kw)
        self.model = model
        self.lr_z = lr_z
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.mz = 0.0
        self.vz = 0.0

    def _table_moments(self, name: str, table: LazyRows) -> tuple[np.ndarray, np.ndarray]:
        m, v = self.moments.get(name, (np.zeros((0, table.width)), np.zeros((0, table.width))))
        if m.shape[0] < table.data.shape[0]:
            grown_m = np.zeros_like(table.data)
            grown_m[: m.shape[0]] = m
            grown_v = np.zeros_like(table.data)
            grown_v[: v.shape[0]] = v
            m, v = grown_m, grown_v
        self.moments[name] = (m, v)
        return m, v

    def step(self, row_updates: dict[str, tuple[np.ndarray, np.ndarray]],
             grad_log_z: float | None = None) -> None:
        """row_updates maps table name -> (unique row ids, per-row gradients)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        tables = self.model.tables()
        for name, (rows, grads) in row_updates.items():
            if len(rows) == 0:
                continue
            _check_finite(grads, name)
            table = tables[name]
            m, v = self._table_moments(name, table)
            # fancy indexing copies, so gather, update, scatter back
            mr = b1 * m[rows] + (1 - b1) * grads
            vr = b2 * v[rows] + (1 - b2) * np.square(grads)
            m[rows] = mr
            v[rows] = vr
            table.data[rows] -= self.alpha(self.lr) * mr / (np.sqrt(vr) + self.eps)
        if grad_log_z is not None:
            _check_finite(np.asarray(grad_log_z), "log_z")
            b1, b2 = self.beta1, self.beta2
            self.mz = b1 * self.mz + (1 - b1) * grad_log_z
            self.vz = b2 * self.vz + (1 - b2) * grad_log_z ** 2
            self.model.log_z -= self.alpha(self.lr_z) * self.mz / (np.sqrt(self.vz) + self.eps)

    def state_dict(self) -> dict:
        out = {"t": self.t, "mz": self.mz, "vz": self.vz}
        for name, (m, v) in self.moments.items():
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.mz = float(state["mz"])
        self.vz = float(state["vz"])
        self.moments = {}
        for key in state:
            if key.startswith("m."):
                name = key[2:]
                self.moments[name] = (
                    np.asarray(state[f"m.{name}"], dtype=np.float64).copy(),
                    np.asarray(state[f"v.{name}"], dtype=np.float64).copy(),
                )
