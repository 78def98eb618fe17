"""Tabular policy/flow parameterisation.

Rows are allocated lazily per observation key. By default observations are
full state histories; board games share rows across histories that reach the
same position, which is sound because a position determines its entire
subtree and the jointly optimal policies are position functions.
"""

from __future__ import annotations

import json

import numpy as np

NEG_INF = -np.inf


class LazyRows:
    """Grow-on-demand row store keyed by hashable observation keys."""

    def __init__(self, width: int, name: str = "table"):
        self.width = width
        self.name = name
        self.index: dict = {}
        self.data = np.zeros((0, width), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, key) -> bool:
        return key in self.index

    def ensure(self, key) -> int:
        idx = self.index.get(key)
        if idx is None:
            idx = len(self.index)
            if idx >= self.data.shape[0]:
                grown = np.zeros((max(64, 2 * self.data.shape[0]), self.width))
                grown[: self.data.shape[0]] = self.data
                self.data = grown
            self.index[key] = idx
        return idx

    def ensure_many(self, keys) -> np.ndarray:
        return np.fromiter((self.ensure(k) for k in keys), dtype=np.int64, count=len(keys))

    def lookup(self, key) -> int | None:
        return self.index.get(key)

    def row(self, key) -> np.ndarray:
        idx = self.ensure(key)  # ensure first: it may rebind self.data
        return self.data[idx]

    def rows(self) -> np.ndarray:
        """View of the allocated rows."""
        return self.data[: len(self.index)]

    def state_dict(self) -> dict:
        return {
            "width": self.width,
            "keys": json.dumps([encode_key(k) for k in self.index.keys()]),
            "data": np.array(self.rows()),
        }

    def load_state(self, state: dict) -> None:
        keys = [decode_key(k) for k in json.loads(str(state["keys"]))]
        data = np.asarray(state["data"], dtype=np.float64)
        self.index = {k: i for i, k in enumerate(keys)}
        self.data = data.copy()


def encode_key(key):
    """Canonical JSON-compatible encoding of observation keys (no pickling)."""
    if key is None:
        return ["n"]
    if isinstance(key, bool):
        raise TypeError("boolean observation keys are not supported")
    if isinstance(key, int):
        return ["i", key]
    if isinstance(key, (bytes, bytearray)):
        return ["b", list(key)]
    if isinstance(key, tuple):
        return ["t", [encode_key(k) for k in key]]
    raise TypeError(f"cannot encode observation key of type {type(key)}")


def decode_key(enc):
    tag = enc[0]
    if tag == "n":
        return None
    if tag == "i":
        return enc[1]
    if tag == "b":
        return bytes(enc[1])
    if tag == "t":
        return tuple(decode_key(e) for e in enc[1])
    raise ValueError(f"bad key encoding {enc!r}")


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log softmax over legal entries; illegal entries are -inf."""
    logits = np.where(mask > 0, logits, NEG_INF)
    m = np.max(logits, axis=-1, keepdims=True)
    z = np.exp(logits - m)
    lse = m + np.log(np.sum(z, axis=-1, keepdims=True))
    return logits - lse


class TabularModel:
    """Per-player policy logits, optional per-player log flows and auxiliary
    distributions, and a learnable log partition scalar."""

    kind = "tabular"

    def __init__(self, num_players: int, action_space_size: int):
        self.num_players = num_players
        self.action_space_size = action_space_size
        self.logits = {
            p: LazyRows(action_space_size, f"logits{p}") for p in range(1, num_players + 1)
        }
        self.flows = {
            p: LazyRows(1, f"log_flow{p}") for p in range(1, num_players + 1)
        }
        self.q_logits = LazyRows(action_space_size, "q_logits")
        self.env_logits = LazyRows(action_space_size, "env_logits")
        self.log_z = 0.0

    # -- policy ------------------------------------------------------------

    def log_probs(self, player: int, obs, mask) -> np.ndarray:
        row = self.logits[player].row(obs)
        return masked_log_softmax(row[None, :], np.asarray(mask)[None, :])[0]

    def probs(self, player: int, obs, mask) -> np.ndarray:
        lp = self.log_probs(player, obs, mask)
        p = np.exp(lp)
        p[np.asarray(mask) == 0] = 0.0
        return p

    def log_probs_batch(self, player: int, row_ids: np.ndarray, masks: np.ndarray) -> np.ndarray:
        table = self.logits[player]
        return masked_log_softmax(table.data[row_ids], masks)

    def sample_action(self, rng: np.random.Generator, player: int, obs, mask,
                      temperature: float = 1.0) -> int:
        """Softmax sample at the given temperature; temperature 0 is argmax."""
        legal = np.flatnonzero(np.asarray(mask))
        if legal.size == 0:
            raise ValueError("no legal actions")
        row = self.logits[player].row(obs)[legal]
        if temperature == 0.0:
            return int(legal[np.argmax(row)])
        z = row / temperature
        z = z - z.max()
        p = np.exp(z)
        p /= p.sum()
        return int(legal[rng.choice(legal.size, p=p)])

    def argmax_action(self, player: int, obs, mask) -> int:
        return self.sample_action(None, player, obs, mask, temperature=0.0)

    # -- flows ---------------------------------------------------------------

    def log_flow(self, player: int, obs) -> float:
        return float(self.flows[player].row(obs)[0])

    def set_log_flow(self, player: int, obs, value: float) -> None:
        self.flows[player].row(obs)[0] = value

    # -- learned environment / Q distributions -------------------------------

    def q_log_probs(self, obs, mask) -> np.ndarray:
        row = self.q_logits.row(obs)
        return masked_log_softmax(row[None, :], np.asarray(mask)[None, :])[0]

    def env_log_probs(self, obs, mask) -> np.ndarray:
        row = self.env_logits.row(obs)
        return masked_log_softmax(row[None, :], np.asarray(mask)[None, :])[0]

    # -- persistence -----------------------------------------------------------

    def tables(self) -> dict[str, LazyRows]:
        out = {}
        for p, t in self.logits.items():
            out[f"logits{p}"] = t
        for p, t in self.flows.items():
            out[f"log_flow{p}"] = t
        out["q_logits"] = self.q_logits
        out["env_logits"] = self.env_logits
        return out

    def state_dict(self) -> dict:
        state = {"num_players": self.num_players,
                 "action_space_size": self.action_space_size,
                 "log_z": self.log_z}
        for name, table in self.tables().items():
            for field, value in table.state_dict().items():
                state[f"{name}.{field}"] = value
        return state

    def load_state(self, state: dict) -> None:
        self.log_z = float(state["log_z"])
        for name, table in self.tables().items():
            table.load_state({
                "width": state[f"{name}.width"],
                "keys": state[f"{name}.keys"],
                "data": state[f"{name}.data"],
            })
