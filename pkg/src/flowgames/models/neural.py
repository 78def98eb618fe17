"""Residual policy networks over board planes with one head per side and a
learnable log partition scalar. Dense blocks are the desk-scale default; a
convolutional variant is available for pattern-heavy boards. No normalisation
layers; leaky rectifiers throughout."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


DEFAULT_MLP = {"kind": "mlp", "width": 192, "blocks": 4}


class NeuralModel:
    kind = "neural"

    def __init__(self, arch: dict, seed: int = 0):
        arch = dict(arch)
        arch.setdefault("kind", "mlp")
        arch.setdefault("planes", 3)
        self.arch = arch
        self.rows = arch["rows"]
        self.cols = arch["cols"]
        self.planes = arch["planes"]
        self.action_space_size = arch["action_space"]
        self.num_players = 2
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        if arch["kind"] == "mlp":
            self._build_mlp(rng)
        elif arch["kind"] == "conv":
            self._build_conv(rng)
        else:
            raise ValueError(f"unknown architecture kind {arch['kind']!r}")
        self.params["log_z"] = Tensor(np.zeros(1))

    def _he(self, rng, fan_in, shape) -> np.ndarray:
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    def _build_mlp(self, rng) -> None:
        width = self.arch.get("width", DEFAULT_MLP["width"])
        blocks = self.arch.get("blocks", DEFAULT_MLP["blocks"])
        d = self.planes * self.rows * self.cols
        p = self.params
        p["stem.w"] = Tensor(self._he(rng, d, (d, width)))
        p["stem.b"] = Tensor(np.zeros(width))
        for i in range(blocks):
            p[f"block{i}.w1"] = Tensor(self._he(rng, width, (width, width)))
            p[f"block{i}.b1"] = Tensor(np.zeros(width))
            p[f"block{i}.w2"] = Tensor(self._he(rng, width, (width, width)))
            p[f"block{i}.b2"] = Tensor(np.zeros(width))
        for side in (1, 2):
            p[f"head{side}.w"] = Tensor(self._he(rng, width, (width, self.action_space_size)))
            p[f"head{side}.b"] = Tensor(np.zeros(self.action_space_size))

    def _build_conv(self, rng) -> None:
        filters = self.arch.get("filters", 32)
        blocks = self.arch.get("blocks", 3)
        p = self.params
        p["stem.w"] = Tensor(self._he(rng, self.planes * 9, (filters, self.planes, 3, 3)))
        p["stem.b"] = Tensor(np.zeros(filters))
        for i in range(blocks):
            for j in (1, 2):
                p[f"block{i}.w{j}"] = Tensor(self._he(rng, filters * 9, (filters, filters, 3, 3)))
                p[f"block{i}.b{j}"] = Tensor(np.zeros(filters))
        flat = filters * self.rows * self.cols
        for side in (1, 2):
            p[f"head{side}.w"] = Tensor(self._he(rng, flat, (flat, self.action_space_size)))
            p[f"head{side}.b"] = Tensor(np.zeros(self.action_space_size))

    # -- forward -------------------------------------------------------------

    def trunk(self, x: Tensor) -> Tensor:
        p = self.params
        blocks = self.arch.get("blocks", DEFAULT_MLP["blocks"])
        if self.arch["kind"] == "mlp":
            n = x.value.shape[0]
            h = ad.leaky_relu(ad.add(ad.matmul(ad.reshape(x, (n, -1)), p["stem.w"]), p["stem.b"]))
            for i in range(blocks):
                inner = ad.leaky_relu(ad.add(ad.matmul(h, p[f"block{i}.w1"]), p[f"block{i}.b1"]))
                inner = ad.add(ad.matmul(inner, p[f"block{i}.w2"]), p[f"block{i}.b2"])
                h = ad.leaky_relu(ad.add(h, inner))
            return h
        h = ad.leaky_relu(ad.conv2d(x, p["stem.w"], p["stem.b"]))
        for i in range(blocks):
            inner = ad.leaky_relu(ad.conv2d(h, p[f"block{i}.w1"], p[f"block{i}.b1"]))
            inner = ad.conv2d(inner, p[f"block{i}.w2"], p[f"block{i}.b2"])
            h = ad.leaky_relu(ad.add(h, inner))
        return ad.reshape(h, (x.value.shape[0], -1))

    def logits(self, side: int, planes: np.ndarray) -> Tensor:
        """Tape forward pass: planes (N, planes, rows, cols) -> logits (N, A)."""
        x = Tensor(planes)
        h = self.trunk(x)
        p = self.params
        return ad.add(ad.matmul(h, p[f"head{side}.w"]), p[f"head{side}.b"])

    def log_probs(self, side: int, planes: np.ndarray, masks: np.ndarray) -> Tensor:
        return ad.log_softmax_masked(self.logits(side, planes), masks)

    def logits_np(self, side: int, planes: np.ndarray) -> np.ndarray:
        """Inference-only logits (same computation, graph discarded)."""
        return self.logits(side, planes).value

    @property
    def log_z(self) -> float:
        return float(self.params["log_z"].value[0])

    @log_z.setter
    def log_z(self, value: float) -> None:
        self.params["log_z"].value[0] = value

    # -- persistence -----------------------------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.value for name, t in self.params.items()}

    def state_dict(self) -> dict:
        out = {f"param.{k}": v for k, v in self.param_arrays().items()}
        return out

    def load_state(self, state: dict) -> None:
        for name, tensor in self.params.items():
            tensor.value = np.asarray(state[f"param.{name}"], dtype=np.float64).copy()

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None
