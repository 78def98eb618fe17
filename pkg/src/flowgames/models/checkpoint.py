"""Checkpoint container: one .npz with a JSON meta record plus parameter,
optimiser and RNG-state arrays. No pickling; keys are canonically encoded."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .neural import NeuralModel
from .tabular import TabularModel

FORMAT_VERSION = 1


def rng_state_to_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def rng_from_json(blob: str) -> np.random.Generator:
    state = json.loads(blob)
    rng = np.random.default_rng()
    bg_cls = state["bit_generator"]
    if type(rng.bit_generator).__name__ != bg_cls:
        raise ValueError(f"unsupported bit generator {bg_cls}")
    rng.bit_generator.state = state
    return rng


def save_checkpoint(path, model, optimizer=None, rng=None, step: int = 0,
                    extra: dict | None = None) -> None:
    meta = {
        "version": FORMAT_VERSION,
        "kind": model.kind,
        "step": step,
        "extra": extra or {},
    }
    arrays: dict[str, np.ndarray] = {}
    if model.kind == "tabular":
        meta["num_players"] = model.num_players
        meta["action_space_size"] = model.action_space_size
        state = model.state_dict()
        meta["log_z"] = state.pop("log_z")
        state.pop("num_players")
        state.pop("action_space_size")
        for key, value in state.items():
            arrays[f"model.{key}"] = np.asarray(value)
    else:
        meta["arch"] = model.arch
        for key, value in model.state_dict().items():
            arrays[f"model.{key}"] = value
    if optimizer is not None:
        for key, value in optimizer.state_dict().items():
            arrays[f"opt.{key}"] = np.asarray(value)
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    arrays["meta"] = np.array(json.dumps(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    """Returns {model, opt_state, rng, step, extra, meta}; the optimizer state
    is raw (the caller rebuilds the optimizer it needs and loads into it)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        model_state = {}
        opt_state = {}
        for key in data.files:
            if key.startswith("model."):
                model_state[key[len("model."):]] = data[key]
            elif key.startswith("opt."):
                opt_state[key[len("opt."):]] = data[key]
    if meta["kind"] == "tabular":
        model = TabularModel(meta["num_players"], meta["action_space_size"])
        model_state["log_z"] = meta["log_z"]
        model.load_state(model_state)
    elif meta["kind"] == "neural":
        model = NeuralModel(meta["arch"])
        model.load_state(model_state)
    else:
        raise ValueError(f"unknown model kind {meta['kind']!r}")
    rng = None
    if "rng_state" in meta:
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
    return {
        "model": model,
        "opt_state": opt_state,
        "rng": rng,
        "step": meta["step"],
        "extra": meta["extra"],
        "meta": meta,
    }
