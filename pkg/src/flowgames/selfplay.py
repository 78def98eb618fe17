"""Self-play training loop: trajectory generation, FIFO replay buffer, and
optimisation epochs for the trajectory-balance and detailed-balance objective
families.

Each epoch generates K complete trajectories from the current policies (with
optional uniform-rollout mixing for extra off-policy coverage, which the
objectives tolerate by construction), pushes them into the FIFO buffer, then
runs L optimisation steps on batches sampled uniformly with replacement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .envs.boards import BoardGame, Outcome
from .envs.core import ENVIRONMENT, StateKey, Trajectory, TrajectoryStep, TreeEnv, TreeEnvError
from .envs.views import FixedOpponentView
from .models import autodiff as ad
from .models.adam import DenseAdam, TabularAdam
from .models.checkpoint import load_checkpoint, save_checkpoint
from .models.neural import NeuralModel
from .models.tabular import TabularModel, masked_log_softmax
from .objectives import make_rewards

OBJECTIVES = ("tb", "edb", "stoch", "naive")
OPPONENTS = ("self", "fixed-one-side", "fixed-both")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, batch_path=None):
        super().__init__(message)
        self.batch_path = batch_path


@dataclass
class TrainConfig:
    lam: float = 10.0
    objective: str = "tb"
    opponent: str = "self"
    model: object = "tabular"  # "tabular" or a neural arch dict
    batch_size: int = 512
    trajectories_per_epoch: int = 1024
    steps_per_epoch: int = 100
    epochs: int = 20
    buffer_capacity: int = 10240
    temperature: float = 1.5
    lr: float = 1e-3
    lr_z: float = 5e-2
    seed: int = 0
    explore_uniform_fraction: float = 0.0
    agent_player: int = 1
    branch_adjusted: bool = True
    view_obs: str = "history"
    learned_env: bool = False
    q_threshold: int = 32
    env_nll_weight: float = 1.0
    eval_games: int = 200
    eval_every: int = 1
    target_loss_rate: float | None = None
    target_flow_mae: float | None = None
    checkpoint_every: int | None = None

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.opponent not in OPPONENTS:
            raise ValueError(f"unknown opponent mode {self.opponent!r}")
        for name in ("batch_size", "trajectories_per_epoch", "steps_per_epoch",
                     "epochs", "buffer_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if not 0.0 <= self.explore_uniform_fraction <= 1.0:
            raise ValueError("explore_uniform_fraction must lie in [0, 1]")
        if self.objective != "tb" and self.model != "tabular":
            raise ValueError("flow-based objectives are implemented for tabular models")


class ReplayBuffer:
    """FIFO ring buffer; eviction is strictly oldest-first."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: list = []
        self._head = 0  # next slot to overwrite once full

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._head] = item
            self._head = (self._head + 1) % self.capacity

    def extend(self, items) -> None:
        for item in items:
            self.push(item)

    def sample(self, rng: np.random.Generator, n: int) -> list:
        idx = rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in idx]

    def snapshot(self) -> list:
        """Items oldest to newest."""
        return self._items[self._head:] + self._items[: self._head]


# -- compiled trajectories ------------------------------------------------------


@dataclass
class CompiledGame:
    """A complete two-player game with per-side training arrays."""

    history: list[int]
    outcome: Outcome
    log_reward: tuple[float, float]      # branch-adjusted
    log_b: tuple[float, float]
    sides: dict = field(default_factory=dict)
    # sides[p] = {"obs": list, "rows": np.ndarray | None, "masks": np.ndarray,
    #             "actions": np.ndarray, "planes": np.ndarray | None}

    def to_trajectory(self, env: TreeEnv) -> Trajectory:
        traj = Trajectory()
        cur = env.cursor()
        n = len(self.history)
        for i, a in enumerate(self.history):
            mask = tuple(cur.mask())
            player = cur.owner()
            cur.push(a)
            done = i == n - 1
            traj.append(TrajectoryStep(
                state=StateKey(self.history[:i]), mask=mask, curr_player=player,
                action=a, done=done,
                log_reward=self.log_reward if done else None,
            ))
        return traj


@dataclass
class CompiledFlow:
    """A single-agent rollout with flow/policy training arrays.

    Node categories: agent edges, environment states (expectation form), and
    the terminal. Environment states either carry fixed log transition
    probabilities or a reference to the opponent policy row that produces
    them at loss time (detached).
    """

    history: list[int]
    slot: int                             # model slot being trained
    agent: dict                           # rows/masks/actions/child arrays
    envs: dict                            # s_rows/child_rows/child_logp or opp refs
    terminal_row: int
    log_reward: float

    def length(self) -> int:
        return len(self.history)


def _game_log_rewards(outcome: Outcome, lam: float, masks_by_player, branch_adjusted=True):
    log_b = [0.0, 0.0]
    for p in (1, 2):
        for m in masks_by_player[p]:
            log_b[p - 1] += math.log(int(np.sum(m)))
    from .envs.boards import log_outcome_reward

    rewards = tuple(
        log_outcome_reward(outcome, p, lam) - (log_b[p - 1] if branch_adjusted else 0.0)
        for p in (1, 2)
    )
    return rewards, tuple(log_b)


# -- generation -------------------------------------------------------------------


def play_games_tabular(env: TreeEnv, model: TabularModel, k: int, temperature: float,
                       rng: np.random.Generator, lam: float,
                       uniform_fraction: float = 0.0) -> list[CompiledGame]:
    games = []
    for g in range(k):
        uniform = rng.random() < uniform_fraction
        cur = env.cursor()
        per_side = {1: {"obs": [], "masks": [], "actions": []},
                    2: {"obs": [], "masks": [], "actions": []}}
        history = []
        while not cur.is_terminal():
            player = cur.owner()
            obs = cur.obs_key()
            mask = np.array(cur.mask(), dtype=np.int8)
            if uniform or temperature is None:
                legal = np.flatnonzero(mask)
                action = int(legal[rng.integers(legal.size)])
                model.logits[player].ensure(obs)
            else:
                action = model.sample_action(rng, player, obs, mask, temperature)
            side = per_side[player]
            side["obs"].append(obs)
            side["masks"].append(mask)
            side["actions"].append(action)
            history.append(action)
            cur.push(action)
        outcome = cur.outcome()
        masks_by_player = {p: per_side[p]["masks"] for p in (1, 2)}
        log_reward, log_b = _game_log_rewards(outcome, lam, masks_by_player)
        sides = {}
        for p in (1, 2):
            side = per_side[p]
            sides[p] = {
                "obs": side["obs"],
                "rows": model.logits[p].ensure_many(side["obs"]),
                "masks": np.array(side["masks"], dtype=np.int8).reshape(len(side["obs"]), -1),
                "actions": np.array(side["actions"], dtype=np.int64),
                "planes": None,
            }
        games.append(CompiledGame(history, outcome, log_reward, log_b, sides))
    return games


def play_games_neural(env: BoardGame, model: NeuralModel, k: int, temperature: float,
                      rng: np.random.Generator, lam: float,
                      uniform_fraction: float = 0.0) -> list[CompiledGame]:
    """Generate K games in parallel: one batched forward pass per ply."""
    cursors = [env.cursor() for _ in range(k)]
    uniform = rng.random(k) < uniform_fraction
    data = [{1: {"masks": [], "actions": [], "planes": []},
             2: {"masks": [], "actions": [], "planes": []},
             "history": []} for _ in range(k)]
    active = list(range(k))
    ply = 0
    while active:
        player = 1 + (ply % 2)
        planes = np.stack([env.obs_planes(cursors[i].obs_key()) for i in active])
        masks = np.array([cursors[i].mask() for i in active], dtype=np.int8)
        logits = model.logits_np(player, planes)
        if temperature == 0.0:
            z = np.where(masks > 0, logits, -np.inf)
        else:
            gumbel = -np.log(-np.log(rng.random(logits.shape)))
            z = np.where(masks > 0, logits / temperature + gumbel, -np.inf)
        # uniform-exploration games ignore the policy entirely
        zu = np.where(masks > 0, -np.log(-np.log(rng.random(logits.shape))), -np.inf)
        actions = np.argmax(z, axis=1)
        actions_u = np.argmax(zu, axis=1)
        still = []
        for j, i in enumerate(active):
            a = int(actions_u[j] if uniform[i] else actions[j])
            d = data[i]
            d[player]["masks"].append(masks[j])
            d[player]["actions"].append(a)
            d[player]["planes"].append(planes[j].astype(np.float32))
            d["history"].append(a)
            cursors[i].push(a)
            if not cursors[i].is_terminal():
                still.append(i)
        active = still
        ply += 1

    games = []
    for i in range(k):
        d = data[i]
        outcome = cursors[i].outcome()
        masks_by_player = {p: d[p]["masks"] for p in (1, 2)}
        log_reward, log_b = _game_log_rewards(outcome, lam, masks_by_player)
        sides = {}
        for p in (1, 2):
            m = len(d[p]["actions"])
            sides[p] = {
                "obs": None,
                "rows": None,
                "masks": np.array(d[p]["masks"], dtype=np.int8).reshape(m, -1),
                "actions": np.array(d[p]["actions"], dtype=np.int64),
                "planes": np.stack(d[p]["planes"]) if m else np.zeros((0,) + env.plane_shape(), np.float32),
            }
        games.append(CompiledGame(d["history"], outcome, log_reward, log_b, sides))
    return games


def play_flow_rollouts(env: TreeEnv, model: TabularModel, k: int, temperature: float,
                       rng: np.random.Generator, slot: int = 1,
                       uniform_fraction: float = 0.0,
                       learned_env: bool = False) -> list[CompiledFlow]:
    """Rollouts of a single-agent (possibly stochastic) environment, compiled
    for the flow-based losses. Environment moves always follow the true
    transition distribution; the learned-environment flag only controls
    whether the loss later reads probabilities from the environment model."""
    out = []
    width = env.action_space_size

    def flow_row(flows, cur):
        """Flow row of the cursor's state; fresh terminal rows start at their
        known reward (the boundary condition the loss pins them to)."""
        obs = cur.obs_key()
        new = obs not in flows
        idx = flows.ensure(obs)
        if new and cur.is_terminal():
            flows.data[idx, 0] = cur.terminal_log_rewards()[0]
        return idx

    for g in range(k):
        uniform = rng.random() < uniform_fraction
        cur = env.cursor()
        history = []
        agent = {"s_rows": [], "c_rows": [], "logit_rows": [], "masks": [], "actions": []}
        envs = {"s_rows": [], "child_rows": [], "child_logp": [], "legal_pad": [],
                "env_rows": [], "masks": [], "taken_idx": []}
        flows = model.flows[slot]
        while not cur.is_terminal():
            owner = cur.owner()
            obs = cur.obs_key()
            actions = cur.legal_actions()
            if owner == ENVIRONMENT:
                probs = cur.env_probs()
                child_rows = []
                for a in actions:
                    cur.push(a)
                    child_rows.append(flow_row(flows, cur))
                    cur.pop()
                idx = int(rng.choice(len(actions), p=np.asarray(probs) / np.sum(probs)))
                row_pad = np.full(width, -1, dtype=np.int64)
                logp_pad = np.full(width, -np.inf)
                legal_pad = np.full(width, -1, dtype=np.int64)
                row_pad[: len(actions)] = child_rows
                logp_pad[: len(actions)] = np.log(probs)
                legal_pad[: len(actions)] = actions
                mask = np.zeros(width, dtype=np.int8)
                mask[list(actions)] = 1
                envs["s_rows"].append(flows.ensure(obs))
                envs["child_rows"].append(row_pad)
                envs["child_logp"].append(logp_pad)
                envs["legal_pad"].append(legal_pad)
                envs["masks"].append(mask)
                envs["taken_idx"].append(idx)
                envs["env_rows"].append(model.env_logits.ensure(obs) if learned_env else -1)
                action = actions[idx]
            else:
                mask = np.array(cur.mask(), dtype=np.int8)
                if uniform:
                    legal = np.flatnonzero(mask)
                    action = int(legal[rng.integers(legal.size)])
                    model.logits[slot].ensure(obs)
                else:
                    action = model.sample_action(rng, slot, obs, mask, temperature)
                s_row = flows.ensure(obs)
                cur.push(action)
                c_row = flow_row(flows, cur)
                cur.pop()
                agent["s_rows"].append(s_row)
                agent["c_rows"].append(c_row)
                agent["logit_rows"].append(model.logits[slot].ensure(obs))
                agent["masks"].append(mask)
                agent["actions"].append(action)
            history.append(action)
            cur.push(action)
        terminal_row = flow_row(flows, cur)
        log_reward = cur.terminal_log_rewards()[0]
        m_agent = len(agent["actions"])
        m_env = len(envs["s_rows"])
        agent_arrays = {
            "s_rows": np.array(agent["s_rows"], dtype=np.int64),
            "c_rows": np.array(agent["c_rows"], dtype=np.int64),
            "logit_rows": np.array(agent["logit_rows"], dtype=np.int64),
            "masks": np.array(agent["masks"], dtype=np.int8).reshape(m_agent, -1),
            "actions": np.array(agent["actions"], dtype=np.int64),
        }
        env_arrays = {
            "s_rows": np.array(envs["s_rows"], dtype=np.int64),
            "child_rows": (np.stack(envs["child_rows"]) if m_env
                           else np.zeros((0, width), dtype=np.int64)),
            "child_logp": (np.stack(envs["child_logp"]) if m_env
                           else np.zeros((0, width))),
            "legal_pad": (np.stack(envs["legal_pad"]) if m_env
                          else np.zeros((0, width), dtype=np.int64)),
            "masks": (np.stack(envs["masks"]) if m_env
                      else np.zeros((0, width), dtype=np.int8)),
            "taken_idx": np.array(envs["taken_idx"], dtype=np.int64),
            "env_rows": np.array(envs["env_rows"], dtype=np.int64),
            "learned": learned_env,
        }
        out.append(CompiledFlow(history, slot, agent_arrays, env_arrays,
                                terminal_row, log_reward))
    return out


def generate_trajectories(env: TreeEnv, model, k: int, temperature: float,
                          opponent: str = "self", rng: np.random.Generator | None = None,
                          lam: float = 10.0,
                          uniform_fraction: float = 0.0) -> list[Trajectory]:
    """K complete games as wire-format trajectories, with branch-adjusted log
    rewards attached. In fixed-opponent modes the designated side plays
    uniformly over its legal actions."""
    rng = rng or np.random.default_rng(0)
    if opponent == "self":
        if isinstance(model, NeuralModel):
            games = play_games_neural(env, model, k, temperature, rng, lam, uniform_fraction)
        else:
            games = play_games_tabular(env, model, k, temperature, rng, lam, uniform_fraction)
        return [g.to_trajectory(env) for g in games]
    # one side is a uniform player
    agent_player = 1 if opponent == "fixed-one-side" else 2
    trajs = []
    for _ in range(k):
        cur = env.cursor()
        traj = Trajectory()
        history = []
        masks_by_player = {1: [], 2: []}
        while not cur.is_terminal():
            player = cur.owner()
            mask = np.array(cur.mask(), dtype=np.int8)
            if player == agent_player and not isinstance(model, NeuralModel):
                action = model.sample_action(rng, player, cur.obs_key(), mask, temperature)
            elif player == agent_player:
                planes = env.obs_planes(cur.obs_key())[None]
                logits = model.logits_np(player, planes)[0]
                gumbel = -np.log(-np.log(rng.random(logits.shape)))
                z = np.where(mask > 0, logits / max(temperature, 1e-9) + gumbel, -np.inf)
                action = int(np.argmax(z))
            else:
                legal = np.flatnonzero(mask)
                action = int(legal[rng.integers(legal.size)])
            masks_by_player[player].append(mask)
            history.append(action)
            cur.push(action)
        log_reward, _ = _game_log_rewards(cur.outcome(), lam, masks_by_player)
        tmp = CompiledGame(history, cur.outcome(), log_reward, (0, 0), {})
        trajs.append(tmp.to_trajectory(env))
    return trajs


# -- trainers ------------------------------------------------------------------------


class TabularTBTrainer:
    def __init__(self, model: TabularModel, adam: TabularAdam):
        self.model = model
        self.adam = adam

    def loss_and_updates(self, batch: list[CompiledGame]):
        n = len(batch)
        model = self.model
        const = np.array([g.log_reward[0] + g.log_b[1] for g in batch])
        sums = {1: np.zeros(n), 2: np.zeros(n)}
        side_data = {}
        for p in (1, 2):
            rows = np.concatenate([g.sides[p]["rows"] for g in batch])
            masks = np.concatenate([g.sides[p]["masks"] for g in batch])
            actions = np.concatenate([g.sides[p]["actions"] for g in batch])
            tidx = np.concatenate(
                [np.full(len(g.sides[p]["actions"]), i) for i, g in enumerate(batch)]
            ).astype(np.int64)
            logp = masked_log_softmax(model.logits[p].data[rows], masks)
            taken = logp[np.arange(len(rows)), actions]
            np.add.at(sums[p], tidx, taken)
            side_data[p] = (rows, masks, actions, tidx, logp)
        residual = model.log_z + sums[1] - const - sums[2]
        loss = float(np.mean(residual ** 2))
        dr = 2.0 * residual / n
        updates = {}
        for p in (1, 2):
            rows, masks, actions, tidx, logp = side_data[p]
            coef = dr[tidx] if p == 1 else -dr[tidx]
            probs = np.exp(logp)
            probs[masks == 0] = 0.0
            g = -coef[:, None] * probs
            g[np.arange(len(rows)), actions] += coef
            uniq, inv = np.unique(rows, return_inverse=True)
            agg = np.zeros((len(uniq), model.action_space_size))
            np.add.at(agg, inv, g)
            updates[f"logits{p}"] = (uniq, agg)
        return loss, updates, float(dr.sum())

    def step(self, batch):
        loss, updates, gz = self.loss_and_updates(batch)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")
        self.adam.step(updates, grad_log_z=gz)
        return loss


class NeuralTBTrainer:
    def __init__(self, model: NeuralModel, adam: DenseAdam):
        self.model = model
        self.adam = adam

    def step(self, batch: list[CompiledGame]):
        n = len(batch)
        model = self.model
        const = np.array([g.log_reward[0] + g.log_b[1] for g in batch])
        sums = {}
        for p in (1, 2):
            planes = np.concatenate([g.sides[p]["planes"] for g in batch]).astype(np.float64)
            masks = np.concatenate([g.sides[p]["masks"] for g in batch])
            actions = np.concatenate([g.sides[p]["actions"] for g in batch])
            tidx = np.concatenate(
                [np.full(len(g.sides[p]["actions"]), i) for i, g in enumerate(batch)]
            ).astype(np.int64)
            lp = model.log_probs(p, planes, masks)
            taken = ad.gather(lp, actions)
            sums[p] = ad.segment_sum(taken, tidx, n)
        residual = ad.add(ad.sub(sums[1], sums[2]),
                          ad.add_const(model.params["log_z"], -const))
        loss = ad.mean(ad.square(residual))
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value}")
        loss.backward()
        grads = {name: t.grad for name, t in model.params.items() if t.grad is not None}
        self.adam.step(grads)
        model.zero_grads()
        return value


class TabularFlowTrainer:
    """Vectorised EDB / augmented-DB / environment-blind DB training for
    tabular models (known transition probabilities on environment states)."""

    def __init__(self, model: TabularModel, adam: TabularAdam, objective: str,
                 env_nll_weight: float = 1.0):
        self.model = model
        self.adam = adam
        self.objective = objective
        self.env_nll_weight = env_nll_weight

    def step(self, batch: list[CompiledFlow]):
        n = len(batch)
        model = self.model
        slot = batch[0].slot
        flows = model.flows[slot].data[:, 0]
        flow_grad_rows = []
        flow_grads = []
        loss = 0.0

        # agent edges
        rows = np.concatenate([t.agent["s_rows"] for t in batch])
        if self.objective == "naive":
            c_rows = np.concatenate([self._naive_next_rows(t) for t in batch])
        else:
            c_rows = np.concatenate([t.agent["c_rows"] for t in batch])
        logit_rows = np.concatenate([t.agent["logit_rows"] for t in batch])
        masks = np.concatenate([t.agent["masks"] for t in batch])
        actions = np.concatenate([t.agent["actions"] for t in batch])
        if len(rows):
            logp = masked_log_softmax(model.logits[slot].data[logit_rows], masks)
            taken = logp[np.arange(len(rows)), actions]
            r = flows[rows] + taken - flows[c_rows]
            loss += float(np.sum(r ** 2))
            coef = 2.0 * r / n
            flow_grad_rows += [rows, c_rows]
            flow_grads += [coef, -coef]
            probs = np.exp(logp)
            probs[masks == 0] = 0.0
            g = -coef[:, None] * probs
            g[np.arange(len(rows)), actions] += coef
            uniq, inv = np.unique(logit_rows, return_inverse=True)
            agg = np.zeros((len(uniq), model.action_space_size))
            np.add.at(agg, inv, g)
            logit_updates = (uniq, agg)
        else:
            logit_updates = None

        # environment states (ignored entirely by the environment-blind baseline)
        env_updates = None
        env_s = np.concatenate([t.envs["s_rows"] for t in batch])
        if len(env_s) and self.objective in ("edb", "stoch"):
            child_rows = np.concatenate([t.envs["child_rows"] for t in batch])
            taken_idx = np.concatenate([t.envs["taken_idx"] for t in batch])
            learned = batch[0].envs["learned"]
            if learned:
                env_rows = np.concatenate([t.envs["env_rows"] for t in batch])
                env_masks = np.concatenate([t.envs["masks"] for t in batch])
                legal_pad = np.concatenate([t.envs["legal_pad"] for t in batch])
                full_logp = masked_log_softmax(model.env_logits.data[env_rows], env_masks)
                child_logp = np.where(
                    legal_pad >= 0,
                    np.take_along_axis(full_logp, np.clip(legal_pad, 0, None), axis=1),
                    -np.inf,
                )
                # maximum-likelihood update for the environment model itself
                taken_action = np.take_along_axis(legal_pad, taken_idx[:, None], axis=1)[:, 0]
                probs_env = np.exp(full_logp)
                probs_env[env_masks == 0] = 0.0
                g_env = probs_env * (self.env_nll_weight / n)
                g_env[np.arange(len(env_rows)), taken_action] -= self.env_nll_weight / n
                uniq_e, inv_e = np.unique(env_rows, return_inverse=True)
                agg_e = np.zeros((len(uniq_e), model.action_space_size))
                np.add.at(agg_e, inv_e, g_env)
                env_updates = (uniq_e, agg_e)
            else:
                child_logp = np.concatenate([t.envs["child_logp"] for t in batch])
            if self.objective == "edb":
                safe_rows = np.where(child_rows < 0, 0, child_rows)
                vals = child_logp + flows[safe_rows]
                m = np.max(vals, axis=1, keepdims=True)
                lse = (m + np.log(np.sum(np.exp(vals - m), axis=1, keepdims=True)))[:, 0]
                r = flows[env_s] - lse
                loss += float(np.sum(r ** 2))
                coef = 2.0 * r / n
                flow_grad_rows.append(env_s)
                flow_grads.append(coef)
                w = np.exp(vals - lse[:, None])
                valid = child_rows >= 0
                flow_grad_rows.append(safe_rows[valid])
                flow_grads.append((-coef[:, None] * w)[valid])
            else:  # augmented-graph balance on the taken environment edge
                k = np.arange(len(env_s))
                c_taken = child_rows[k, taken_idx]
                lp_taken = child_logp[k, taken_idx]
                r = flows[env_s] + lp_taken - flows[c_taken]
                loss += float(np.sum(r ** 2))
                coef = 2.0 * r / n
                flow_grad_rows += [env_s, c_taken]
                flow_grads += [coef, -coef]

        # terminal pinning
        t_rows = np.array([t.terminal_row for t in batch], dtype=np.int64)
        t_rewards = np.array([t.log_reward for t in batch])
        r = flows[t_rows] - t_rewards
        loss += float(np.sum(r ** 2))
        flow_grad_rows.append(t_rows)
        flow_grads.append(2.0 * r / n)

        loss /= n
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")

        all_rows = np.concatenate(flow_grad_rows)
        all_grads = np.concatenate(flow_grads)
        uniq, inv = np.unique(all_rows, return_inverse=True)
        agg = np.zeros(len(uniq))
        np.add.at(agg, inv, all_grads)
        updates = {f"log_flow{slot}": (uniq, agg[:, None])}
        if logit_updates is not None:
            updates[f"logits{slot}"] = logit_updates
        if env_updates is not None:
            updates["env_logits"] = env_updates
        self.adam.step(updates)
        return loss

    def _naive_next_rows(self, t: CompiledFlow) -> np.ndarray:
        """For the environment-blind baseline: balance each agent state
        against the next agent state (or terminal) actually reached."""
        rows = list(t.agent["s_rows"][1:]) + [t.terminal_row]
        return np.array(rows, dtype=np.int64)


# -- action selection and evaluation --------------------------------------------------


def select_action(model, env: TreeEnv, cursor, temperature: float,
                  rng: np.random.Generator | None) -> int:
    """One action from the model's policy for the side to move; temperature 0
    is the argmax rule used at evaluation time."""
    player = cursor.owner()
    mask = np.array(cursor.mask(), dtype=np.int8)
    if isinstance(model, NeuralModel):
        planes = env.obs_planes(cursor.obs_key())[None]
        logits = model.logits_np(player, planes)[0]
        if temperature == 0.0:
            z = np.where(mask > 0, logits, -np.inf)
            return int(np.argmax(z))
        gumbel = -np.log(-np.log(rng.random(logits.shape)))
        z = np.where(mask > 0, logits / temperature + gumbel, -np.inf)
        return int(np.argmax(z))
    return model.sample_action(rng, player, cursor.obs_key(), mask, temperature)


def evaluate_vs_uniform(env: TreeEnv, model, games: int, rng: np.random.Generator,
                        temperature: float = 0.0) -> dict:
    """Color-balanced greedy games against the uniform agent. Also tracks how
    often the model converts an immediately winning move when one exists."""
    wins = draws = losses = 0
    win_chances = took_win = 0
    for g in range(games):
        model_side = 1 if g % 2 == 0 else 2
        cur = env.cursor()
        while not cur.is_terminal():
            player = cur.owner()
            if player == model_side:
                winning = _immediate_wins(env, cur, player)
                action = select_action(model, env, cur, temperature, rng)
                if winning:
                    win_chances += 1
                    if action in winning:
                        took_win += 1
            else:
                legal = cur.legal_actions()
                action = int(legal[rng.integers(len(legal))])
            cur.push(action)
        outcome = cur.outcome()
        if outcome is Outcome.DRAW:
            draws += 1
        elif outcome.value == model_side:
            wins += 1
        else:
            losses += 1
    return {
        "games": games,
        "wins": wins,
        "draws": draws,
        "losses": losses,
        "loss_rate": losses / games if games else 0.0,
        "immediate_win_conversion": took_win / win_chances if win_chances else None,
    }


def _immediate_wins(env: TreeEnv, cur, player: int) -> set[int]:
    wins = set()
    for a in cur.legal_actions():
        cur.push(a)
        if cur.is_terminal():
            out = cur.outcome()
            if out is not None and out.value == player:
                wins.add(a)
        cur.pop()
    return wins


# -- the training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    metrics: list
    steps: int
    epochs_run: int
    stopped_early: bool
    checkpoint_path: str | None
    final_eval: dict | None


def _build_model(env: TreeEnv, config: TrainConfig):
    if config.model == "tabular":
        players = 2 if (config.objective == "tb" or env.num_players == 2) else 1
        return TabularModel(players, env.action_space_size)
    arch = dict(config.model)
    arch.setdefault("rows", env.rows)
    arch.setdefault("cols", env.cols)
    arch.setdefault("action_space", env.action_space_size)
    return NeuralModel(arch, seed=config.seed)


def _build_optimizer(model, config: TrainConfig):
    if isinstance(model, TabularModel):
        return TabularAdam(model, lr=config.lr, lr_z=config.lr_z)
    return DenseAdam(model.param_arrays(), lr=config.lr,
                     lr_overrides={"log_z": config.lr_z})


def _generate(env, model, config: TrainConfig, rng, k: int):
    if config.objective == "tb":
        if isinstance(model, NeuralModel):
            return play_games_neural(env, model, k, config.temperature, rng,
                                     config.lam, config.explore_uniform_fraction)
        return play_games_tabular(env, model, k, config.temperature, rng,
                                  config.lam, config.explore_uniform_fraction)
    # flow objectives: single-agent views
    if env.num_players == 1:
        return play_flow_rollouts(env, model, k, config.temperature, rng, 1,
                                  config.explore_uniform_fraction,
                                  learned_env=getattr(config, "learned_env", False))
    if config.opponent == "fixed-both":
        half = k // 2
        first = play_flow_rollouts(
            FixedOpponentView(env, 1, config.lam, config.branch_adjusted,
                              obs=config.view_obs), model,
            half, config.temperature, rng, 1, config.explore_uniform_fraction)
        second = play_flow_rollouts(
            FixedOpponentView(env, 2, config.lam, config.branch_adjusted,
                              obs=config.view_obs), model,
            k - half, config.temperature, rng, 2, config.explore_uniform_fraction)
        return first + second
    view = FixedOpponentView(env, config.agent_player, config.lam, config.branch_adjusted,
                             obs=config.view_obs)
    slot = config.agent_player
    return play_flow_rollouts(view, model, k, config.temperature, rng, slot,
                              config.explore_uniform_fraction)


def _flow_mae_metrics(mae_env, model, exact_table, mae_states, slot: int = 1):
    from .evaluation import flow_mae

    node_mae, edge_mae = flow_mae(mae_env, model, exact_table, mae_states, player=slot)
    return {"flow_mae": node_mae, "edge_flow_mae": edge_mae}


def train(env: TreeEnv, config: TrainConfig, out_dir=None, exact_table=None,
          mae_states=None, resume_from=None) -> TrainResult:
    """Run the training loop. Emits a line-delimited JSON metrics stream when
    ``out_dir`` is given, checkpoints at epoch boundaries, and can resume a
    run exactly (model, optimiser, RNG and buffer state are all persisted)."""
    config.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        loaded = load_checkpoint(resume_from)
        model = loaded["model"]
        rng = loaded["rng"]
        global_step = loaded["step"]
        start_epoch = loaded["extra"]["epoch"]
        optimizer = _build_optimizer(model, config)
        optimizer.load_state(loaded["opt_state"])
        buffer = ReplayBuffer(config.buffer_capacity)
        buffer_path = Path(resume_from).with_suffix(".buffer.jsonl")
        if buffer_path.exists():
            buffer.extend(_load_buffer(env, model, config, buffer_path))
    else:
        model = _build_model(env, config)
        optimizer = _build_optimizer(model, config)
        rng = np.random.default_rng(config.seed)
        buffer = ReplayBuffer(config.buffer_capacity)

    trainer = _build_trainer(model, optimizer, config)
    metrics: list[dict] = []
    stream = open(out_dir / "metrics.jsonl", "a") if out_dir is not None else None

    def emit(record):
        metrics.append(record)
        if stream is not None:
            stream.write(json.dumps(record) + "\n")
            stream.flush()

    stopped = False
    final_eval = None
    checkpoint_path = str(out_dir / "checkpoint.npz") if out_dir is not None else None
    epochs_run = start_epoch
    try:
        for epoch in range(start_epoch, config.epochs):
            trajectories = _generate(env, model, config, rng, config.trajectories_per_epoch)
            buffer.extend(trajectories)
            for _ in range(config.steps_per_epoch):
                batch = buffer.sample(rng, config.batch_size)
                try:
                    loss = trainer.step(batch)
                except TrainingDiverged as err:
                    if out_dir is not None:
                        bad = out_dir / "diverged_batch.jsonl"
                        _dump_batch(env, batch, bad)
                        raise TrainingDiverged(str(err), str(bad)) from err
                    raise
                global_step += 1
                emit({"type": "step", "epoch": epoch, "step": global_step,
                      "loss": loss, "log_z": float(model.log_z)})
            epochs_run = epoch + 1

            record = {"type": "epoch", "epoch": epoch, "step": global_step,
                      "log_z": float(model.log_z)}
            if env.num_players == 2 and config.eval_games > 0 and (
                    (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1):
                final_eval = evaluate_vs_uniform(env, model, config.eval_games, rng)
                record.update(final_eval)
            if exact_table is not None and mae_states is not None:
                mae_env = env
                if env.num_players == 2 and config.objective != "tb":
                    mae_env = FixedOpponentView(env, config.agent_player, config.lam,
                                                config.branch_adjusted, obs=config.view_obs)
                record.update(_flow_mae_metrics(mae_env, model, exact_table, mae_states,
                                                slot=config.agent_player))
            emit(record)

            if checkpoint_path is not None and (
                    config.checkpoint_every is None
                    or (epoch + 1) % config.checkpoint_every == 0
                    or epoch == config.epochs - 1):
                save_checkpoint(checkpoint_path, model, optimizer, rng,
                                step=global_step, extra={"epoch": epoch + 1})
                _dump_batch(env, buffer.snapshot(),
                            Path(checkpoint_path).with_suffix(".buffer.jsonl"))

            if (config.target_loss_rate is not None and final_eval is not None
                    and final_eval["loss_rate"] <= config.target_loss_rate):
                stopped = True
                break
            if (config.target_flow_mae is not None and "flow_mae" in record
                    and record["flow_mae"] <= config.target_flow_mae):
                stopped = True
                break
    finally:
        if stream is not None:
            stream.close()

    if out_dir is not None:
        save_checkpoint(checkpoint_path, model, optimizer, rng,
                        step=global_step, extra={"epoch": epochs_run})
        _dump_batch(env, buffer.snapshot(),
                    Path(checkpoint_path).with_suffix(".buffer.jsonl"))
    return TrainResult(model, metrics, global_step, epochs_run, stopped,
                       checkpoint_path, final_eval)


def _build_trainer(model, optimizer, config: TrainConfig):
    if config.objective == "tb":
        if isinstance(model, NeuralModel):
            return NeuralTBTrainer(model, optimizer)
        return TabularTBTrainer(model, optimizer)
    return TabularFlowTrainer(model, optimizer, config.objective, config.env_nll_weight)


def _dump_batch(env, batch, path) -> None:
    """Internal buffer/batch dump: the wire trajectory plus the slot tag the
    rollout trains (games have no slot)."""
    from .envs.core import trajectory_to_json

    with open(path, "w") as fh:
        for item in batch:
            if isinstance(item, CompiledGame):
                line = {"slot": None, "steps": json.loads(trajectory_to_json(item.to_trajectory(env)))}
            else:
                traj = _flow_to_trajectory(env, item)
                line = {"slot": item.slot, "steps": json.loads(trajectory_to_json(traj))}
            fh.write(json.dumps(line) + "\n")


def _flow_to_trajectory(env, compiled: CompiledFlow) -> Trajectory:
    traj = Trajectory()
    cur = env.cursor()
    n = len(compiled.history)
    for i, a in enumerate(compiled.history):
        mask = tuple(cur.mask())
        owner = cur.owner()
        cur.push(a)
        done = i == n - 1
        traj.append(TrajectoryStep(
            state=StateKey(compiled.history[:i]), mask=mask, curr_player=owner,
            action=a, done=done,
            log_reward=(compiled.log_reward,) if done else None,
        ))
    return traj


def _load_buffer(env, model, config: TrainConfig, path) -> list:
    """Rebuild compiled buffer entries from the tagged trajectory dump."""
    items = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            history = [s["action"] for s in rec["steps"]]
            if config.objective == "tb":
                items.append(_compile_game_from_history(env, model, history, config))
            else:
                slot = rec["slot"] if rec["slot"] is not None else 1
                base = env
                if env.num_players == 2:
                    base = FixedOpponentView(env, slot, config.lam, config.branch_adjusted,
                                             obs=config.view_obs)
                items.append(_compile_flow_from_history(base, model, history, slot, config))
    return items


def _compile_game_from_history(env, model, history, config: TrainConfig) -> CompiledGame:
    cur = env.cursor()
    per_side = {1: {"obs": [], "masks": [], "actions": [], "planes": []},
                2: {"obs": [], "masks": [], "actions": [], "planes": []}}
    for a in history:
        player = cur.owner()
        side = per_side[player]
        side["obs"].append(cur.obs_key())
        side["masks"].append(np.array(cur.mask(), dtype=np.int8))
        side["actions"].append(a)
        if isinstance(model, NeuralModel):
            side["planes"].append(env.obs_planes(cur.obs_key()).astype(np.float32))
        cur.push(a)
    outcome = cur.outcome()
    masks_by_player = {p: per_side[p]["masks"] for p in (1, 2)}
    log_reward, log_b = _game_log_rewards(outcome, config.lam, masks_by_player)
    sides = {}
    for p in (1, 2):
        side = per_side[p]
        m = len(side["actions"])
        sides[p] = {
            "obs": side["obs"],
            "rows": (model.logits[p].ensure_many(side["obs"])
                     if isinstance(model, TabularModel) else None),
            "masks": np.array(side["masks"], dtype=np.int8).reshape(m, -1),
            "actions": np.array(side["actions"], dtype=np.int64),
            "planes": (np.stack(side["planes"]) if side["planes"]
                       else np.zeros((0,) + env.plane_shape(), np.float32))
            if isinstance(model, NeuralModel) else None,
        }
    return CompiledGame(history, outcome, log_reward, log_b, sides)


def _compile_flow_from_history(view, model, history, slot, config: TrainConfig) -> CompiledFlow:
    """Recompile a flow rollout by replaying its history (deterministic)."""
    rollouts = _replay_flow(view, model, history, slot, config)
    return rollouts


def _replay_flow(env, model, history, slot, config) -> CompiledFlow:
    width = env.action_space_size
    cur = env.cursor()
    agent = {"s_rows": [], "c_rows": [], "logit_rows": [], "masks": [], "actions": []}
    envs = {"s_rows": [], "child_rows": [], "child_logp": [], "legal_pad": [],
            "env_rows": [], "masks": [], "taken_idx": []}
    flows = model.flows[slot]
    learned = getattr(config, "learned_env", False)
    for a in history:
        owner = cur.owner()
        obs = cur.obs_key()
        actions = cur.legal_actions()
        if owner == ENVIRONMENT:
            probs = cur.env_probs()
            child_rows = []
            for c in actions:
                cur.push(c)
                child_rows.append(flows.ensure(cur.obs_key()))
                cur.pop()
            row_pad = np.full(width, -1, dtype=np.int64)
            logp_pad = np.full(width, -np.inf)
            legal_pad = np.full(width, -1, dtype=np.int64)
            row_pad[: len(actions)] = child_rows
            logp_pad[: len(actions)] = np.log(probs)
            legal_pad[: len(actions)] = actions
            mask = np.zeros(width, dtype=np.int8)
            mask[list(actions)] = 1
            envs["s_rows"].append(flows.ensure(obs))
            envs["child_rows"].append(row_pad)
            envs["child_logp"].append(logp_pad)
            envs["legal_pad"].append(legal_pad)
            envs["masks"].append(mask)
            envs["taken_idx"].append(actions.index(a))
            envs["env_rows"].append(model.env_logits.ensure(obs) if learned else -1)
        else:
            mask = np.array(cur.mask(), dtype=np.int8)
            s_row = flows.ensure(obs)
            cur.push(a)
            c_row = flows.ensure(cur.obs_key())
            cur.pop()
            agent["s_rows"].append(s_row)
            agent["c_rows"].append(c_row)
            agent["logit_rows"].append(model.logits[slot].ensure(obs))
            agent["masks"].append(mask)
            agent["actions"].append(a)
        cur.push(a)
    terminal_row = flows.ensure(cur.obs_key())
    log_reward = cur.terminal_log_rewards()[0]
    m_agent = len(agent["actions"])
    m_env = len(envs["s_rows"])
    return CompiledFlow(
        list(history), slot,
        {
            "s_rows": np.array(agent["s_rows"], dtype=np.int64),
            "c_rows": np.array(agent["c_rows"], dtype=np.int64),
            "logit_rows": np.array(agent["logit_rows"], dtype=np.int64),
            "masks": np.array(agent["masks"], dtype=np.int8).reshape(m_agent, -1),
            "actions": np.array(agent["actions"], dtype=np.int64),
        },
        {
            "s_rows": np.array(envs["s_rows"], dtype=np.int64),
            "child_rows": (np.stack(envs["child_rows"]) if m_env
                           else np.zeros((0, width), dtype=np.int64)),
            "child_logp": (np.stack(envs["child_logp"]) if m_env
                           else np.zeros((0, width))),
            "legal_pad": (np.stack(envs["legal_pad"]) if m_env
                          else np.zeros((0, width), dtype=np.int64)),
            "masks": (np.stack(envs["masks"]) if m_env
                      else np.zeros((0, width), dtype=np.int8)),
            "taken_idx": np.array(envs["taken_idx"], dtype=np.int64),
            "env_rows": np.array(envs["env_rows"], dtype=np.int64),
            "learned": learned,
        },
        terminal_row, log_reward,
    )
