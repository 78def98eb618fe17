from .core import (
    ENVIRONMENT,
    Cursor,
    IllegalActionError,
    OwnershipError,
    StateKey,
    TerminalStateError,
    Trajectory,
    TrajectoryStep,
    TreeEnv,
    TreeEnvError,
    read_trajectories,
    trajectory_from_json,
    trajectory_to_json,
    write_trajectories,
)
from .boards import (
    BoardGame,
    BoardGameSpec,
    Outcome,
    connect_k,
    log_outcome_reward,
    make_board_game,
    tictactoe,
)
from .sequences import SequenceEnv, SequenceEnvSpec, make_sequence_env
from .toytrees import ToyNode, ToyTreeEnv, agent, chance, make_coinflip_tree, random_toy_tree, terminal
from .views import AsSingleAgent, FixedOpponentView, TruncatedGame

__all__ = [
    "ENVIRONMENT",
    "AsSingleAgent",
    "BoardGame",
    "BoardGameSpec",
    "Cursor",
    "FixedOpponentView",
    "IllegalActionError",
    "Outcome",
    "OwnershipError",
    "SequenceEnv",
    "SequenceEnvSpec",
    "StateKey",
    "TerminalStateError",
    "ToyNode",
    "ToyTreeEnv",
    "Trajectory",
    "TrajectoryStep",
    "TreeEnv",
    "TreeEnvError",
    "TruncatedGame",
    "agent",
    "chance",
    "connect_k",
    "log_outcome_reward",
    "make_board_game",
    "make_coinflip_tree",
    "make_sequence_env",
    "random_toy_tree",
    "read_trajectories",
    "terminal",
    "tictactoe",
    "trajectory_from_json",
    "trajectory_to_json",
    "write_trajectories",
]
