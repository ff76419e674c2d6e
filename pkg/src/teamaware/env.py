"""Level-based foraging: a cooperative grid world with partial observations.

Agents and foods carry integer levels.  A food is collected only when the
levels of the agents loading next to it in the same step sum to at least the
food's level; the team reward is the collected level normalized by the total
food level, so the undiscounted episode return is at most 1.

The transition/observation core is pure functions over `WorldState`; the
`ForagingEnv` class is a thin stateful wrapper used by rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation

N_ACTIONS = 6
NOOP, UP, DOWN, LEFT, RIGHT, LOAD = range(N_ACTIONS)
ACTION_NAMES = ("noop", "up", "down", "left", "right", "load")
_MOVE_DELTA = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


@dataclass(frozen=True)
class EnvConfig:
    grid_height: int = 8
    grid_width: int = 8
    n_agents: int = 2
    n_foods: int = 1
    max_agent_level: int = 2
    visibility_radius: int = 2
    episode_limit: int = 50
    seed: int = 0

    def validate(self) -> "EnvConfig":
        if self.grid_height < 3 or self.grid_width < 3:
            raise ConfigurationError("grid must be at least 3x3")
        if self.n_agents < 1:
            raise ConfigurationError("need at least one agent")
        if self.n_foods < 1:
            raise ConfigurationError("need at least one food")
        if self.max_agent_level < 1:
            raise ConfigurationError("max_agent_level must be >= 1")
        if self.visibility_radius < 1:
            raise ConfigurationError("visibility_radius must be >= 1")
        if self.episode_limit < 1:
            raise ConfigurationError("episode_limit must be >= 1")
        if self.grid_height * self.grid_width < self.n_agents + self.n_foods:
            raise ConfigurationError("grid too small to place all entities")
        return self

    @property
    def obs_dim(self) -> int:
        side = 2 * self.visibility_radius + 1
        return side * side * 3 + 3

    @property
    def state_dim(self) -> int:
        return 3 * self.n_agents + 4 * self.n_foods


@dataclass
class WorldState:
    """Positions/levels of every entity plus the step counter."""

    agent_pos: np.ndarray      # [n_agents, 2] int (row, col)
    agent_level: np.ndarray    # [n_agents] int
    food_pos: np.ndarray       # [n_foods, 2] int, frozen after collection
    food_level: np.ndarray     # [n_foods] int
    food_collected: np.ndarray  # [n_foods] bool
    steps: int = 0
    total_food_level: int = field(default=0)

    def __post_init__(self):
        if self.total_food_level == 0:
            self.total_food_level = int(np.sum(self.food_level))

    def copy(self) -> "WorldState":
        return WorldState(self.agent_pos.copy(), self.agent_level.copy(),
                          self.food_pos.copy(), self.food_level.copy(),
                          self.food_collected.copy(), self.steps,
                          self.total_food_level)

    def all_collected(self) -> bool:
        return bool(np.all(self.food_collected))


def reset_world(config: EnvConfig, rng: np.random.Generator) -> WorldState:
    """Place all entities on distinct uniformly random cells and roll levels.

    Agent levels are uniform in [1, max_agent_level]; each food level is
    uniform in [1, sum of agent levels], so the team can always collect it.
    """
    config.validate()
    n_cells = config.grid_height * config.grid_width
    n_entities = config.n_agents + config.n_foods
    cells = rng.choice(n_cells, size=n_entities, replace=False)
    rows, cols = np.divmod(cells, config.grid_width)
    agent_pos = np.stack([rows[:config.n_agents], cols[:config.n_agents]], axis=1)
    food_pos = np.stack([rows[config.n_agents:], cols[config.n_agents:]], axis=1)
    agent_level = rng.integers(1, config.max_agent_level + 1, size=config.n_agents)
    level_sum = int(np.sum(agent_level))
    food_level = rng.integers(1, level_sum + 1, size=config.n_foods)
    return WorldState(agent_pos.astype(np.int64), agent_level.astype(np.int64),
                      food_pos.astype(np.int64), food_level.astype(np.int64),
                      np.zeros(config.n_foods, dtype=bool))


def step_world(config: EnvConfig, state: WorldState,
               actions) -> tuple[WorldState, float, bool]:
    """Apply one joint action; deterministic given (state, actions).

    Movement is simultaneous.  A move is cancelled when it would leave the
    grid, enter a cell holding an uncollected food or any agent's current
    position, or target the same cell as another mover (contested moves all
    stay).  Loading agents orthogonally adjacent to a food collect it when
    their level sum reaches the food level.
    """
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape != (config.n_agents,):
        raise ContractViolation(f"expected {config.n_agents} actions")
    if np.any(actions < 0) or np.any(actions >= N_ACTIONS):
        raise ContractViolation(f"action index out of range: {actions.tolist()}")
    if state.all_collected() or state.steps >= config.episode_limit:
        raise ContractViolation("step() on a terminated episode")

    n = config.n_agents
    new = state.copy()

    # -- simultaneous movement ---------------------------------------------
    desired = new.agent_pos.copy()
    occupied = {tuple(p) for p in new.agent_pos}
    occupied |= {tuple(p) for p, c in zip(new.food_pos, new.food_collected) if not c}
    for i in range(n):
        a = int(actions[i])
        if a in _MOVE_DELTA:
            dr, dc = _MOVE_DELTA[a]
            r, c = int(new.agent_pos[i, 0]) + dr, int(new.agent_pos[i, 1]) + dc
            if 0 <= r < config.grid_height and 0 <= c < config.grid_width \
                    and (r, c) not in occupied:
                desired[i] = (r, c)
    # contested targets: everyone involved stays put
    targets: dict[tuple, list[int]] = {}
    for i in range(n):
        targets.setdefault(tuple(desired[i]), []).append(i)
    for cell, movers in targets.items():
        if len(movers) > 1:
            for i in movers:
                desired[i] = new.agent_pos[i]
    new.agent_pos = desired

    # -- loading -------------------------------------------------------------
    loaders = [i for i in range(n) if actions[i] == LOAD]
    collected_level = 0
    for f in range(config.n_foods):
        if new.food_collected[f]:
            continue
        fr, fc = new.food_pos[f]
        adjacent = [i for i in loaders
                    if abs(int(new.agent_pos[i, 0]) - int(fr))
                    + abs(int(new.agent_pos[i, 1]) - int(fc)) == 1]
        if adjacent and int(np.sum(new.agent_level[adjacent])) >= int(new.food_level[f]):
            new.food_collected[f] = True
            collected_level += int(new.food_level[f])

    reward = collected_level / new.total_food_level
    new.steps = state.steps + 1
    terminated = new.all_collected() or new.steps >= config.episode_limit
    return new, float(reward), terminated


def observe(config: EnvConfig, state: WorldState, agent_id: int) -> np.ndarray:
    """Local window of side (2r+1) with channels (teammate level, food level,
    self marker), then own level and own normalized position."""
    if not 0 <= agent_id < config.n_agents:
        raise ContractViolation(f"agent_id {agent_id} out of range")
    r = config.visibility_radius
    side = 2 * r + 1
    teammates = np.zeros((side, side))
    foods = np.zeros((side, side))
    marker = np.zeros((side, side))
    row0, col0 = state.agent_pos[agent_id]
    for j in range(config.n_agents):
        if j == agent_id:
            continue
        dr = int(state.agent_pos[j, 0]) - int(row0)
        dc = int(state.agent_pos[j, 1]) - int(col0)
        if abs(dr) <= r and abs(dc) <= r:
            teammates[dr + r, dc + r] = float(state.agent_level[j])
    for f in range(config.n_foods):
        if state.food_collected[f]:
            continue
        dr = int(state.food_pos[f, 0]) - int(row0)
        dc = int(state.food_pos[f, 1]) - int(col0)
        if abs(dr) <= r and abs(dc) <= r:
            foods[dr + r, dc + r] = float(state.food_level[f])
    marker[r, r] = 1.0
    own = np.array([float(state.agent_level[agent_id]),
                    row0 / (config.grid_height - 1),
                    col0 / (config.grid_width - 1)])
    return np.concatenate([teammates.ravel(), foods.ravel(), marker.ravel(), own])


def global_state(config: EnvConfig, state: WorldState) -> np.ndarray:
    """Concatenated per-agent (row, col, level) and per-food (row, col,
    level, collected) blocks; positions normalized to [0, 1]."""
    parts = []
    for i in range(config.n_agents):
        parts += [state.agent_pos[i, 0] / (config.grid_height - 1),
                  state.agent_pos[i, 1] / (config.grid_width - 1),
                  float(state.agent_level[i])]
    for f in range(config.n_foods):
        parts += [state.food_pos[f, 0] / (config.grid_height - 1),
                  state.food_pos[f, 1] / (config.grid_width - 1),
                  float(state.food_level[f]),
                  1.0 if state.food_collected[f] else 0.0]
    return np.asarray(parts, dtype=np.float64)


class ForagingEnv:
    """Stateful wrapper around the pure world functions.

    Instances are independent and single-threaded; a fixed seed reproduces
    whole episodes bitwise (transitions themselves carry no randomness).
    """

    def __init__(self, config: EnvConfig):
        self.config = config.validate()
        self._rng = np.random.default_rng(config.seed)
        self._state: WorldState | None = None

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    @property
    def state_dim(self) -> int:
        return self.config.state_dim

    @property
    def world(self) -> WorldState:
        if self._state is None:
            raise ContractViolation("reset() before reading the world state")
        return self._state

    def reset(self, seed: int | None = None):
        """Returns (per-agent observations, global state vector)."""
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._state = reset_world(self.config, self._rng)
        return self._observations(), global_state(self.config, self._state)

    def load_state(self, state: WorldState):
        """Install an externally built state (testing hook)."""
        self._state = state.copy()
        return self._observations(), global_state(self.config, self._state)

    def step(self, actions):
        """Returns (observations, global state, team reward, terminated)."""
        self._state, reward, terminated = step_world(self.config, self.world, actions)
        return (self._observations(), global_state(self.config, self._state),
                reward, terminated)

    def avail_actions(self) -> np.ndarray:
        """[n_agents, n_actions] availability mask; all actions always legal."""
        return np.ones((self.config.n_agents, N_ACTIONS))

    def _observations(self) -> list[np.ndarray]:
        return [observe(self.config, self.world, i)
                for i in range(self.config.n_agents)]
