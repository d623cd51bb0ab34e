"""Synthetic environments with controllable exogenous noise.

Two families live here:

* :class:`TabularMDP` -- finite factored MDPs whose state is an endogenous
  index ``s`` plus a tuple of exogenous indices.  Reward and endogenous
  dynamics only read the exogenous dimensions listed in ``relevant_dims``.
* :class:`PixelEnv` -- an 8x8 gridworld rendered to a small grayscale image
  whose right half is an action-independent noise block.
"""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field

import numpy as np

ROW_TOL = 1e-12


@dataclass
class TabularMDP:
    """Factored finite MDP.

    ``p_endo`` has shape ``(n_endo, *exo_dims, n_actions, n_endo)`` and
    ``reward`` has shape ``(n_endo, *exo_dims, n_actions)``.  Exogenous
    dimensions evolve by ``exo_chains[i]`` independently, unless an explicit
    ``exo_joint`` matrix over flattened exogenous configurations is given.
    """

    n_endo: int
    exo_dims: tuple[int, ...]
    n_actions: int
    p_endo: np.ndarray
    exo_chains: list[np.ndarray]
    reward: np.ndarray
    gamma: float
    relevant_dims: tuple[int, ...] = ()
    r_min: float = 0.0
    r_max: float = 1.0
    exo_joint: np.ndarray | None = None

    def __post_init__(self):
        self.exo_dims = tuple(int(c) for c in self.exo_dims)
        self.relevant_dims = tuple(self.relevant_dims)
        if self.n_endo < 1 or self.n_actions < 1:
            raise ValueError("empty state or action set")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def n_exo(self) -> int:
        return int(np.prod(self.exo_dims, dtype=int)) if self.exo_dims else 1

    @property
    def n_states(self) -> int:
        return self.n_endo * self.n_exo

    def exo_transition(self) -> np.ndarray:
        """Joint transition over flattened exogenous configurations (C order)."""
        if self.exo_joint is not None:
            return self.exo_joint
        joint = np.ones((1, 1))
        for chain in self.exo_chains:
            joint = np.kron(joint, chain)
        return joint

    def state_index(self, s: int, exo: tuple[int, ...]) -> int:
        e = int(np.ravel_multi_index(exo, self.exo_dims)) if self.exo_dims else 0
        return s * self.n_exo + e

    def unravel(self, idx: int) -> tuple[int, tuple[int, ...]]:
        s, e = divmod(int(idx), self.n_exo)
        exo = tuple(int(v) for v in np.unravel_index(e, self.exo_dims)) if self.exo_dims else ()
        return s, exo

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """Full transition ``P[S, A, S]`` and reward ``R[S, A]`` over joint states."""
        S, A, E = self.n_states, self.n_actions, self.n_exo
        pe = self.p_endo.reshape(self.n_endo, E, A, self.n_endo)
        px = self.exo_transition()
        # P[(s,e), a, (s',e')] = pe[s,e,a,s'] * px[e,e']
        P = np.einsum("seat,ef->seatf", pe, px).reshape(S, A, S)
        R = self.reward.reshape(S, A)
        return P, R

    def audit(self) -> list[str]:
        """Return a list of violated constructor invariants (empty when valid)."""
        problems = []
        if not np.allclose(self.p_endo.sum(-1), 1.0, atol=ROW_TOL, rtol=0):
            problems.append("endogenous transition rows do not sum to 1")
        for i, chain in enumerate(self.exo_chains):
            if not np.allclose(chain.sum(-1), 1.0, atol=ROW_TOL, rtol=0):
                problems.append(f"exogenous chain {i} rows do not sum to 1")
        if self.exo_joint is not None and not np.allclose(self.exo_joint.sum(-1), 1.0,
                                                          atol=ROW_TOL, rtol=0):
            problems.append("joint exogenous rows do not sum to 1")
        if np.any(self.reward < self.r_min - ROW_TOL) or np.any(self.reward > self.r_max + ROW_TOL):
            problems.append("reward outside [r_min, r_max]")
        for d in range(len(self.exo_dims)):
            if d in self.relevant_dims:
                continue
            if not _constant_along(self.reward, 1 + d):
                problems.append(f"reward reads undeclared exogenous dim {d}")
            if not _constant_along(self.p_endo, 1 + d):
                problems.append(f"endogenous dynamics read undeclared exogenous dim {d}")
        return problems


def _constant_along(arr: np.ndarray, axis: int, tol: float = 1e-12) -> bool:
    first = np.take(arr, [0], axis=axis)
    return bool(np.all(np.abs(arr - first) <= tol))


def _random_stochastic(rng: np.random.Generator, shape: tuple, n: int,
                       concentration: float = 1.0) -> np.ndarray:
    p = rng.dirichlet(np.full(n, concentration), size=shape)
    return p / p.sum(-1, keepdims=True)


def make_factored_mdp(rng: np.random.Generator, n_endo: int = 3, exo_dims=(2, 2, 2, 2),
                      n_actions: int = 2, relevant_dims=(2, 3), gamma: float = 0.9,
                      r_min: float = 0.0, r_max: float = 1.0) -> TabularMDP:
    """Random MDP satisfying the mask-reduction conditions for every
    exogenous dimension outside ``relevant_dims``."""
    exo_dims = tuple(exo_dims)
    relevant_dims = tuple(sorted(relevant_dims))
    if n_endo < 1 or n_actions < 1:
        raise ValueError("empty state or action set")
    if any(d < 0 or d >= len(exo_dims) for d in relevant_dims):
        raise ValueError(f"relevant dims {relevant_dims} out of range for {len(exo_dims)} dims")
    rel_cards = tuple(exo_dims[d] for d in relevant_dims)
    p_small = _random_stochastic(rng, (n_endo, *rel_cards, n_actions), n_endo)
    r_small = rng.uniform(r_min, r_max, size=(n_endo, *rel_cards, n_actions))
    p_endo = _expand(p_small, exo_dims, relevant_dims, trailing=2)
    reward = _expand(r_small, exo_dims, relevant_dims, trailing=1)
    chains = [_random_stochastic(rng, (c,), c) for c in exo_dims]
    mdp = TabularMDP(n_endo, exo_dims, n_actions, p_endo, chains, reward, gamma,
                     relevant_dims, r_min, r_max)
    bad = mdp.audit()
    if bad:
        raise AssertionError(f"generated MDP failed its audit: {bad}")
    return mdp


def _expand(small: np.ndarray, exo_dims: tuple, relevant: tuple, trailing: int) -> np.ndarray:
    """Broadcast an array over (s, relevant dims, ...) to (s, all dims, ...)."""
    lead = small.shape[0]
    tail = small.shape[1 + len(relevant):]
    shape = [lead] + [1] * len(exo_dims) + list(tail)
    for k, d in enumerate(relevant):
        shape[1 + d] = exo_dims[d]
    # reorder relevant axes to their positions in the full layout
    order = np.argsort(relevant) if relevant else []
    arr = np.transpose(small, [0] + [1 + int(i) for i in order]
                       + list(range(1 + len(relevant), small.ndim)))
    arr = arr.reshape(shape)
    full = [lead] + list(exo_dims) + list(tail)
    assert len(tail) == trailing
    return np.ascontiguousarray(np.broadcast_to(arr, full))


def plain_mdp(p: np.ndarray, r: np.ndarray, gamma: float, r_min=None, r_max=None) -> TabularMDP:
    """Wrap ``P[S, A, S]`` / ``R[S, A]`` as an MDP without exogenous dims."""
    r_min = float(r.min()) if r_min is None else r_min
    r_max = float(r.max()) if r_max is None else r_max
    return TabularMDP(p.shape[0], (), p.shape[1], p, [], r, gamma, (), r_min, r_max)


def random_plain_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float,
                     r_min: float = 0.0, r_max: float = 1.0) -> TabularMDP:
    p = _random_stochastic(rng, (n_states, n_actions), n_states)
    r = rng.uniform(r_min, r_max, size=(n_states, n_actions))
    return plain_mdp(p, r, gamma, r_min, r_max)


def tabular_step(mdp: TabularMDP, state: tuple[int, tuple[int, ...]], action: int,
                 rng: np.random.Generator):
    """Sample one transition; returns ``((s', exo'), reward)``."""
    s, exo = state
    exo = tuple(exo)
    if not 0 <= s < mdp.n_endo:
        raise IndexError(f"endogenous state {s} out of range")
    if not 0 <= action < mdp.n_actions:
        raise IndexError(f"action {action} out of range")
    if len(exo) != len(mdp.exo_dims) or any(not 0 <= v < c for v, c in zip(exo, mdp.exo_dims)):
        raise IndexError(f"exogenous state {exo} out of range for {mdp.exo_dims}")
    reward = float(mdp.reward[(s, *exo, action)])
    s_next = int(rng.choice(mdp.n_endo, p=mdp.p_endo[(s, *exo, action)]))
    if mdp.exo_joint is not None:
        e = int(np.ravel_multi_index(exo, mdp.exo_dims))
        e_next = int(rng.choice(mdp.n_exo, p=mdp.exo_joint[e]))
        exo_next = tuple(int(v) for v in np.unravel_index(e_next, mdp.exo_dims))
    else:
        exo_next = tuple(int(rng.choice(len(ch), p=ch[v])) for v, ch in zip(exo, mdp.exo_chains))
    return (s_next, exo_next), reward


# ---------------------------------------------------------------------------
# Pixel gridworld

ACTIONS = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1), 4: (0, 0)}  # up down left right stay
NOISE_KINDS = ("none", "stripes", "random_walk")


@dataclass
class EnvConfig:
    grid: int = 8
    image: int = 16
    noise: str = "random_walk"
    noise_amplitude: float = 0.2
    time_limit: int = 64
    action_mode: str = "discrete"
    action_repeat: int = 1
    step_cost: float = 0.01
    terminate_on_target: bool = False

    def validate(self) -> None:
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"env.noise must be one of {NOISE_KINDS}, got {self.noise!r}")
        if self.action_mode not in ("discrete", "continuous"):
            raise ValueError(f"env.action_mode must be discrete or continuous")
        if self.image % self.grid or (self.image // 2) % self.grid:
            raise ValueError(f"env.image={self.image} must tile an {self.grid}x{self.grid} grid "
                             "in its left half")
        if self.time_limit < 1 or self.action_repeat < 1:
            raise ValueError("env.time_limit and env.action_repeat must be positive")


@dataclass
class PixelEnvState:
    agent_pos: tuple[int, int]
    target_pos: tuple[int, int]
    exo_field: np.ndarray
    step_count: int = 0
    exo_phase: float = 0.0


class EnvFault(RuntimeError):
    pass


class PixelEnv:
    """Grid navigation rendered as a ``(H, W, 1)`` image in [0, 1].

    The left half shows the target (0.5) and the agent (1.0, drawn last);
    the right half is the exogenous block.  Reaching the target pays
    ``1 - step_cost`` and terminates; every other step costs ``step_cost``.
    The noise block has its own generator and never reads the action, and
    it keeps evolving across episode resets.
    """

    def __init__(self, config: EnvConfig | None = None, seed: int = 0):
        self.config = config or EnvConfig()
        self.config.validate()
        c = self.config
        self.H = self.W = c.image
        self.exo_w = c.image // 2
        self.cell_h = c.image // c.grid
        self.cell_w = (c.image - self.exo_w) // c.grid
        seeds = np.random.SeedSequence(seed).spawn(2)
        self.rng = np.random.default_rng(seeds[0])
        self.exo_rng = np.random.default_rng(seeds[1])
        self.state: PixelEnvState | None = None
        self.done = True
        self._init_exo()

    @property
    def action_dim(self) -> int:
        return len(ACTIONS) if self.config.action_mode == "discrete" else 2

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.H, self.W, 1)

    def _init_exo(self) -> None:
        shape = (self.H, self.exo_w)
        if self.config.noise == "random_walk":
            self._exo = self.exo_rng.uniform(0.0, 1.0, size=shape)
        else:
            self._exo = np.zeros(shape)
        self._phase = 0.0

    def _advance_exo(self) -> None:
        c = self.config
        if c.noise == "random_walk":
            step = self.exo_rng.normal(0.0, c.noise_amplitude, size=self._exo.shape)
            self._exo = np.clip(self._exo + step, 0.0, 1.0)
        elif c.noise == "stripes":
            self._phase = (self._phase + 1.0 + self.exo_rng.integers(0, 2)) % self.exo_w
            cols = np.arange(self.exo_w)
            rows = np.arange(self.H)[:, None]
            wave = np.sin(2 * np.pi * (cols + rows + self._phase) / self.exo_w)
            self._exo = np.clip(0.5 + 0.5 * c.noise_amplitude * 5 * wave, 0.0, 1.0) \
                * np.ones((self.H, 1))

    def reset(self) -> np.ndarray:
        g = self.config.grid
        cells = self.rng.choice(g * g, size=2, replace=False)
        agent = tuple(int(v) for v in divmod(int(cells[0]), g))
        target = tuple(int(v) for v in divmod(int(cells[1]), g))
        self._advance_exo()
        self.state = PixelEnvState(agent, target, self._exo.copy(), 0, self._phase)
        self.done = False
        return self.render()

    def _move(self, action) -> tuple[int, int]:
        r, c = self.state.agent_pos
        if self.config.action_mode == "discrete":
            a = int(np.asarray(action).reshape(-1)[0]) if np.ndim(action) else int(action)
            if a not in ACTIONS:
                raise EnvFault(f"invalid discrete action {action!r}")
            dr, dc = ACTIONS[a]
        else:
            a = np.clip(np.asarray(action, dtype=float).reshape(-1), -1.0, 1.0)
            if a.shape != (2,):
                raise EnvFault(f"continuous action must have 2 entries, got {a.shape}")
            dr, dc = int(np.rint(a[0])), int(np.rint(a[1]))
        g = self.config.grid
        return min(max(r + dr, 0), g - 1), min(max(c + dc, 0), g - 1)

    def step(self, action) -> tuple[np.ndarray, float, float]:
        """Returns ``(observation, reward, continue_flag)``; see ``done``."""
        if self.done or self.state is None:
            raise EnvFault("step() called on a finished episode; call reset() first")
        c = self.config
        total = 0.0
        cont = 1.0
        for _ in range(c.action_repeat):
            self.state.agent_pos = self._move(action)
            self._advance_exo()
            self.state.exo_field = self._exo.copy()
            self.state.exo_phase = self._phase
            reached = self.state.agent_pos == self.state.target_pos
            total += (1.0 if reached else 0.0) - c.step_cost
            if reached and c.terminate_on_target:
                cont = 0.0
                break
        self.state.step_count += 1
        if cont == 0.0 or self.state.step_count >= c.time_limit:
            self.done = True
        return self.render(), total, cont

    def render(self, state: PixelEnvState | None = None) -> np.ndarray:
        state = state or self.state
        img = np.zeros((self.H, self.W), dtype=np.float32)
        for (r, c), val in ((state.target_pos, 0.5), (state.agent_pos, 1.0)):
            img[r * self.cell_h:(r + 1) * self.cell_h, c * self.cell_w:(c + 1) * self.cell_w] = val
        img[:, self.W - self.exo_w:] = state.exo_field
        return img[..., None]

    def exo_region(self) -> tuple[slice, slice]:
        return slice(0, self.H), slice(self.W - self.exo_w, self.W)

    # ---- checkpoint support ----------------------------------------------
    def get_state(self) -> dict:
        st = self.state
        return {
            "rng": self.rng.bit_generator.state,
            "exo_rng": self.exo_rng.bit_generator.state,
            "exo": self._exo.tolist(),
            "phase": self._phase,
            "done": self.done,
            "state": None if st is None else {
                "agent_pos": list(st.agent_pos), "target_pos": list(st.target_pos),
                "step_count": st.step_count,
            },
        }

    def set_state(self, blob: dict) -> None:
        self.rng.bit_generator.state = blob["rng"]
        self.exo_rng.bit_generator.state = blob["exo_rng"]
        self._exo = np.array(blob["exo"], dtype=np.float64)
        self._phase = blob["phase"]
        self.done = blob["done"]
        st = blob["state"]
        self.state = None if st is None else PixelEnvState(
            tuple(st["agent_pos"]), tuple(st["target_pos"]), self._exo.copy(),
            st["step_count"], self._phase)


def greedy_action(state: PixelEnvState) -> int:
    """Shortest-path action towards the target (rows first)."""
    (ar, ac), (tr, tc) = state.agent_pos, state.target_pos
    if ar < tr:
        return 1
    if ar > tr:
        return 0
    if ac < tc:
        return 3
    if ac > tc:
        return 2
    return 4
