"""Episodic continuous-control environments with contextual initial states.

Three desk-scale tasks, all force-controlled point masses with velocity
damping (x <- x + v*dt, v <- 0.9*v + a*dt, dt = 0.05) and fixed horizons:

* ``point_goal`` -- reach a goal sampled on a circle of radius 5; reward
  is one minus the distance-to-goal normalized by the initial distance,
  minus a small action penalty.
* ``reach_box`` -- reach an object placed uniformly in a 0.30 x 0.30
  square, then raise it; indicator reward while within 8cm of the object
  with the object lifted above 0.1.
* ``bimodal`` -- 1-D diagnostic with initial position in [-2,-1] or
  [1,2]; the target sits at 3 * sign(initial position), so the optimal
  action flips sign with the starting side.

``step`` is a pure function of (state, action): everything the reward
needs, including goals and normalization constants, lives in the state
vector, and a reflecting barrier at the origin keeps the bimodal task's
position sign fixed for a whole episode.  Episodes end only at the
horizon; the rollout helpers enforce that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContextStarvationError, ShapeError
from .policy import GaussianPolicy, sample_action
from .rng import Rng

DT = 0.05
DAMPING = 0.9
MAX_REJECTIONS = 100_000


@dataclass(frozen=True)
class MdpSpec:
    state_dim: int
    action_dim: int
    horizon: int
    action_low: np.ndarray
    action_high: np.ndarray

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        lo, hi = np.asarray(self.action_low), np.asarray(self.action_high)
        if lo.shape != (self.action_dim,) or hi.shape != (self.action_dim,):
            raise ShapeError("action bounds must match action_dim")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all() and (lo < hi).all()):
            raise ValueError("action bounds must be finite with low < high")


class StepResult(NamedTuple):
    next_state: np.ndarray
    reward: float
    done: bool


@dataclass
class EpisodeRecord:
    """Aligned per-step arrays; states carries one extra terminal entry.

    ``terminated`` means the MDP itself ended (an absorbing state), not
    that time ran out: horizon cut-offs and mid-episode batch truncation
    both leave it False so advantage estimation bootstraps the tail
    state's value.  These fixed-horizon tasks therefore never set it.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    terminated: bool
    context_id: Optional[int] = None

    def __post_init__(self):
        t = len(self.actions)
        if len(self.states) != t + 1 or len(self.rewards) != t or len(self.log_probs) != t:
            raise ShapeError("episode arrays misaligned")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


def _clip_action(env, action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (env.spec.action_dim,):
        raise ShapeError(f"action shape {a.shape} != ({env.spec.action_dim},)")
    if not np.isfinite(a).all():
        raise ValueError("non-finite action")
    return np.clip(a, env.spec.action_low, env.spec.action_high)


def _damped_step(pos, vel, force, box):
    """Point-mass update with velocity damping and hard walls at +-box."""
    new_pos = pos + vel * DT
    hit = np.abs(new_pos) > box
    new_pos = np.clip(new_pos, -box, box)
    new_vel = DAMPING * vel + force * DT
    new_vel = np.where(hit, 0.0, new_vel)
    return new_pos, new_vel


def _damped_step_1d(pos: float, vel: float, force: float, box: float):
    """Scalar version of _damped_step for the hot per-step paths."""
    new_pos = pos + vel * DT
    new_vel = DAMPING * vel + force * DT
    if new_pos > box:
        new_pos, new_vel = box, 0.0
    elif new_pos < -box:
        new_pos, new_vel = -box, 0.0
    return new_pos, new_vel


class PointGoal2D:
    """Goal on a radius-5 circle; reward 1 - d' - 0.01*||a||.

    State layout: [agent_x, agent_y, vel_x, vel_y, goal_x, goal_y,
    initial_distance].  d' is distance-to-goal divided by the initial
    distance, so the first step's d' is exactly 1.
    """

    name = "point_goal"
    goal_radius = 5.0
    success_distance = 0.5  # 10% of the circle radius
    wall = 10.0

    def __init__(self):
        self.spec = MdpSpec(7, 2, 100, np.full(2, -10.0), np.full(2, 10.0))
        worst = np.hypot(self.wall + self.goal_radius, self.wall)
        self.reward_range = (
            1.0 - worst / self.goal_radius - 0.01 * np.hypot(10.0, 10.0),
            1.0,
        )

    def reset(self, rng: Rng) -> np.ndarray:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        goal = self.goal_radius * np.array([np.cos(theta), np.sin(theta)])
        d0 = float(np.hypot(goal[0], goal[1]))
        return np.array([0.0, 0.0, 0.0, 0.0, goal[0], goal[1], d0])

    def step(self, state, action) -> StepResult:
        ax, ay = float(action[0]), float(action[1])
        if not (math.isfinite(ax) and math.isfinite(ay)):
            raise ValueError("non-finite action")
        ax = min(max(ax, -10.0), 10.0)
        ay = min(max(ay, -10.0), 10.0)
        px, py, vx, vy, gx, gy, d0 = (float(v) for v in state)
        d_norm = math.hypot(px - gx, py - gy) / d0
        reward = 1.0 - d_norm - 0.01 * math.hypot(ax, ay)
        npx, nvx = _damped_step_1d(px, vx, ax, self.wall)
        npy, nvy = _damped_step_1d(py, vy, ay, self.wall)
        return StepResult(np.array([npx, npy, nvx, nvy, gx, gy, d0]), reward, False)

    def success(self, episode: EpisodeRecord) -> bool:
        final = episode.states[-1]
        return bool(np.hypot(*(final[0:2] - final[4:6])) < self.success_distance)


class ReachBox2D:
    """Reach a box in a 0.30 x 0.30 square, then lift it.

    State layout: [agent_x, agent_y, vel_x, vel_y, lift_height, object_x,
    object_y].  Reward is the indicator of being within 0.08 of the
    object while its height exceeds 0.1.  The third action channel raises
    or lowers the height while in proximity; out of proximity the object
    falls back at 0.5 units/s.
    """

    name = "reach_box"
    proximity = 0.08
    lift_threshold = 0.1
    max_height = 0.5
    success_steps = 10
    wall = 1.0

    def __init__(self):
        self.spec = MdpSpec(7, 3, 150, np.full(3, -2.0), np.full(3, 2.0))
        self.reward_range = (0.0, 1.0)

    def reset(self, rng: Rng) -> np.ndarray:
        obj = rng.uniform(-0.15, 0.15, size=2)
        return np.array([0.0, 0.0, 0.0, 0.0, 0.0, obj[0], obj[1]])

    def step(self, state, action) -> StepResult:
        a = _clip_action(self, action)
        pos, vel, height, obj = state[0:2], state[2:4], state[4], state[5:7]
        near = np.hypot(*(pos - obj)) <= self.proximity
        reward = 1.0 if (near and height > self.lift_threshold) else 0.0
        new_pos, new_vel = _damped_step(pos, vel, a[0:2], self.wall)
        if near:
            new_height = np.clip(height + a[2] * DT, 0.0, self.max_height)
        else:
            new_height = max(0.0, height - 0.5 * DT)
        nxt = np.concatenate([new_pos, new_vel, [new_height], obj])
        return StepResult(nxt, reward, False)

    def success(self, episode: EpisodeRecord) -> bool:
        return bool((episode.rewards >= 1.0).sum() >= self.success_steps)


class Bimodal1D:
    """1-D conflicting-gradient diagnostic.

    State layout: [position, velocity].  Initial position is uniform on
    [-2,-1] or [1,2] with equal probability; the target is at
    3 * sign(initial position) and the reward is -(pos - target)^2 -
    0.01*a^2.  A reflecting barrier at the origin pins the position's
    sign for the whole episode, so sign(position) == sign(s0) and the
    reward stays a pure function of the current state.
    """

    name = "bimodal"
    target = 3.0
    success_distance = 0.25
    wall = 10.0
    origin_eps = 1e-6

    def __init__(self):
        self.spec = MdpSpec(2, 1, 100, np.full(1, -5.0), np.full(1, 5.0))
        self.reward_range = ((self.wall + self.target) ** 2 * -1.0 - 0.01 * 25.0, 0.0)

    def reset(self, rng: Rng) -> np.ndarray:
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        return np.array([side * rng.uniform(1.0, 2.0), 0.0])

    def step(self, state, action) -> StepResult:
        a = float(action[0])
        if not math.isfinite(a):
            raise ValueError("non-finite action")
        a = min(max(a, -5.0), 5.0)
        pos, vel = float(state[0]), float(state[1])
        goal = self.target if pos > 0 else -self.target
        reward = -((pos - goal) ** 2) - 0.01 * a * a
        new_pos = pos + vel * DT
        new_vel = DAMPING * vel + a * DT
        if pos > 0 and new_pos < self.origin_eps:
            new_pos, new_vel = self.origin_eps, 0.0
        elif pos < 0 and new_pos > -self.origin_eps:
            new_pos, new_vel = -self.origin_eps, 0.0
        if new_pos > self.wall:
            new_pos, new_vel = self.wall, 0.0
        elif new_pos < -self.wall:
            new_pos, new_vel = -self.wall, 0.0
        return StepResult(np.array([new_pos, new_vel]), reward, False)

    def success(self, episode: EpisodeRecord) -> bool:
        goal = self.target * np.sign(episode.states[0][0])
        return bool(abs(episode.states[-1][0] - goal) < self.success_distance)


ENVS = {cls.name: cls for cls in (PointGoal2D, ReachBox2D, Bimodal1D)}


def make_env(name: str):
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None


def sample_initial_states(env, n: int, rng: Rng) -> np.ndarray:
    return np.stack([env.reset(rng) for _ in range(n)])


def rollout_episode(
    env,
    pol: GaussianPolicy,
    rng: Rng,
    initial_state: Optional[np.ndarray] = None,
    context_id: Optional[int] = None,
) -> EpisodeRecord:
    """Run one full episode; done is forced at the horizon."""
    state = env.reset(rng) if initial_state is None else np.asarray(initial_state)
    horizon = env.spec.horizon
    done = False
    states, actions, rewards, log_probs = [state], [], [], []
    for t in range(horizon):
        act = sample_action(pol, state, rng)
        res = env.step(state, act.action)
        actions.append(act.action)
        rewards.append(res.reward)
        log_probs.append(act.log_prob)
        state = res.next_state
        states.append(state)
        done = res.done
        if done:
            break
    return EpisodeRecord(
        np.stack(states),
        np.stack(actions),
        np.asarray(rewards),
        np.asarray(log_probs),
        terminated=done,
        context_id=context_id,
    )


def is_complete(env, episode: EpisodeRecord) -> bool:
    """Whether the episode ran its full course (terminal state or horizon)."""
    return episode.terminated or len(episode) >= env.spec.horizon


def _sample_restricted(env, restriction, rng: Rng) -> np.ndarray:
    if restriction is None:
        return env.reset(rng)
    part, want = restriction
    for _ in range(MAX_REJECTIONS):
        s0 = env.reset(rng)
        if part.assign(s0) == want:
            return s0
    raise ContextStarvationError(want, MAX_REJECTIONS)


def collect_trajectories(
    env,
    pol: GaussianPolicy,
    restriction,  # None, or (Partition, context index)
    total_timesteps: int,
    rng: Rng,
) -> list[EpisodeRecord]:
    """Gather exactly ``total_timesteps`` steps of on-policy experience.

    Initial states are rejection-sampled into the requested context when a
    restriction is given.  The final episode is truncated mid-flight if
    needed so batches consume identical budgets across variants; truncated
    episodes carry ``terminated=False`` so advantage estimation bootstraps
    their tail value.
    """
    context_id = restriction[1] if restriction is not None else None
    episodes: list[EpisodeRecord] = []
    remaining = int(total_timesteps)
    horizon = env.spec.horizon
    while remaining > 0:
        state = _sample_restricted(env, restriction, rng)
        steps = min(horizon, remaining)
        states, actions, rewards, log_probs = [state], [], [], []
        done = False
        for t in range(steps):
            act = sample_action(pol, state, rng)
            res = env.step(state, act.action)
            actions.append(act.action)
            rewards.append(res.reward)
            log_probs.append(act.log_prob)
            state = res.next_state
            states.append(state)
            done = res.done
            if done:
                break
        episodes.append(
            EpisodeRecord(
                np.stack(states),
                np.stack(actions),
                np.asarray(rewards),
                np.asarray(log_probs),
                terminated=done,
                context_id=context_id,
            )
        )
        remaining -= len(actions)
    return episodes
