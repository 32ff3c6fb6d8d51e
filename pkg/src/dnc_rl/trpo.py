"""Trust-region policy optimization on top of the Gaussian policy.

One update: estimate advantages with GAE against an MLP value baseline,
build the importance-weighted surrogate loss, solve for the natural
gradient direction with conjugate gradient against Fisher-vector
products, scale the step so the predicted mean KL hits the trust-region
radius, then backtrack until the measured KL is inside the radius and
the surrogate actually improved.  If no candidate qualifies the old
policy is returned untouched; the trust-region contract is a hard
invariant, never a best effort.

The Fisher product uses the exact Hessian of mean KL(old || new) at the
old policy, which for a diagonal Gaussian splits into a Gauss-Newton
mean-net block J^T diag(1/sigma^2) J and a constant 2*I block for the
log-stds (curvature cross terms vanish at the expansion point).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import nn
from .errors import EmptyBatchError, NumericalError, ShapeError
from .envs import EpisodeRecord
from .nn import MlpParams
from .policy import (
    GaussianPolicy,
    kl_batch,
    log_density_batch,
    mean_batch,
    policy_params,
    policy_with_params,
    weighted_logp_grad,
)
from .rng import Rng


@dataclass(frozen=True)
class TrpoConfig:
    max_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_ratio: float = 0.8
    max_backtracks: int = 10
    gae_lambda: float = 0.97
    discount: float = 0.99
    vf_hidden: tuple[int, ...] = (64, 64)
    vf_train_steps: int = 50
    vf_step_size: float = 1e-3
    fvp_subsample: int = 1  # curvature estimated on every k-th batch state

    def __post_init__(self):
        if self.max_kl <= 0:
            raise ValueError("max_kl must be positive")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")
        if self.fvp_subsample < 1:
            raise ValueError("fvp_subsample must be >= 1")


@dataclass(frozen=True)
class AdvantageBatch:
    """Flattened, batch-normalized advantages across a set of episodes."""

    states: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray

    def __post_init__(self):
        n = self.states.shape[0]
        if not (
            self.actions.shape[0] == n
            and self.old_log_probs.shape == (n,)
            and self.advantages.shape == (n,)
        ):
            raise ShapeError("advantage batch arrays misaligned")

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class ValueFunction:
    """MLP return regressor.

    The net learns standardized returns; the standardization constants
    live here and drift slowly (exponential update per fit) so the warm-
    started net is not chasing a moving frame every iteration.
    """

    net: MlpParams
    target_mean: float = 0.0
    target_scale: float = 1.0
    fitted: bool = False

    def predict(self, states: np.ndarray) -> np.ndarray:
        out = nn.mlp_forward_batch(self.net, np.asarray(states, dtype=np.float64))
        return self.target_mean + self.target_scale * out[:, 0]


def make_value_function(state_dim: int, hidden, rng: Rng) -> ValueFunction:
    return ValueFunction(nn.init_mlp((state_dim, *hidden, 1), rng))


def episode_returns_to_go(
    episode: EpisodeRecord, value_fn: ValueFunction, discount: float
) -> np.ndarray:
    """Discounted returns per step; truncated episodes bootstrap V(s_T)."""
    rewards = episode.rewards
    out = np.empty(len(rewards))
    tail = 0.0 if episode.terminated else float(value_fn.predict(episode.states[-1:])[0])
    for t in range(len(rewards) - 1, -1, -1):
        tail = rewards[t] + discount * tail
        out[t] = tail
    return out


def gae_episode(
    episode: EpisodeRecord, values: np.ndarray, discount: float, lam: float
) -> np.ndarray:
    """Raw (unnormalized) GAE advantages for one episode.

    values has one entry per state including the terminal one; the
    terminal bootstrap is masked out when the episode truly ended.
    """
    t_len = len(episode)
    if values.shape != (t_len + 1,):
        raise ShapeError(f"need {t_len + 1} values, got {values.shape}")
    mask = np.ones(t_len)
    if episode.terminated:
        mask[-1] = 0.0
    deltas = episode.rewards + discount * values[1:] * mask - values[:-1]
    adv = np.empty(t_len)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        acc = deltas[t] + discount * lam * acc
        adv[t] = acc
    return adv


def compute_advantages(
    episodes: list[EpisodeRecord], value_fn: ValueFunction, config: TrpoConfig
) -> AdvantageBatch:
    if not episodes:
        raise EmptyBatchError("compute_advantages needs at least one episode")
    all_states, all_actions, all_logps, all_adv = [], [], [], []
    for ep in episodes:
        values = value_fn.predict(ep.states)
        all_adv.append(gae_episode(ep, values, config.discount, config.gae_lambda))
        all_states.append(ep.states[:-1])
        all_actions.append(ep.actions)
        all_logps.append(ep.log_probs)
    adv = np.concatenate(all_adv)
    adv = adv - adv.mean()
    std = adv.std()
    if std > 1e-8:
        adv = adv / std
    return AdvantageBatch(
        np.concatenate(all_states),
        np.concatenate(all_actions),
        np.concatenate(all_logps),
        adv,
    )


def fit_value_function(
    value_fn: ValueFunction, episodes: list[EpisodeRecord], config: TrpoConfig
) -> ValueFunction:
    """Full-batch gradient descent of the return regression.

    Targets are standardized (constants initialized from the first batch,
    then exponentially tracked at rate 0.2) so the fixed step size
    behaves across reward scales.
    """
    if not episodes:
        raise EmptyBatchError("fit_value_function needs at least one episode")
    states = np.concatenate([ep.states[:-1] for ep in episodes])
    targets = np.concatenate(
        [episode_returns_to_go(ep, value_fn, config.discount) for ep in episodes]
    )
    batch_mean = float(targets.mean())
    batch_scale = max(float(targets.std()), 1e-8)
    if value_fn.fitted:
        mean = 0.8 * value_fn.target_mean + 0.2 * batch_mean
        scale = 0.8 * value_fn.target_scale + 0.2 * batch_scale
    else:
        mean, scale = batch_mean, batch_scale
    y = (targets - mean) / scale
    net = value_fn.net
    n = states.shape[0]
    for _ in range(config.vf_train_steps):
        acts = nn.forward_activations(net, states)
        grad_rows = (2.0 / n) * (acts[-1][:, 0] - y)[:, None]
        flat_grad, _ = nn.mlp_backward_batch(net, states, grad_rows, activations=acts)
        net = nn.unflatten_params(net, nn.flatten_params(net) - config.vf_step_size * flat_grad)
    return ValueFunction(net, mean, scale, fitted=True)


def surrogate_loss(
    pol: GaussianPolicy, batch: AdvantageBatch
) -> tuple[float, np.ndarray]:
    """Negative importance-weighted advantage and its exact gradient."""
    if len(batch) == 0:
        raise EmptyBatchError("surrogate_loss needs a non-empty batch")
    logp = log_density_batch(pol, batch.states, batch.actions)
    ratio = np.exp(logp - batch.old_log_probs)
    loss = -float((batch.advantages * ratio).mean())
    coeffs = -(batch.advantages * ratio) / len(batch)
    grad = weighted_logp_grad(pol, batch.states, batch.actions, coeffs)
    return loss, grad


def surrogate_loss_value(pol: GaussianPolicy, batch: AdvantageBatch) -> float:
    logp = log_density_batch(pol, batch.states, batch.actions)
    ratio = np.exp(logp - batch.old_log_probs)
    return -float((batch.advantages * ratio).mean())


def fisher_vector_product(
    pol: GaussianPolicy,
    states: np.ndarray,
    v: np.ndarray,
    damping: float,
    _activations: list | None = None,
) -> np.ndarray:
    """(H + damping*I) v for H = Hessian of mean KL(old||new) at old."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (pol.n_params,):
        raise ShapeError(f"expected ({pol.n_params},) vector, got {v.shape}")
    states = np.asarray(states, dtype=np.float64)
    n = states.shape[0]
    n_net = pol.mean_net.n_params
    v_net, v_ls = v[:n_net], v[n_net:]
    inv_var = np.exp(-2.0 * pol.log_std)
    acts = nn.forward_activations(pol.mean_net, states) if _activations is None else _activations
    jv = nn.mlp_jvp_batch(pol.mean_net, states, v_net, activations=acts)
    net_part, _ = nn.mlp_backward_batch(pol.mean_net, states, jv * inv_var / n, activations=acts)
    return np.concatenate([net_part, 2.0 * v_ls]) + damping * v


def conjugate_gradient(
    fvp: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    iters: int,
    tol: float = 1e-6,
) -> tuple[np.ndarray, float]:
    """Solve H x = b; returns (x, true relative residual)."""
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), 0.0
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rs = float(r @ r)
    for _ in range(iters):
        hp = fvp(p)
        if not np.isfinite(hp).all():
            raise NumericalError("non-finite Fisher-vector product in CG")
        alpha = rs / float(p @ hp)
        x = x + alpha * p
        r = r - alpha * hp
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise NumericalError("non-finite residual in CG")
        if np.sqrt(rs_new) / b_norm < tol:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    residual = float(np.linalg.norm(fvp(x) - b)) / b_norm
    return x, residual


def trust_region_update(
    pol: GaussianPolicy,
    kl_states: np.ndarray,
    loss_and_grad: Callable[[GaussianPolicy], tuple[float, np.ndarray]],
    loss_value: Callable[[GaussianPolicy], float],
    config: TrpoConfig,
) -> tuple[GaussianPolicy, dict]:
    """One KL-constrained natural-gradient step on an arbitrary loss.

    The constraint is always mean KL(old || new) over ``kl_states``; the
    loss may be the plain surrogate or a penalized ensemble objective.
    Numerical failures reject the step instead of crashing the run.
    """
    diag = {
        "surrogate_before": np.nan,
        "surrogate_after": np.nan,
        "mean_kl": 0.0,
        "cg_residual": np.nan,
        "backtracks": 0,
        "accepted": False,
    }
    loss0, grad = loss_and_grad(pol)
    diag["surrogate_before"] = loss0
    diag["surrogate_after"] = loss0
    if not (np.isfinite(loss0) and np.isfinite(grad).all()):
        return pol, diag

    fvp_states = np.asarray(kl_states)[:: config.fvp_subsample]
    fvp_acts = nn.forward_activations(pol.mean_net, fvp_states)

    def fvp(v):
        return fisher_vector_product(
            pol, fvp_states, v, config.cg_damping, _activations=fvp_acts
        )

    try:
        direction, residual = conjugate_gradient(fvp, grad, config.cg_iters)
    except NumericalError:
        return pol, diag
    diag["cg_residual"] = residual
    shs = float(direction @ fvp(direction))
    if not np.isfinite(shs) or shs <= 1e-16:
        return pol, diag
    full_step = np.sqrt(2.0 * config.max_kl / shs) * direction

    theta0 = policy_params(pol)
    for j in range(config.max_backtracks + 1):
        candidate = policy_with_params(
            pol, theta0 - (config.backtrack_ratio**j) * full_step
        )
        measured_kl = float(kl_batch(pol, candidate, kl_states).mean())
        loss_j = loss_value(candidate)
        diag["backtracks"] = j
        if (
            np.isfinite(loss_j)
            and np.isfinite(measured_kl)
            and measured_kl <= config.max_kl
            and loss_j < loss0
        ):
            diag["surrogate_after"] = loss_j
            diag["mean_kl"] = measured_kl
            diag["accepted"] = True
            return candidate, diag
    diag["backtracks"] = config.max_backtracks + 1
    return pol, diag


def trpo_step(
    pol: GaussianPolicy, batch: AdvantageBatch, config: TrpoConfig
) -> tuple[GaussianPolicy, dict]:
    """Standard single-policy TRPO update on an advantage batch."""
    return trust_region_update(
        pol,
        batch.states,
        lambda p: surrogate_loss(p, batch),
        lambda p: surrogate_loss_value(p, batch),
        config,
    )
