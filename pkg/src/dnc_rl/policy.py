"""Diagonal-Gaussian stochastic policy: a ~ N(mu(s), diag(sigma^2)).

The mean comes from an MLP; the log standard deviations are a free
state-independent vector, initialized to zero (unit covariance).  A
policy's flat parameter vector is the mean net's flat parameters followed
by the log-std vector; all gradients below use that layout.

Closed forms used throughout (per action dimension, sigma = exp(ls)):

    log pi(a|s) = -1/2 * sum_i [ (a_i-mu_i)^2/sigma_i^2 + 2 ls_i + log 2pi ]
    KL(p||q)(s) = sum_i [ ls_q,i - ls_p,i
                          + (sigma_p,i^2 + (mu_p,i-mu_q,i)^2)/(2 sigma_q,i^2)
                          - 1/2 ]

and their exact derivatives with respect to means and log-stds; mean
gradients are pushed through the net by reverse mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import nn
from .errors import ConfigError, EmptyBatchError, ShapeError
from .nn import MlpParams
from .rng import Rng

LOG_STD_MIN = -20.0  # floor keeps densities finite when sigma collapses
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianPolicy:
    mean_net: MlpParams
    log_std: np.ndarray

    def __post_init__(self):
        ls = np.asarray(self.log_std, dtype=np.float64)
        if ls.shape != (self.mean_net.out_dim,):
            raise ShapeError(
                f"log_std shape {ls.shape} != ({self.mean_net.out_dim},)"
            )
        ls = np.maximum(ls, LOG_STD_MIN)
        object.__setattr__(self, "log_std", ls)
        # cached per-sample constants; policies are immutable snapshots
        object.__setattr__(self, "_sigma", np.exp(ls))
        object.__setattr__(self, "_inv_var", np.exp(-2.0 * ls))
        object.__setattr__(self, "_logdet", float((2.0 * ls + LOG_2PI).sum()))

    @property
    def state_dim(self) -> int:
        return self.mean_net.in_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_dim

    @property
    def n_params(self) -> int:
        return self.mean_net.n_params + self.action_dim


class ActionSample(NamedTuple):
    action: np.ndarray
    log_prob: float


def make_policy(state_dim: int, action_dim: int, hidden_sizes, rng: Rng) -> GaussianPolicy:
    """Fresh policy: scaled-uniform mean net, unit covariance (log_std = 0)."""
    net = nn.init_mlp((state_dim, *hidden_sizes, action_dim), rng)
    return GaussianPolicy(net, np.zeros(action_dim))


def policy_params(policy: GaussianPolicy) -> np.ndarray:
    return np.concatenate([nn.flatten_params(policy.mean_net), policy.log_std])


def policy_with_params(policy: GaussianPolicy, flat) -> GaussianPolicy:
    v = np.asarray(flat, dtype=np.float64)
    if v.shape != (policy.n_params,):
        raise ShapeError(f"expected ({policy.n_params},) params, got {v.shape}")
    net = nn.unflatten_params(policy.mean_net, v[: policy.mean_net.n_params])
    return GaussianPolicy(net, v[policy.mean_net.n_params :].copy())


def mean_batch(policy: GaussianPolicy, states: np.ndarray) -> np.ndarray:
    return nn.mlp_forward_batch(policy.mean_net, states)


def _log_density_from_mean(policy: GaussianPolicy, mu: np.ndarray, action: np.ndarray) -> float:
    quad = ((action - mu) ** 2 * policy._inv_var).sum()
    return float(-0.5 * (quad + policy._logdet))


def sample_action(policy: GaussianPolicy, state, rng: Rng) -> ActionSample:
    s = np.asarray(state, dtype=np.float64)
    mu = nn.mlp_forward(policy.mean_net, s)
    action = mu + policy._sigma * rng.normal(size=policy.action_dim)
    # same mean and arithmetic as log_density, so the pair is exact
    return ActionSample(action, _log_density_from_mean(policy, mu, action))


def log_density_batch(policy: GaussianPolicy, states, actions) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (states.shape[0], policy.action_dim):
        raise ShapeError(
            f"actions shape {actions.shape} != ({states.shape[0]}, {policy.action_dim})"
        )
    mu = mean_batch(policy, states)
    inv_var = np.exp(-2.0 * policy.log_std)
    quad = ((actions - mu) ** 2 * inv_var).sum(axis=1)
    return -0.5 * (quad + (2.0 * policy.log_std + LOG_2PI).sum())


def log_density(policy: GaussianPolicy, state, action) -> float:
    s = np.asarray(state, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (policy.action_dim,):
        raise ShapeError(f"action shape {a.shape} != ({policy.action_dim},)")
    mu = nn.mlp_forward(policy.mean_net, s)
    return _log_density_from_mean(policy, mu, a)


def weighted_logp_grad(
    policy: GaussianPolicy, states, actions, coeffs
) -> np.ndarray:
    """Gradient of sum_t coeffs_t * log pi(a_t|s_t) in flat parameter layout."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    c = np.asarray(coeffs, dtype=np.float64)[:, None]
    acts = nn.forward_activations(policy.mean_net, states)
    mu = acts[-1]
    inv_var = np.exp(-2.0 * policy.log_std)
    resid = actions - mu
    mu_grad_rows = c * resid * inv_var
    net_grad, _ = nn.mlp_backward_batch(policy.mean_net, states, mu_grad_rows, activations=acts)
    ls_grad = (c * (resid**2 * inv_var - 1.0)).sum(axis=0)
    return np.concatenate([net_grad, ls_grad])


def kl_batch(p: GaussianPolicy, q: GaussianPolicy, states) -> np.ndarray:
    """Closed-form KL(p||q) evaluated at each state.

    Written as a sum of two individually non-negative terms,
    0.5*expm1(2d) - d with d = ls_p - ls_q, plus the scaled squared mean
    gap, so the result is >= 0 in floating point and exactly 0 when the
    parameters coincide.
    """
    if p.action_dim != q.action_dim:
        raise ShapeError("policies act in different dimensions")
    states = np.asarray(states, dtype=np.float64)
    mu_p, mu_q = mean_batch(p, states), mean_batch(q, states)
    d = p.log_std - q.log_std
    inv_var_q = np.exp(-2.0 * q.log_std)
    per_dim = (0.5 * np.expm1(2.0 * d) - d) + 0.5 * (mu_p - mu_q) ** 2 * inv_var_q
    return per_dim.sum(axis=1)


def kl_divergence(p: GaussianPolicy, q: GaussianPolicy, state) -> float:
    s = np.asarray(state, dtype=np.float64)
    return float(kl_batch(p, q, s[None, :])[0])


def kl_and_grad(
    p: GaussianPolicy, q: GaussianPolicy, states, mu_q: Optional[np.ndarray] = None
) -> tuple[float, np.ndarray]:
    """Mean KL(p||q) over states and its exact gradient w.r.t. p's parameters.

    q's means may be passed in when the caller already evaluated them.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.shape[0] == 0:
        raise EmptyBatchError("kl_and_grad needs a non-empty state batch")
    n = states.shape[0]
    acts = nn.forward_activations(p.mean_net, states)
    mu_p = acts[-1]
    if mu_q is None:
        mu_q = mean_batch(q, states)
    d = p.log_std - q.log_std
    inv_var_q = np.exp(-2.0 * q.log_std)
    per_dim = (0.5 * np.expm1(2.0 * d) - d) + 0.5 * (mu_p - mu_q) ** 2 * inv_var_q
    mean_kl = float(per_dim.sum(axis=1).mean())
    mu_grad_rows = (mu_p - mu_q) * inv_var_q / n
    net_grad, _ = nn.mlp_backward_batch(p.mean_net, states, mu_grad_rows, activations=acts)
    ls_grad = np.expm1(2.0 * d)  # = var_p/var_q - 1, exactly 0 at equality
    return mean_kl, np.concatenate([net_grad, ls_grad])


def kl_grad_wrt_second(
    p: GaussianPolicy, q: GaussianPolicy, states, mu_p: Optional[np.ndarray] = None
) -> tuple[float, np.ndarray]:
    """Mean KL(p||q) over states and its gradient w.r.t. q's parameters.

    Needed where a policy appears as the *reference* of a KL penalty: the
    term E_{data_j}[KL(pi_j || pi_i)] still carries gradient into pi_i.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.shape[0] == 0:
        raise EmptyBatchError("kl_grad_wrt_second needs a non-empty state batch")
    n = states.shape[0]
    if mu_p is None:
        mu_p = mean_batch(p, states)
    acts = nn.forward_activations(q.mean_net, states)
    mu_q = acts[-1]
    d = p.log_std - q.log_std
    inv_var_q = np.exp(-2.0 * q.log_std)
    gap = (mu_p - mu_q) ** 2 * inv_var_q
    per_dim = (0.5 * np.expm1(2.0 * d) - d) + 0.5 * gap
    mean_kl = float(per_dim.sum(axis=1).mean())
    mu_grad_rows = (mu_q - mu_p) * inv_var_q / n
    net_grad, _ = nn.mlp_backward_batch(q.mean_net, states, mu_grad_rows, activations=acts)
    ls_grad = -np.expm1(2.0 * d) - gap.mean(axis=0)
    return mean_kl, np.concatenate([net_grad, ls_grad])


class MixtureBoundCheck(NamedTuple):
    lhs: float
    lhs_stderr: float
    rhs: float


def mixture_kl_bound_check(
    policies: list[GaussianPolicy],
    weights,
    state_sampler: Callable[[int, Rng], np.ndarray],
    n_samples: int,
    rng: Rng,
) -> MixtureBoundCheck:
    """Monte-Carlo check that E[KL(ensemble || mixture)] is bounded by the
    weighted sum of pairwise KLs.

    lhs averages log pi_i(a|s) - log sum_j w_j pi_j(a|s) with i ~ weights,
    s from the sampler, a ~ pi_i(.|s); rhs is the weighted pairwise-KL sum
    on the same states (analytic in the actions).  The bound holds per
    state, so lhs <= rhs + sampling noise.
    """
    w = np.asarray(weights, dtype=np.float64)
    if len(policies) == 0 or w.shape != (len(policies),):
        raise ConfigError("need one weight per policy")
    if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
        raise ConfigError("weights must be non-negative and sum to 1")

    states = np.asarray(state_sampler(n_samples, rng.child(0)), dtype=np.float64)
    draw = rng.child(1)
    comps = np.searchsorted(np.cumsum(w), draw.uniform(size=n_samples))
    comps = np.minimum(comps, len(policies) - 1)
    noise = draw.normal(size=(n_samples, policies[0].action_dim))

    actions = np.empty((n_samples, policies[0].action_dim))
    for i, pol in enumerate(policies):
        rows = comps == i
        if rows.any():
            mu = mean_batch(pol, states[rows])
            actions[rows] = mu + np.exp(pol.log_std) * noise[rows]

    logps = np.stack(
        [log_density_batch(pol, states, actions) for pol in policies], axis=1
    )
    own_logp = logps[np.arange(n_samples), comps]
    with np.errstate(divide="ignore"):  # zero weights drop out of the mixture
        shifted = logps + np.log(w)
    m = shifted.max(axis=1)
    mix_logp = m + np.log(np.exp(shifted - m[:, None]).sum(axis=1))
    samples = own_logp - mix_logp
    lhs = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0

    rhs = 0.0
    for i, pi in enumerate(policies):
        for j, pj in enumerate(policies):
            if w[i] == 0.0 or w[j] == 0.0:
                continue
            rhs += float(w[i] * w[j] * kl_batch(pi, pj, states).mean())
    return MixtureBoundCheck(lhs, stderr, rhs)


def save_policy(path, policy: GaussianPolicy) -> None:
    nn.write_checkpoint(
        path,
        policy.mean_net.layer_sizes,
        nn.flatten_params(policy.mean_net),
        policy.log_std,
    )


def load_policy(path) -> GaussianPolicy:
    sizes, flat, log_std = nn.read_checkpoint(path)
    net = nn.unflatten_params(nn.zeros_mlp(sizes), flat)
    return GaussianPolicy(net, log_std)
