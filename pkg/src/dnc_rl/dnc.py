"""Divide-and-conquer ensemble training.

Outline: cluster sampled initial states into contexts, train one local
policy per context with a TRPO-style trust-region step on a penalized
surrogate, and periodically distill the ensemble into a single global
policy that the local policies are then reset to.  The penalty couples
each pair of local policies through both directions of their KL
divergence, each direction averaged over the states the first argument's
own data visited:

    loss_i = -E_i[A * ratio]
             + alpha * rho_i * sum_j rho_j * ( E_i[KL(pi_i || pi_j)]
                                              + E_j[KL(pi_j || pi_i)] )

Within a round the locals update in ascending context order and each
update sees peers at their freshest parameters (Gauss-Seidel sweep).

Comparison variants share this loop: "unconstrained" drops the penalty,
"centralized" and "distral" penalize divergence from a supervised
central policy refit every iteration (distral additionally never resets
or distills), "trpo_monolithic" collapses to one unrestricted context
with the full n*B batch, and "dnc_no_distill" keeps the pairwise penalty
but never distills, leaving the local ensemble as the product.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .envs import EpisodeRecord, collect_trajectories, rollout_episode, sample_initial_states
from .errors import ConfigError, StaleDataError
from .metrics import MetricsRow
from .partition import Partition, kmeans
from .policy import (
    GaussianPolicy,
    kl_and_grad,
    kl_batch,
    kl_grad_wrt_second,
    make_policy,
    policy_params,
    policy_with_params,
    weighted_logp_grad,
)
from .rng import Rng
from .trpo import (
    AdvantageBatch,
    TrpoConfig,
    ValueFunction,
    compute_advantages,
    fit_value_function,
    make_value_function,
    surrogate_loss,
    surrogate_loss_value,
    trust_region_update,
)

VARIANTS = (
    "dnc",
    "centralized",
    "distral",
    "unconstrained",
    "trpo_monolithic",
    "dnc_no_distill",
)

# Variants whose penalty couples local policies pairwise.
_PAIRWISE = ("dnc", "dnc_no_distill")
# Variants that penalize divergence from a supervised central policy.
_CENTRAL = ("centralized", "distral")
# Variants that periodically distill and reset the locals.
_DISTILLING = ("dnc", "centralized", "unconstrained")

# Seed-stream identifiers (children of the experiment seed).
STREAM_PARTITION = 0
STREAM_INIT = 1
STREAM_COLLECT = 2
STREAM_EVAL = 3
STREAM_DISTILL = 4
STREAM_FINAL_EVAL = 5


@dataclass(frozen=True)
class DnCConfig:
    n_contexts: int = 4
    alpha: float = 0.1
    distill_period: int = 25
    per_context_batch: int = 2000
    outer_rounds: int = 12
    variant: str = "dnc"
    distill_epochs: int = 300
    distill_step_size: float = 0.1
    policy_hidden: tuple[int, ...] = (64, 64)
    partition_samples: int = 10000
    distill_max_pairs: int = 50000
    central_refit_epochs: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.distill_period < 1:
            raise ConfigError("distill_period must be >= 1")
        if self.n_contexts < 1:
            raise ConfigError("n_contexts must be >= 1")

    @property
    def total_iterations(self) -> int:
        return self.outer_rounds * self.distill_period


@dataclass
class EnsembleState:
    local_policies: list[GaussianPolicy]
    global_policy: GaussianPolicy
    partition: Optional[Partition]
    value_fns: list[ValueFunction]  # one per context plus a spare for the global
    iteration: int = 0

    @property
    def n(self) -> int:
        return len(self.local_policies)

    def context_weights(self) -> np.ndarray:
        if self.partition is None:
            return np.ones(self.n) / self.n
        return self.partition.weights


@dataclass(frozen=True)
class PenaltyReport:
    """pairwise_kl[i][j] estimates E over context-i data of KL(pi_i || pi_j)."""

    pairwise_kl: np.ndarray
    weighted_penalty_total: float
    n_terms: int


class EvalResult(NamedTuple):
    mean_return: float
    success_rate: float


class OracleEvalResult(NamedTuple):
    mean_return: float
    success_rate: float
    selections: list[int]


@dataclass
class RunResult:
    global_policy: GaussianPolicy
    ensemble: EnsembleState
    metrics: list[MetricsRow]
    diagnostics: list[dict]
    final_eval: EvalResult


def _local_loss(
    candidate: GaussianPolicy,
    i: int,
    locals_: list[GaussianPolicy],
    weights: np.ndarray,
    batches: list[AdvantageBatch],
    alpha: float,
    variant: str,
    central: Optional[GaussianPolicy],
    want_grad: bool,
) -> tuple[float, Optional[np.ndarray]]:
    if want_grad:
        loss, grad = surrogate_loss(candidate, batches[i])
    else:
        loss, grad = surrogate_loss_value(candidate, batches[i]), None

    if alpha == 0.0 or variant in ("unconstrained", "trpo_monolithic"):
        return loss, grad

    rho_i = float(weights[i])
    if variant in _CENTRAL:
        if central is None:
            raise StaleDataError("central policy unavailable for penalty")
        if want_grad:
            kl, kl_grad = kl_and_grad(candidate, central, batches[i].states)
            grad = grad + alpha * rho_i * kl_grad
        else:
            kl = float(kl_batch(candidate, central, batches[i].states).mean())
        return loss + alpha * rho_i * kl, grad

    # Pairwise penalty: the candidate appears both as the divergence's
    # first argument on its own data and as the reference on peer data.
    penalty = 0.0
    pen_grad = np.zeros(candidate.n_params) if want_grad else None
    for j, peer in enumerate(locals_):
        if j == i:
            continue
        rho_j = float(weights[j])
        if want_grad:
            kl_own, g_own = kl_and_grad(candidate, peer, batches[i].states)
            kl_other, g_other = kl_grad_wrt_second(peer, candidate, batches[j].states)
            pen_grad += rho_j * (g_own + g_other)
        else:
            kl_own = float(kl_batch(candidate, peer, batches[i].states).mean())
            kl_other = float(kl_batch(peer, candidate, batches[j].states).mean())
        penalty += rho_j * (kl_own + kl_other)
    loss = loss + alpha * rho_i * penalty
    if want_grad:
        grad = grad + alpha * rho_i * pen_grad
    return loss, grad


def dnc_local_loss(
    i: int,
    ensemble: EnsembleState,
    batches: list[Optional[AdvantageBatch]],
    alpha: float,
    central: Optional[GaussianPolicy] = None,
    variant: str = "dnc",
) -> tuple[float, np.ndarray]:
    """Penalized surrogate for local policy i and its gradient.

    All peer policies are treated as constants; only pi_i receives
    gradient, including through the terms where it is the KL reference.
    """
    if any(b is None for b in batches) or len(batches) != ensemble.n:
        raise StaleDataError("need a current advantage batch for every context")
    loss, grad = _local_loss(
        ensemble.local_policies[i],
        i,
        ensemble.local_policies,
        ensemble.context_weights(),
        batches,
        alpha,
        variant,
        central,
        want_grad=True,
    )
    return loss, grad


def variant_penalty(
    variant: str,
    ensemble: EnsembleState,
    batches: list[AdvantageBatch],
    i: int,
    alpha: float,
    central: Optional[GaussianPolicy] = None,
) -> float:
    """The penalty term (without the surrogate) entering local loss i."""
    surrogate = surrogate_loss_value(ensemble.local_policies[i], batches[i])
    total, _ = _local_loss(
        ensemble.local_policies[i],
        i,
        ensemble.local_policies,
        ensemble.context_weights(),
        batches,
        alpha,
        variant,
        central,
        want_grad=False,
    )
    return total - surrogate


def penalty_report(ensemble: EnsembleState, batches: list[AdvantageBatch]) -> PenaltyReport:
    """All n^2 cross-context divergence estimates on current data."""
    n = ensemble.n
    weights = ensemble.context_weights()
    pairwise = np.zeros((n, n))
    for i in range(n):
        states = batches[i].states
        for j in range(n):
            pairwise[i, j] = float(
                kl_batch(ensemble.local_policies[i], ensemble.local_policies[j], states).mean()
            )
    total = float((weights[:, None] * weights[None, :] * pairwise).sum())
    return PenaltyReport(pairwise, total, n * n)


def _mle_fit(
    start: GaussianPolicy,
    datasets: list[tuple[np.ndarray, np.ndarray]],
    weights: np.ndarray,
    epochs: int,
    step_size: float,
    momentum: float = 0.9,
    clip_norm: float = 10.0,
) -> GaussianPolicy:
    """Weighted maximum-likelihood fit of a policy to state-action data.

    Minimizes sum_i w_i * mean over dataset i of -log pi(a|s) by
    full-batch gradient descent from the given starting parameters; both
    the mean net and the log-stds are fit.  Heavy-ball momentum and a
    gradient-norm cap keep the fixed step size workable across the large
    effective-curvature swings the log-std coupling produces.
    """
    states = np.concatenate([d[0] for d in datasets])
    actions = np.concatenate([d[1] for d in datasets])
    coeffs = np.concatenate(
        [np.full(len(d[0]), -float(w) / len(d[0])) for d, w in zip(datasets, weights)]
    )
    pol = start
    theta = policy_params(pol)
    velocity = np.zeros_like(theta)
    for _ in range(epochs):
        grad = weighted_logp_grad(pol, states, actions, coeffs)
        norm = float(np.linalg.norm(grad))
        if norm > clip_norm:
            grad = grad * (clip_norm / norm)
        velocity = momentum * velocity - step_size * grad
        theta = theta + velocity
        pol = policy_with_params(pol, theta)
    return pol


def distill_loss(pol: GaussianPolicy, datasets, weights) -> float:
    from .policy import log_density_batch

    total = 0.0
    for (states, actions), w in zip(datasets, weights):
        total += -float(w) * float(log_density_batch(pol, states, actions).mean())
    return total


def distill(
    ensemble: EnsembleState,
    retained: list[list[tuple[np.ndarray, np.ndarray]]],
    config: DnCConfig,
    rng: Rng,
) -> GaussianPolicy:
    """Fit the global policy to the retained local-policy trajectories.

    Data per context is capped by uniform subsampling; contexts weigh in
    by their partition probability.  Optimization warm-starts at the
    current global policy.
    """
    if not any(retained):
        raise StaleDataError("no retained trajectories to distill from")
    weights = ensemble.context_weights()
    datasets = []
    for i, chunks in enumerate(retained):
        if not chunks:
            raise StaleDataError(f"context {i} has no retained trajectories")
        states = np.concatenate([c[0] for c in chunks])
        actions = np.concatenate([c[1] for c in chunks])
        if len(states) > config.distill_max_pairs:
            idx = np.sort(rng.child(i).choice_indices(len(states), config.distill_max_pairs))
            states, actions = states[idx], actions[idx]
        datasets.append((states, actions))
    return _mle_fit(
        ensemble.global_policy,
        datasets,
        weights,
        config.distill_epochs,
        config.distill_step_size,
    )


def _refit_central(
    central: GaussianPolicy,
    episode_sets: list[list[EpisodeRecord]],
    weights: np.ndarray,
    config: DnCConfig,
) -> GaussianPolicy:
    datasets = [
        (
            np.concatenate([ep.states[:-1] for ep in eps]),
            np.concatenate([ep.actions for ep in eps]),
        )
        for eps in episode_sets
    ]
    return _mle_fit(
        central, datasets, weights, config.central_refit_epochs, config.distill_step_size
    )


def dnc_update_round(
    ensemble: EnsembleState,
    env,
    dnc_config: DnCConfig,
    trpo_config: TrpoConfig,
    rng: Rng,
    central: Optional[GaussianPolicy] = None,
    batch_size: Optional[int] = None,
    restricted: bool = True,
) -> tuple[PenaltyReport, list[dict], list[list[EpisodeRecord]]]:
    """One iteration: collect per context, update each local in sequence.

    Local policies updated earlier in the sweep are seen at their new
    parameters by the later ones.  Mutates the ensemble in place and
    bumps its iteration counter.
    """
    n = ensemble.n
    variant = dnc_config.variant
    b = batch_size if batch_size is not None else dnc_config.per_context_batch
    it = ensemble.iteration + 1

    episode_sets: list[list[EpisodeRecord]] = []
    for i in range(n):
        restriction = (ensemble.partition, i) if (restricted and ensemble.partition) else None
        episode_sets.append(
            collect_trajectories(
                env,
                ensemble.local_policies[i],
                restriction,
                b,
                rng.child(STREAM_COLLECT, it, i),
            )
        )

    batches = [
        compute_advantages(eps, ensemble.value_fns[i], trpo_config)
        for i, eps in enumerate(episode_sets)
    ]

    weights = ensemble.context_weights()
    diagnostics = []
    for i in range(n):

        def loss_and_grad(cand, _i=i):
            return _local_loss(
                cand, _i, ensemble.local_policies, weights, batches,
                dnc_config.alpha, variant, central, want_grad=True,
            )

        def loss_value(cand, _i=i):
            val, _ = _local_loss(
                cand, _i, ensemble.local_policies, weights, batches,
                dnc_config.alpha, variant, central, want_grad=False,
            )
            return val

        new_pol, diag = trust_region_update(
            ensemble.local_policies[i],
            batches[i].states,
            loss_and_grad,
            loss_value,
            trpo_config,
        )
        ensemble.local_policies[i] = new_pol
        diag["scope"] = f"context:{i}"
        diag["iteration"] = it
        diagnostics.append(diag)

    for i in range(n):
        ensemble.value_fns[i] = fit_value_function(
            ensemble.value_fns[i], episode_sets[i], trpo_config
        )

    report = penalty_report(ensemble, batches)
    ensemble.iteration = it
    return report, diagnostics, episode_sets


def evaluate_policy(env, pol: GaussianPolicy, episodes: int, rng: Rng) -> EvalResult:
    records = [rollout_episode(env, pol, rng) for _ in range(episodes)]
    returns = [ep.total_return for ep in records]
    successes = [env.success(ep) for ep in records]
    return EvalResult(float(np.mean(returns)), float(np.mean(successes)))


def evaluate_oracle_ensemble(
    local_policies: list[GaussianPolicy],
    part: Partition,
    env,
    episodes: int,
    rng: Rng,
) -> OracleEvalResult:
    """Evaluate the local ensemble, picking each episode's policy by the
    true context of its initial state."""
    if part.k != len(local_policies):
        raise ConfigError("partition size does not match the ensemble")
    returns, successes, selections = [], [], []
    for _ in range(episodes):
        s0 = env.reset(rng)
        ctx = part.assign(s0)
        ep = rollout_episode(env, local_policies[ctx], rng, initial_state=s0, context_id=ctx)
        returns.append(ep.total_return)
        successes.append(env.success(ep))
        selections.append(ctx)
    return OracleEvalResult(float(np.mean(returns)), float(np.mean(successes)), selections)


def _batch_stats(env, episode_sets, i) -> tuple[float, float]:
    from .envs import is_complete

    eps = episode_sets[i]
    complete = [ep for ep in eps if is_complete(env, ep)]
    scored = complete if complete else eps
    mean_return = float(np.mean([ep.total_return for ep in scored]))
    success = float(np.mean([env.success(ep) for ep in complete])) if complete else 0.0
    return mean_return, success


def run_dnc(
    env,
    dnc_config: DnCConfig,
    trpo_config: TrpoConfig,
    rng: Rng,
    eval_cadence: int = 5,
    eval_episodes: int = 20,
    record_timing: bool = False,
    metrics_cb: Optional[Callable[[MetricsRow], None]] = None,
    diagnostics_cb: Optional[Callable[[dict], None]] = None,
    iteration_cb: Optional[Callable[[EnsembleState, int], None]] = None,
) -> RunResult:
    """Full training run for any variant; see the module docstring.

    All randomness comes from substreams of ``rng``: partitioning,
    initialization, per-(iteration, context) collection, evaluation, and
    distill subsampling each own a child stream, so trajectories are
    reproducible regardless of evaluation cadence.  The last iteration's
    evaluation always draws from the final-eval stream, which
    ``dnc eval --seed <run seed>`` reconstructs.
    """
    variant = dnc_config.variant
    monolithic = variant == "trpo_monolithic"
    n = 1 if monolithic else dnc_config.n_contexts
    batch = (
        dnc_config.per_context_batch * dnc_config.n_contexts
        if monolithic
        else dnc_config.per_context_batch
    )

    part = None
    if not monolithic:
        samples = sample_initial_states(
            env, dnc_config.partition_samples, rng.child(STREAM_PARTITION)
        )
        part = kmeans(samples, n, rng.child(STREAM_PARTITION, 1))

    global_policy = make_policy(
        env.spec.state_dim,
        env.spec.action_dim,
        dnc_config.policy_hidden,
        rng.child(STREAM_INIT, 0),
    )
    value_fns = [
        make_value_function(env.spec.state_dim, trpo_config.vf_hidden, rng.child(STREAM_INIT, 1, i))
        for i in range(n + 1)
    ]
    ensemble = EnsembleState([global_policy] * n, global_policy, part, value_fns, 0)
    central = global_policy if variant in _CENTRAL else None

    metrics: list[MetricsRow] = []
    diagnostics: list[dict] = []
    retained: list[list[tuple[np.ndarray, np.ndarray]]] = [[] for _ in range(n)]
    total_iters = dnc_config.total_iterations
    t_start = time.monotonic()

    def elapsed() -> float:
        return time.monotonic() - t_start if record_timing else 0.0

    def emit(row: MetricsRow) -> None:
        metrics.append(row)
        if metrics_cb is not None:
            metrics_cb(row)

    def evaluate(iteration: int) -> EvalResult:
        eval_rng = (
            rng.child(STREAM_FINAL_EVAL)
            if iteration == total_iters
            else rng.child(STREAM_EVAL, iteration, 0)
        )
        consumed = iteration * batch * n
        result = evaluate_policy(env, ensemble.global_policy, eval_episodes, eval_rng)
        emit(
            MetricsRow(iteration, "global", result.mean_return, result.success_rate,
                       last_penalty_total, consumed, elapsed())
        )
        if not monolithic:
            oracle = evaluate_oracle_ensemble(
                ensemble.local_policies, part, env, eval_episodes,
                rng.child(STREAM_EVAL, iteration, 1),
            )
            emit(
                MetricsRow(iteration, "oracle", oracle.mean_return, oracle.success_rate,
                           last_penalty_total, consumed, elapsed())
            )
        return result

    last_penalty_total = 0.0
    final_eval = evaluate(0)

    for t in range(1, total_iters + 1):
        report, round_diags, episode_sets = dnc_update_round(
            ensemble, env, dnc_config, trpo_config, rng,
            central=central, batch_size=batch, restricted=not monolithic,
        )
        last_penalty_total = report.weighted_penalty_total
        for d in round_diags:
            diagnostics.append(d)
            if diagnostics_cb is not None:
                diagnostics_cb(d)

        weights = ensemble.context_weights()
        for i in range(n):
            mean_return, success = _batch_stats(env, episode_sets, i)
            ctx_pen = float((weights * report.pairwise_kl[i]).sum())
            emit(
                MetricsRow(t, f"context:{i}", mean_return, success, ctx_pen,
                           t * batch, elapsed())
            )

        if variant in _DISTILLING:
            for i, eps in enumerate(episode_sets):
                retained[i].append(
                    (
                        np.concatenate([ep.states[:-1] for ep in eps]),
                        np.concatenate([ep.actions for ep in eps]),
                    )
                )

        if monolithic:
            ensemble.global_policy = ensemble.local_policies[0]

        if variant in _CENTRAL:
            central = _refit_central(central, episode_sets, weights, dnc_config)
            ensemble.global_policy = central

        if iteration_cb is not None:
            iteration_cb(ensemble, t)

        if t % dnc_config.distill_period == 0 and variant in _DISTILLING:
            ensemble.global_policy = distill(
                ensemble, retained, dnc_config, rng.child(STREAM_DISTILL, t)
            )
            retained = [[] for _ in range(n)]
            ensemble.local_policies = [ensemble.global_policy] * n
            if variant in _CENTRAL:
                central = ensemble.global_policy

        if t == total_iters or (eval_cadence > 0 and t % eval_cadence == 0):
            final_eval = evaluate(t)

    return RunResult(ensemble.global_policy, ensemble, metrics, diagnostics, final_eval)
