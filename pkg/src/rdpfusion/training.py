"""Alternating optimisation of filter/estimator and the fusion-vector policy.

Phase one fits the filter and estimator by gradient descent on the sampled
estimation error with the fusion head frozen. Phase two fits a critic to the
undiscounted cost-to-go and updates the fusion head with the clipped
probability-ratio surrogate. Costs are minimised throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import no_grad
from .errors import InvalidInputError
from .fusion import (
    Critic,
    Estimator,
    FusionPolicy,
    TrajectoryBatch,
    run_episodes,
    scaled_budget,
    squared_error,
)
from .kernels import audit_gains
from .nn import Adam

MAX_LOG_RATIO = 20.0


@dataclass
class PpoConfig:
    clip_epsilon: float = 0.2
    actor_lr: float = 3e-3
    critic_lr: float = 3e-3
    learning_rate: float = 3e-3
    batch_episodes: int = 64
    epochs_per_batch: int = 4
    outer_rounds: int = 3
    inner_convergence_tol: float = 1e-4
    patience: int = 10
    max_joint_updates: int = 300
    min_joint_updates: int = 0
    max_ppo_iterations: int = 60
    critic_warmup: int = 20
    val_episodes: int = 128
    normalize_advantages: bool = True
    surrogate: str = "min"
    gae_lambda: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.clip_epsilon < 1.0:
            raise InvalidInputError("clip_epsilon must lie in [0, 1)")
        for name in ("actor_lr", "critic_lr", "learning_rate"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise InvalidInputError("gae_lambda must lie in [0, 1]")
        if self.min_joint_updates < 0:
            raise InvalidInputError("min_joint_updates must be >= 0")
        if self.surrogate not in ("min", "max"):
            raise InvalidInputError("surrogate must be 'min' or 'max'")
        for name in ("batch_episodes", "epochs_per_batch", "patience", "val_episodes"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")


class AuditFailure(RuntimeError):
    """A rollout's recomputed leakage broke the budget; training must stop."""


def audit_batch(batch: TrajectoryBatch):
    totals, first_bad = audit_gains(
        batch.gains, np.full(batch.size, batch.budget), batch.alpha, batch.d
    )
    if np.any(first_bad >= 0) or np.any(totals > batch.budget + 1e-9):
        i = int(np.argmax((first_bad >= 0) | (totals > batch.budget + 1e-9)))
        raise AuditFailure(
            f"episode {i}: leakage {totals[i]:.6g} vs budget {batch.budget:.6g}, first bad step {first_bad[i]}"
        )
    return totals


# --------------------------------------------------------------------------
# phase one: filter + estimator


def joint_loss(policy: FusionPolicy, estimator: Estimator, batch: TrajectoryBatch, error_fn=squared_error):
    """(1/M) sum_i sum_k d(X_k, X~_k) replayed on the tape.

    Noise and clipped gains are constants of the rollout; only filter and
    estimator parameters receive gradient.
    """
    B, K = batch.size, batch.horizon
    h_y = policy.initial_state(B)[1]
    h_e = estimator.initial_state(B)
    total = None
    for k in range(K):
        h_y = policy.update_y(h_y, batch.measurements[:, k], batch.active_mask[:, k])
        f = policy.filter_outputs(h_y)
        z = ad.add(ad.tsum(ad.mul(f, batch.gains[:, k, :, None]), axis=1), batch.noise[:, k])
        xhat, h_e = estimator(h_e, z)
        e = ad.tsum(error_fn(batch.states[:, k], xhat))
        total = e if total is None else ad.add(total, e)
    return ad.mul(total, 1.0 / B)


def joint_update(policy, estimator, batch, optimizer: Adam, error_fn=squared_error):
    """One descent step on the batch estimation error; returns the mean error per step."""
    loss = joint_loss(policy, estimator, batch, error_fn)
    ad.backward(loss)
    optimizer.step()
    return float(loss.value) / batch.horizon


def make_joint_optimizer(policy, estimator, cfg: PpoConfig):
    return Adam(policy.filter_parameters() + estimator.parameters(), cfg.learning_rate)


# --------------------------------------------------------------------------
# phase two: critic + actor


def cost_to_go(errors):
    """Undiscounted reverse cumulative sum along the step axis."""
    return np.flip(np.cumsum(np.flip(errors, axis=-1), axis=-1), axis=-1)


def critic_values(critic: Critic, batch: TrajectoryBatch):
    """J_psi(s_k, h_k) per step as a Tensor list; h_k consumes Z_{k-1}."""
    B = batch.size
    h = critic.initial_state(B)
    zp = batch.z_prev()
    s = scaled_budget(batch.remaining, batch.budget)
    vals = []
    for k in range(batch.horizon):
        v, h = critic.step(h, zp[:, k], s[:, k])
        vals.append(v)
    return vals


def advantages_from_values(errors, values, normalize=True, gae_lambda=1.0):
    """Raw advantage and its batch-normalised version.

    With ``gae_lambda=1`` the raw advantage is ``cost_to_go - value``.
    Smaller values blend in the critic's one-step bootstrap
    ``c_k + J_{k+1} - J_k`` (J_{K+1} = 0) with weights ``lambda**j``.
    """
    errors = np.asarray(errors, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if gae_lambda >= 1.0:
        raw = cost_to_go(errors) - values
    else:
        nxt = np.zeros_like(values)
        nxt[..., :-1] = values[..., 1:]
        delta = errors + nxt - values
        raw = np.zeros_like(delta)
        acc = np.zeros(delta.shape[:-1])
        for k in range(delta.shape[-1] - 1, -1, -1):
            acc = delta[..., k] + gae_lambda * acc
            raw[..., k] = acc
    if not normalize:
        return raw, raw.copy()
    sd = raw.std()
    norm = (raw - raw.mean()) / sd if sd > 1e-12 else np.zeros_like(raw)
    return raw, norm


def compute_advantages(batch: TrajectoryBatch, critic: Critic, normalize=True, gae_lambda=1.0):
    with no_grad():
        vals = np.stack([v.value for v in critic_values(critic, batch)], axis=1)
    return advantages_from_values(batch.errors, vals, normalize, gae_lambda)


def critic_update(critic: Critic, batch: TrajectoryBatch, optimizer: Adam):
    """One step on (1/M) sum_i sum_k (J_k - cost_to_go_k)^2; returns that loss."""
    target = cost_to_go(batch.errors)
    vals = critic_values(critic, batch)
    total = None
    for k, v in enumerate(vals):
        e = ad.tsum(ad.square(ad.sub(v, target[:, k])))
        total = e if total is None else ad.add(total, e)
    loss = ad.mul(total, 1.0 / batch.size)
    ad.backward(loss)
    optimizer.step()
    return float(loss.value)


def policy_means(policy: FusionPolicy, batch: TrajectoryBatch):
    """Recompute fusion-head outputs along the recorded output history."""
    B = batch.size
    h = policy.initial_state(B)[0]
    zp = batch.z_prev()
    s = scaled_budget(batch.remaining, batch.budget)
    means = []
    for k in range(batch.horizon):
        h = policy.update_z(h, zp[:, k])
        means.append(policy.fusion_vector(h, s[:, k]))
    return means


def surrogate_loss(policy, batch: TrajectoryBatch, adv, clip_epsilon, form="min"):
    """Clipped ratio surrogate averaged as (1/M) sum over episodes and steps.

    ``form="min"`` takes min(r G, clip(r) G) literally; ``"max"`` is the
    pessimistic bound for a cost, the mirror image of reward-maximising PPO.

    Returns ``(loss Tensor, diagnostics)``; samples whose log-ratio exceeds
    MAX_LOG_RATIO in magnitude are masked out.
    """
    means = policy_means(policy, batch)
    B, K = batch.size, batch.horizon
    total = None
    clipped = 0
    masked = 0
    for k in range(K):
        logp = policy.log_prob(batch.actions[:, k], means[k])
        log_ratio = ad.sub(logp, batch.log_prob[:, k])
        lr_val = log_ratio.value
        keep = np.abs(lr_val) <= MAX_LOG_RATIO
        masked += int((~keep).sum())
        ratio = ad.exp(ad.clip(log_ratio, -MAX_LOG_RATIO, MAX_LOG_RATIO))
        g = adv[:, k] * keep
        unclipped = ad.mul(ratio, g)
        clipped_term = ad.mul(ad.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon), g)
        r = ratio.value
        clipped += int((keep & ((r < 1.0 - clip_epsilon) | (r > 1.0 + clip_epsilon))).sum())
        pick = ad.minimum if form == "min" else ad.maximum
        term = ad.tsum(pick(unclipped, clipped_term))
        total = term if total is None else ad.add(total, term)
    loss = ad.mul(total, 1.0 / B)
    n = max(B * K - masked, 1)
    return loss, {"clip_fraction": clipped / n, "masked": masked}


def ppo_update(policy, batch, adv, cfg: PpoConfig, optimizer: Adam):
    """Several epochs on the surrogate for one batch; returns diagnostics."""
    diag = {}
    first = None
    for _ in range(cfg.epochs_per_batch):
        loss, diag = surrogate_loss(policy, batch, adv, cfg.clip_epsilon, cfg.surrogate)
        if first is None:
            first = float(loss.value)
        ad.backward(loss)
        optimizer.step()
    with no_grad():
        loss, diag = surrogate_loss(policy, batch, adv, cfg.clip_epsilon, cfg.surrogate)
    diag["surrogate"] = float(loss.value)
    diag["surrogate_before"] = first
    return diag


def make_actor_optimizer(policy, cfg):
    return Adam(policy.actor_parameters(), cfg.actor_lr)


# --------------------------------------------------------------------------
# evaluation and the outer loop


def balanced_replay(env, episodes):
    """Reset kwargs that cycle through a finite episode pool, or None.

    Replay environments otherwise draw episodes with replacement, which on a
    small split adds composition noise to every evaluation.
    """
    n = getattr(env, "pool_size", None)
    if not n:
        return None
    return {"episodes": np.arange(int(episodes)) % n}


def evaluate(env, policy, estimator, budget, alpha, seed, episodes, env_kwargs=None):
    if env_kwargs is None:
        env_kwargs = balanced_replay(env, episodes)
    batch = run_episodes(env, policy, estimator, budget, alpha, seed, batch=episodes, env_kwargs=env_kwargs)
    audit_batch(batch)
    return batch


@dataclass
class TrainingResult:
    policy: FusionPolicy
    estimator: Estimator
    critic: Critic | None
    log: list = field(default_factory=list)
    best_val_error: float = math.inf


class _Tracker:
    """Validation-best snapshotting plus patience bookkeeping."""

    def __init__(self, modules):
        self.modules = modules
        self.best = math.inf
        self.snapshot = self._state()

    def _state(self):
        return {k: m.state_dict() for k, m in self.modules.items() if m is not None}

    def offer(self, err):
        if err < self.best:
            self.best = err
            self.snapshot = self._state()
            return True
        return False

    def restore(self):
        for k, st in self.snapshot.items():
            self.modules[k].load_state_dict(st)


def _val_seed(seed):
    return [int(seed) if seed is not None else 0, 7919]


def _patience_loop(step_fn, eval_fn, patience, tol, max_steps, min_steps=0):
    """Run ``step_fn`` until validation error stalls for ``patience`` evaluations.

    The first ``min_steps`` steps always run, so an early plateau cannot end
    the phase before the networks have started to fit.
    """
    best, stale, n = eval_fn(), 0, 0
    while n < max_steps and (stale < patience or n < min_steps):
        step_fn(n)
        n += 1
        err = eval_fn()
        if err < best * (1.0 - tol):
            best, stale = err, 0
        else:
            stale += 1
    return best, n


def train_classical(env, val_env, policy, estimator, cfg: PpoConfig, budget, alpha, seed, log=None):
    """Fit filter and estimator under the fixed-gain mechanism."""
    log = [] if log is None else log
    tracker = _Tracker({"policy": policy, "estimator": estimator})
    opt = make_joint_optimizer(policy, estimator, cfg)
    rng = np.random.SeedSequence([int(seed), 1])

    def val():
        b = evaluate(val_env, policy, estimator, budget, alpha, _val_seed(seed), cfg.val_episodes)
        err = b.mean_error()
        tracker.offer(err)
        return err

    def step(n):
        b = run_episodes(env, policy, estimator, budget, alpha, rng.spawn(1)[0], batch=cfg.batch_episodes)
        audit_batch(b)
        err = joint_update(policy, estimator, b, opt)
        log.append({"round": 0, "phase": "joint", "update": n, "mean_error": err,
                    "mean_leakage_profile": b.leakage.mean(axis=0).tolist()})

    for _ in range(max(cfg.outer_rounds, 1)):
        _patience_loop(step, val, cfg.patience, cfg.inner_convergence_tol, cfg.max_joint_updates,
                       cfg.min_joint_updates)
    tracker.restore()
    return TrainingResult(policy, estimator, None, log, tracker.best)


def alternate_optimize(env, val_env, policy, estimator, critic, cfg: PpoConfig, budget, alpha, seed, log=None):
    """Alternate phase one and phase two for ``outer_rounds`` rounds.

    Returns the validation-best parameters (restored in place) and the log.
    """
    log = [] if log is None else log
    tracker = _Tracker({"policy": policy, "estimator": estimator, "critic": critic})
    if cfg.outer_rounds <= 0:
        return TrainingResult(policy, estimator, critic, log, math.inf)
    # same rollout stream as train_classical, so the first joint phase matches it
    ss = np.random.SeedSequence([int(seed), 1])
    joint_opt = make_joint_optimizer(policy, estimator, cfg)
    actor_opt = make_actor_optimizer(policy, cfg)
    critic_opt = Adam(critic.parameters(), cfg.critic_lr)
    round_best = math.inf

    def val():
        b = evaluate(val_env, policy, estimator, budget, alpha, _val_seed(seed), cfg.val_episodes)
        err = b.mean_error()
        tracker.offer(err)
        return err

    for rnd in range(cfg.outer_rounds):

        def joint_step(n):
            b = run_episodes(env, policy, estimator, budget, alpha, ss.spawn(1)[0], batch=cfg.batch_episodes)
            audit_batch(b)
            err = joint_update(policy, estimator, b, joint_opt)
            log.append({"round": rnd, "phase": "joint", "update": n, "mean_error": err,
                        "mean_leakage_profile": b.leakage.mean(axis=0).tolist()})

        _patience_loop(joint_step, val, cfg.patience, cfg.inner_convergence_tol, cfg.max_joint_updates,
                       cfg.min_joint_updates)

        if critic.value_scale == 1.0:
            b = run_episodes(env, policy, estimator, budget, alpha, ss.spawn(1)[0], batch=cfg.batch_episodes)
            critic.value_scale = max(float(cost_to_go(b.errors)[:, 0].mean()), 1e-6)

        def ppo_step(n):
            b = run_episodes(env, policy, estimator, budget, alpha, ss.spawn(1)[0],
                             batch=cfg.batch_episodes, mode="exploratory")
            audit_batch(b)
            warm = cfg.critic_warmup if n == 0 else 1
            for _ in range(warm):
                closs = critic_update(critic, b, critic_opt)
            raw, adv = compute_advantages(b, critic, cfg.normalize_advantages, cfg.gae_lambda)
            diag = ppo_update(policy, b, adv if cfg.normalize_advantages else raw, cfg, actor_opt)
            log.append({"round": rnd, "phase": "ppo", "update": n, "mean_error": b.mean_error(),
                        "surrogate": diag["surrogate"], "critic_loss": closs,
                        "clip_fraction": diag["clip_fraction"], "masked": diag["masked"],
                        "mean_leakage_profile": b.leakage.mean(axis=0).tolist()})

        _patience_loop(ppo_step, val, cfg.patience, cfg.inner_convergence_tol, cfg.max_ppo_iterations)
        if tracker.best >= round_best * (1.0 - cfg.inner_convergence_tol):
            break
        round_best = tracker.best
    tracker.restore()
    return TrainingResult(policy, estimator, critic, log, tracker.best)


def write_log(log, path):
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
