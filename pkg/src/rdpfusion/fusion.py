"""Clipped adaptive Gaussian fusion, the state estimator, and episode execution.

At each step every sensor's measurement history is compressed by a shared
recurrent encoder and squashed into ``[0, 1]^d`` by the filter head; the
fusion head maps the released-output history and the remaining budget to a
gain per sensor. Gains are clipped to the largest value the remaining budget
allows, the ledger is charged with the clipped gains, and
``Z = sum_i g_i f_i + N(0, I_d)`` is released.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .accountant import (
    MechanismShape,
    PrivacyLedger,
    charge,
    charge_batch,
    check_order,
    clip_bound,
    clip_fusion_vector,
)
from .autodiff import Tensor, no_grad
from .errors import BudgetOverrunError, InvalidInputError
from .nn import MLP, MinimalGatedCell, Module

LOG_2PI = math.log(2.0 * math.pi)


def squared_error(x, xhat):
    """Per-sample squared error summed over state dimensions (Tensor-aware)."""
    return ad.tsum(ad.square(ad.sub(xhat, x)), axis=-1)


def absolute_error(x, xhat):
    return ad.tsum(ad.tabs(ad.sub(xhat, x)), axis=-1)


ERROR_FUNCTIONS = {"squared": squared_error, "absolute": absolute_error}


def scaled_budget(remaining, budget):
    remaining = np.asarray(remaining, dtype=np.float64)
    return remaining / budget if budget > 0 else np.zeros_like(remaining)


class FusionPolicy(Module):
    """Filter + fusion-vector policy.

    ``adaptive=False`` gives the classical mechanism: no fusion head, every
    gain fixed to ``constant_gain``.
    """

    def __init__(
        self,
        m,
        n_y,
        rng,
        d=2,
        hidden=32,
        head_hidden=32,
        adaptive=True,
        gain_scale=1.0,
        init_log_std=math.log(0.3),
        constant_gain=0.0,
    ):
        self.m, self.n_y, self.d = int(m), int(n_y), int(d)
        self.hidden = int(hidden)
        self.adaptive = bool(adaptive)
        # measurement features carry the activity flag as an extra column
        self.encoder_y = MinimalGatedCell(self.n_y + 1, hidden, rng)
        self.filter_head = MLP(hidden, head_hidden, self.d, rng, out_activation="sigmoid")
        if self.adaptive:
            self.gain_scale = float(gain_scale)
            self.encoder_z = MinimalGatedCell(self.d, hidden, rng)
            self.fusion_head = MLP(hidden + 1, head_hidden, self.m, rng)
            # start near the constant policy g = gain_scale
            self.fusion_head.out.weight.value *= 0.1
            self.fusion_head.out.bias.value[...] = 1.0
            self.exploration_log_std = Tensor(np.full(self.m, float(init_log_std)), requires_grad=True)
        else:
            self.constant_gain = float(constant_gain)

    @property
    def shape(self):
        return MechanismShape(self.d, self.m)

    def filter_parameters(self):
        return self.encoder_y.parameters() + self.filter_head.parameters()

    def actor_parameters(self):
        if not self.adaptive:
            return []
        return self.encoder_z.parameters() + self.fusion_head.parameters() + [self.exploration_log_std]

    def initial_state(self, batch):
        h_z = np.zeros((batch, self.hidden)) if self.adaptive else None
        return h_z, np.zeros((batch, self.m, self.hidden))

    def update_y(self, h_y, measurements, active):
        meas = np.asarray(measurements, dtype=np.float64)
        act = np.asarray(active, dtype=np.float64)[..., None]
        x = np.concatenate([meas * act, act], axis=-1)
        b = x.shape[0]
        if x.shape[1:] != (self.m, self.n_y + 1):
            raise InvalidInputError(f"measurements must be (B, {self.m}, {self.n_y}); got {meas.shape}")
        h = ad.reshape(h_y, (b * self.m, self.hidden))
        h = self.encoder_y(x.reshape(b * self.m, self.n_y + 1), h)
        return ad.reshape(h, (b, self.m, self.hidden))

    def filter_outputs(self, h_y):
        b = ad._val(h_y).shape[0]
        f = self.filter_head(ad.reshape(h_y, (b * self.m, self.hidden)))
        return ad.reshape(f, (b, self.m, self.d))

    def update_z(self, h_z, z_prev):
        if not self.adaptive:
            return None
        return self.encoder_z(z_prev, h_z)

    def fusion_vector(self, h_z, s_scaled):
        """Pre-clip gains (B, m) from the output history and scaled budget."""
        s = np.asarray(s_scaled, dtype=np.float64).reshape(-1, 1)
        if not self.adaptive:
            return Tensor(np.full((s.shape[0], self.m), self.constant_gain))
        x = ad.concat([h_z, Tensor(s)], axis=-1)
        return ad.mul(self.fusion_head(x), self.gain_scale)

    def exploration_std(self):
        if not self.adaptive:
            return np.zeros(self.m)
        return np.exp(self.exploration_log_std.value)

    def log_prob(self, actions, mean):
        """Diagonal-Gaussian log density of pre-clip actions, summed over sensors."""
        log_std = self.exploration_log_std
        z = ad.mul(ad.sub(actions, mean), ad.exp(ad.mul(log_std, -1.0)))
        per = ad.add(ad.mul(ad.square(z), -0.5), ad.mul(log_std, -1.0))
        return ad.add(ad.tsum(per, axis=-1), -0.5 * self.m * LOG_2PI)


def classical_gain(budget, horizon, shape: MechanismShape, alpha):
    """Constant gain spending exactly ``budget / horizon`` per step."""
    if horizon < 1:
        raise InvalidInputError("horizon must be >= 1")
    return clip_bound(max(float(budget), 0.0) / horizon, shape, alpha)


def classical_baseline(budget, horizon, shape: MechanismShape, alpha, rng, n_y, **kwargs):
    """Fixed-gain policy with every entry equal to the uniform-split clip bound."""
    g = classical_gain(budget, horizon, shape, alpha)
    return FusionPolicy(shape.m, n_y, rng, d=shape.d, adaptive=False, constant_gain=g, **kwargs)


def adaptive_policy(budget, horizon, shape: MechanismShape, alpha, rng, n_y, **kwargs):
    """Adaptive policy whose initial gains sit at the classical constant."""
    g = max(classical_gain(budget, horizon, shape, alpha), 1e-3)
    kwargs.setdefault("init_log_std", math.log(0.3 * g))
    return FusionPolicy(shape.m, n_y, rng, d=shape.d, adaptive=True, gain_scale=g, **kwargs)


class Estimator(Module):
    """Recurrent estimator fed only with released outputs."""

    def __init__(self, d, n_x, rng, hidden=32, head_hidden=32, zero_head=False, out_shift=None, out_scale=None):
        self.d, self.n_x, self.hidden = int(d), int(n_x), int(hidden)
        self.encoder = MinimalGatedCell(self.d, hidden, rng)
        self.head = MLP(hidden, head_hidden, self.n_x, rng, zero_output=zero_head)
        self.out_shift = np.zeros(self.n_x) if out_shift is None else np.asarray(out_shift, float).reshape(self.n_x)
        self.out_scale = np.ones(self.n_x) if out_scale is None else np.asarray(out_scale, float).reshape(self.n_x)

    def initial_state(self, batch):
        return np.zeros((batch, self.hidden))

    def __call__(self, h, z):
        h = self.encoder(z, h)
        out = ad.add(ad.mul(self.head(h), self.out_scale), self.out_shift)
        return out, h


def estimate_step(estimator: Estimator, h_tilde, z):
    """Recurrent update with the newest output, then the state estimate."""
    return estimator(h_tilde, z)


class Critic(Module):
    """Cost-to-go J(s_k, h) over released outputs and the remaining budget."""

    def __init__(self, d, rng, hidden=32, head_hidden=32, value_scale=1.0):
        self.d, self.hidden = int(d), int(hidden)
        self.encoder = MinimalGatedCell(self.d, hidden, rng)
        self.head = MLP(hidden + 1, head_hidden, 1, rng)
        self.value_scale = float(value_scale)

    def initial_state(self, batch):
        return np.zeros((batch, self.hidden))

    def step(self, h, z_prev, s_scaled):
        h = self.encoder(z_prev, h)
        s = Tensor(np.asarray(s_scaled, dtype=np.float64).reshape(-1, 1))
        v = ad.mul(self.head(ad.concat([h, s], axis=-1)), self.value_scale)
        return ad.reshape(v, (-1,)), h


# --------------------------------------------------------------------------
# single step


@dataclass
class StepLog:
    mean: np.ndarray
    action: np.ndarray
    gains: np.ndarray
    filters: np.ndarray
    noise: np.ndarray
    remaining_before: float
    leakage: float


def fuse_step(
    policy: FusionPolicy,
    h_z,
    h_y,
    ledger: PrivacyLedger,
    measurements,
    rng,
    mode="deterministic",
    prev_z=None,
    active_mask=None,
    force_filter=None,
    explore_rng=None,
):
    """One release of the clipped fusion mechanism for a single episode.

    ``measurements`` is (m, n_y). ``rng`` draws the release noise and, unless
    ``explore_rng`` is given, the exploration noise too. ``force_filter``
    (m, d) replaces the filter outputs; it exists to probe sensitivity.
    Returns ``(Z, (h_z, h_y), ledger, StepLog)``.
    """
    shape = policy.shape
    meas = np.asarray(measurements, dtype=np.float64)[None]
    act = np.ones((1, policy.m), bool) if active_mask is None else np.asarray(active_mask, bool)[None]
    z_prev = np.zeros((1, policy.d)) if prev_z is None else np.asarray(prev_z, float).reshape(1, policy.d)
    if h_z is None and h_y is None:
        h_z, h_y = policy.initial_state(1)
    with no_grad():
        h_y = ad._val(policy.update_y(np.asarray(h_y).reshape(1, policy.m, -1), meas, act))
        h_z = ad._val(policy.update_z(np.asarray(h_z).reshape(1, -1), z_prev)) if policy.adaptive else None
        s_scaled = scaled_budget(ledger.remaining, ledger.global_budget)
        mean = ad._val(policy.fusion_vector(h_z, [s_scaled]))[0]
        if mode == "exploratory" and policy.adaptive:
            eps = (explore_rng or rng).standard_normal(policy.m)
            action = mean + policy.exploration_std() * eps
        elif mode in ("deterministic", "exploratory"):
            action = mean.copy()
        else:
            raise InvalidInputError(f"unknown mode {mode!r}")
        gains = clip_fusion_vector(action, ledger.clip_bound(shape))
        if force_filter is not None:
            f = np.asarray(force_filter, dtype=np.float64).reshape(policy.m, policy.d)
        else:
            f = ad._val(policy.filter_outputs(h_y))[0]
    remaining_before = ledger.remaining
    try:
        charge(ledger, float(np.max(np.abs(gains))), shape)
    except BudgetOverrunError as exc:  # pragma: no cover - clip precedes charge
        raise AssertionError("clipped gains overran the ledger") from exc
    noise = rng.standard_normal(policy.d)
    z = gains @ f + noise
    log = StepLog(mean, action, gains, f, noise, remaining_before, ledger.history[-1])
    return z, (h_z[0] if h_z is not None else None, h_y[0]), ledger, log


# --------------------------------------------------------------------------
# batched episodes


@dataclass
class TrajectoryRecord:
    """One rollout; arrays are indexed by step (length K)."""

    states: np.ndarray
    measurements: np.ndarray
    active_mask: np.ndarray
    actions: np.ndarray
    gains: np.ndarray
    filters: np.ndarray
    noise: np.ndarray
    z: np.ndarray
    estimates: np.ndarray
    errors: np.ndarray
    remaining: np.ndarray
    leakage: np.ndarray
    ledger: PrivacyLedger
    seed: object = None
    d: int = 2

    def to_jsonl(self) -> str:
        lines = []
        for k in range(len(self.errors)):
            lines.append(
                json.dumps(
                    {
                        "k": k + 1,
                        "state": self.states[k].tolist(),
                        "measurements": self.measurements[k].tolist(),
                        "active_mask": self.active_mask[k].astype(int).tolist(),
                        "action": self.actions[k].tolist(),
                        "gains": self.gains[k].tolist(),
                        "filters": self.filters[k].tolist(),
                        "noise": self.noise[k].tolist(),
                        "z": self.z[k].tolist(),
                        "estimate": self.estimates[k].tolist(),
                        "error": float(self.errors[k]),
                        "remaining": float(self.remaining[k]),
                        "leakage": float(self.leakage[k]),
                    }
                )
            )
        lines.append(json.dumps({"ledger": self.ledger.to_dict(), "d": int(self.d), "seed": self.seed}))
        return "\n".join(lines) + "\n"


@dataclass
class TrajectoryBatch:
    """Stacked rollouts; leading axes are (episode, step)."""

    states: np.ndarray
    measurements: np.ndarray
    active_mask: np.ndarray
    means: np.ndarray
    actions: np.ndarray
    gains: np.ndarray
    filters: np.ndarray
    noise: np.ndarray
    z: np.ndarray
    estimates: np.ndarray
    errors: np.ndarray
    remaining: np.ndarray
    leakage: np.ndarray
    log_prob: np.ndarray
    final_remaining: np.ndarray
    budget: float
    alpha: float
    d: int
    seed: object = None
    mode: str = "deterministic"
    episodes: list = field(default_factory=list)

    @property
    def size(self):
        return self.errors.shape[0]

    @property
    def horizon(self):
        return self.errors.shape[1]

    def z_prev(self):
        """Z_{k-1} per step, with Z_0 = 0."""
        zp = np.zeros_like(self.z)
        zp[:, 1:] = self.z[:, :-1]
        return zp

    def ledger(self, i) -> PrivacyLedger:
        return PrivacyLedger(
            alpha=self.alpha,
            global_budget=self.budget,
            remaining=float(self.final_remaining[i]),
            history=[float(x) for x in self.leakage[i]],
        )

    def record(self, i) -> TrajectoryRecord:
        return TrajectoryRecord(
            states=self.states[i],
            measurements=self.measurements[i],
            active_mask=self.active_mask[i],
            actions=self.actions[i],
            gains=self.gains[i],
            filters=self.filters[i],
            noise=self.noise[i],
            z=self.z[i],
            estimates=self.estimates[i],
            errors=self.errors[i],
            remaining=self.remaining[i],
            leakage=self.leakage[i],
            ledger=self.ledger(i),
            seed={"seed": _jsonable_seed(self.seed), "index": int(i)},
            d=self.d,
        )

    def records(self):
        return [self.record(i) for i in range(self.size)]

    def mean_error(self):
        return float(self.errors.mean())


def _jsonable_seed(seed):
    if seed is None or isinstance(seed, (int, str)):
        return seed
    if isinstance(seed, (list, tuple)):
        return [_jsonable_seed(s) for s in seed]
    return int(seed) if isinstance(seed, (np.integer,)) else repr(seed)


def make_streams(seed):
    """Independent generators for environment, release noise and exploration."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def run_episodes(
    env,
    policy: FusionPolicy,
    estimator: Estimator,
    budget,
    alpha,
    seed,
    batch=1,
    mode="deterministic",
    error_fn=squared_error,
    env_kwargs=None,
) -> TrajectoryBatch:
    """Execute the budgeted fusion loop on ``batch`` independent episodes."""
    alpha = check_order(alpha)
    budget = float(budget)
    if budget < 0 or not math.isfinite(budget):
        raise InvalidInputError("budget must be finite and >= 0")
    if mode not in ("deterministic", "exploratory"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    if env.spec.m != policy.m or env.spec.n_y != policy.n_y:
        raise InvalidInputError("policy does not match environment sensor layout")
    env_rng, noise_rng, explore_rng = make_streams(seed)
    shape = policy.shape
    K, B, m, d, n_x = env.horizon, int(batch), policy.m, policy.d, env.spec.n_x
    if K < 1:
        raise InvalidInputError("horizon must be >= 1")
    env.reset(env_rng, batch=B, **(env_kwargs or {}))

    out = {
        "states": np.zeros((B, K, n_x)),
        "measurements": np.zeros((B, K, m, env.spec.n_y)),
        "active_mask": np.zeros((B, K, m), dtype=bool),
        "means": np.zeros((B, K, m)),
        "actions": np.zeros((B, K, m)),
        "gains": np.zeros((B, K, m)),
        "filters": np.zeros((B, K, m, d)),
        "noise": np.zeros((B, K, d)),
        "z": np.zeros((B, K, d)),
        "estimates": np.zeros((B, K, n_x)),
        "errors": np.zeros((B, K)),
        "remaining": np.zeros((B, K)),
        "leakage": np.zeros((B, K)),
        "log_prob": np.zeros((B, K)),
    }
    s = np.full(B, budget)
    z_prev = np.zeros((B, d))
    h_z, h_y = policy.initial_state(B)
    h_e = estimator.initial_state(B)
    explore = mode == "exploratory" and policy.adaptive
    std = policy.exploration_std()
    with no_grad():
        for k in range(K):
            step = env.step(env_rng)
            h_y = ad._val(policy.update_y(h_y, step.measurements, step.active_mask))
            if policy.adaptive:
                h_z = ad._val(policy.update_z(h_z, z_prev))
            mean = ad._val(policy.fusion_vector(h_z, scaled_budget(s, budget)))
            if explore:
                action = mean + std * explore_rng.standard_normal((B, m))
            else:
                action = mean
            gains = clip_fusion_vector(action, clip_bound(s, shape, alpha))
            s_next, loss = charge_batch(s, np.max(np.abs(gains), axis=1), shape, alpha)
            f = ad._val(policy.filter_outputs(h_y))
            noise = noise_rng.standard_normal((B, d))
            z = np.einsum("bm,bmd->bd", gains, f) + noise
            xhat, h_e_t = estimator(h_e, z)
            xhat, h_e = ad._val(xhat), ad._val(h_e_t)
            err = ad._val(error_fn(step.state, xhat))

            out["states"][:, k] = step.state
            out["measurements"][:, k] = step.measurements
            out["active_mask"][:, k] = step.active_mask
            out["means"][:, k] = mean
            out["actions"][:, k] = action
            out["gains"][:, k] = gains
            out["filters"][:, k] = f
            out["noise"][:, k] = noise
            out["z"][:, k] = z
            out["estimates"][:, k] = xhat
            out["errors"][:, k] = err
            out["remaining"][:, k] = s
            out["leakage"][:, k] = loss
            if policy.adaptive:
                out["log_prob"][:, k] = ad._val(policy.log_prob(action, mean))
            s = s_next
            z_prev = z
    return TrajectoryBatch(
        **out,
        final_remaining=s,
        budget=budget,
        alpha=alpha,
        d=d,
        seed=_jsonable_seed(seed),
        mode=mode,
        episodes=list(getattr(env, "current_episodes", [])),
    )


def run_episode(env, policy, estimator, budget, alpha, rng_seed, mode="deterministic", **kwargs) -> TrajectoryRecord:
    """Single-episode convenience wrapper around :func:`run_episodes`."""
    return run_episodes(env, policy, estimator, budget, alpha, rng_seed, batch=1, mode=mode, **kwargs).record(0)


def read_jsonl(fh):
    """Yield ``(steps, footer)`` pairs from a trajectory JSON-lines stream."""
    steps = []
    for n, line in enumerate(fh, 1):
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        if "ledger" in obj:
            yield steps, obj
            steps = []
        else:
            steps.append(obj)
    if steps:
        yield steps, None
