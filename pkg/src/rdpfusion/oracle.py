"""Exact constrained dynamic programming on tiny discrete instances.

Mechanisms come from a finite menu of conditionals ``q(z | y)`` over the
current joint measurement. Adjacent measurement histories differ in one
sensor's whole record, so a mechanism's leakage is the worst Rényi
divergence between rows whose joint measurements differ in one sensor.
The DP runs over released-symbol prefixes; beliefs and remaining budgets are
carried along each prefix, so no belief-space discretisation is involved.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    ImpossibleObservationError,
    InfeasibleInstanceError,
    InvalidInputError,
    UndefinedDivergenceError,
)

STOCHASTIC_TOL = 1e-12
BUDGET_GUARD = 1e-12
LIMITS = {"n_x": 3, "n_y": 2, "m": 2, "n_z": 3, "horizon": 3}


def renyi_divergence(p, q, alpha):
    """Order-alpha divergence between two finite distributions (nats)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if alpha <= 1 or not math.isfinite(alpha):
        raise InvalidInputError("alpha must be > 1 and finite")
    if np.any((q <= 0) & (p > 0)):
        raise UndefinedDivergenceError("zero denominator probability where the numerator is positive")
    keep = p > 0
    total = np.sum(p[keep] ** alpha * q[keep] ** (1.0 - alpha))
    return float(math.log(total) / (alpha - 1.0))


def adjacent_pairs(n_y, m):
    """Ordered pairs of joint measurement indices differing in exactly one sensor."""
    joint = list(itertools.product(range(n_y), repeat=m))
    pairs = []
    for a, ya in enumerate(joint):
        for b, yb in enumerate(joint):
            if sum(u != v for u, v in zip(ya, yb)) == 1:
                pairs.append((a, b))
    return pairs


def discrete_renyi_loss(mechanism, alpha, n_y=None, m=1):
    """Worst divergence over adjacent rows of ``mechanism`` (n_y**m, n_z)."""
    q = np.asarray(mechanism, dtype=np.float64)
    if q.ndim != 2:
        raise InvalidInputError("mechanism must be a (joint measurement, symbol) matrix")
    n_y = q.shape[0] if n_y is None else int(n_y)
    if n_y**m != q.shape[0]:
        raise InvalidInputError(f"mechanism has {q.shape[0]} rows, expected {n_y}**{m}")
    worst = 0.0
    for a, b in adjacent_pairs(n_y, m):
        worst = max(worst, renyi_divergence(q[a], q[b], alpha))
    return worst


def _check_stochastic(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: entries must be finite and >= 0")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > STOCHASTIC_TOL):
        raise InvalidInputError(f"{name}: rows must sum to 1 within {STOCHASTIC_TOL}")
    return arr


@dataclass
class DiscreteInstance:
    """Finite state/measurement/symbol model with a mechanism menu.

    observation is (m, n_x, n_y), one matrix per sensor; menu is
    (n_menu, n_y**m, n_z); cost[x, xe] is the error of estimate xe at state x.
    """

    prior: np.ndarray
    transition: np.ndarray
    observation: np.ndarray
    cost: np.ndarray
    menu: np.ndarray
    alpha: float
    budget: float
    horizon: int
    menu_loss: np.ndarray = field(init=False)

    def __post_init__(self):
        self.prior = _check_stochastic("prior", self.prior)
        self.transition = _check_stochastic("transition", self.transition)
        self.observation = _check_stochastic("observation", self.observation)
        self.menu = _check_stochastic("menu", self.menu)
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.alpha = float(self.alpha)
        self.budget = float(self.budget)
        self.horizon = int(self.horizon)
        n_x = self.prior.shape[0]
        if self.transition.shape != (n_x, n_x) or self.cost.shape != (n_x, n_x):
            raise InvalidInputError("transition and cost must be (n_x, n_x)")
        if self.observation.ndim != 3 or self.observation.shape[1] != n_x:
            raise InvalidInputError("observation must be (m, n_x, n_y)")
        if self.menu.ndim != 3 or self.menu.shape[1] != self.n_y**self.m:
            raise InvalidInputError("menu must be (n_menu, n_y**m, n_z)")
        sizes = {"n_x": n_x, "n_y": self.n_y, "m": self.m, "n_z": self.n_z, "horizon": self.horizon}
        for k, v in sizes.items():
            if not 1 <= v <= LIMITS[k]:
                raise InvalidInputError(f"{k}={v} outside 1..{LIMITS[k]}")
        if not self.alpha > 1 or not math.isfinite(self.alpha):
            raise InvalidInputError("alpha must be > 1 and finite")
        if not self.budget >= 0 or math.isnan(self.budget):
            raise InvalidInputError("budget must be >= 0")
        self.menu_loss = np.array([discrete_renyi_loss(q, self.alpha, self.n_y, self.m) for q in self.menu])

    def zero_leakage_index(self):
        """First menu element with zero leakage; its absence makes the instance infeasible."""
        idx = np.flatnonzero(self.menu_loss == 0.0)
        if idx.size == 0:
            raise InfeasibleInstanceError("menu has no zero-leakage mechanism, so exhausted budgets leave nothing feasible")
        return int(idx[0])

    @property
    def n_x(self):
        return self.prior.shape[0]

    @property
    def m(self):
        return self.observation.shape[0]

    @property
    def n_y(self):
        return self.observation.shape[2]

    @property
    def n_yj(self):
        return self.n_y**self.m

    @property
    def n_z(self):
        return self.menu.shape[2]

    def joint_observation(self):
        """p(y | x) over joint measurements, (n_x, n_y**m); sensor 0 is most significant."""
        out = np.ones((self.n_x, 1))
        for i in range(self.m):
            out = (out[:, :, None] * self.observation[i][:, None, :]).reshape(self.n_x, -1)
        return out

    def with_budget(self, budget):
        d = self.to_dict()
        d["budget"] = float(budget)
        return DiscreteInstance.from_dict(d)

    def to_dict(self):
        return {
            "prior": self.prior.tolist(),
            "transition": self.transition.tolist(),
            "observation": self.observation.tolist(),
            "cost": self.cost.tolist(),
            "menu": self.menu.tolist(),
            "alpha": self.alpha,
            "budget": self.budget if math.isfinite(self.budget) else "inf",
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in ("prior", "transition", "observation", "cost", "menu", "alpha", "budget", "horizon") if k not in d]
        if missing:
            raise InvalidInputError(f"instance missing fields {missing}")
        budget = math.inf if d["budget"] == "inf" else d["budget"]
        return cls(
            prior=np.asarray(d["prior"], float),
            transition=np.asarray(d["transition"], float),
            observation=np.asarray(d["observation"], float),
            cost=np.asarray(d["cost"], float),
            menu=np.asarray(d["menu"], float),
            alpha=d["alpha"],
            budget=budget,
            horizon=d["horizon"],
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# beliefs


def initial_belief(inst: DiscreteInstance):
    """b_1(x, y_1) = p(x_1) p(y_1 | x_1), shape (n_x, n_y**m)."""
    return inst.prior[:, None] * inst.joint_observation()


def _weighted(b, mechanism, z, n_yj):
    # w[x, h] = b[x, h] q(z | current y of history h)
    y_now = np.arange(b.shape[1]) % n_yj
    return b * np.asarray(mechanism)[y_now, z][None, :]


def symbol_probabilities(b, mechanism, n_yj):
    """p(z_k | z^{k-1}) for every symbol under the given mechanism."""
    q = np.asarray(mechanism)
    y_now = np.arange(b.shape[1]) % n_yj
    return b.sum(axis=0) @ q[y_now]


def state_posterior(b, mechanism, z, n_yj):
    """p(x_k | z^k); raises on a zero-probability symbol."""
    w = _weighted(b, mechanism, z, n_yj).sum(axis=1)
    total = w.sum()
    if not total > 0:
        raise ImpossibleObservationError(f"symbol {z} has zero predictive probability")
    return w / total


def belief_update(b, mechanism, z, inst: DiscreteInstance):
    """b_{k+1}(x', y^k y') from b_k after releasing ``z`` through ``mechanism``.

    Histories are flattened with the newest measurement as the fastest index.
    """
    b = np.asarray(b, dtype=np.float64)
    w = _weighted(b, mechanism, z, inst.n_yj)
    total = w.sum()
    if not total > 0:
        raise ImpossibleObservationError(f"symbol {z} has zero predictive probability")
    pred = inst.transition.T @ w  # (n_x', H)
    nxt = pred[:, :, None] * inst.joint_observation()[:, None, :]
    return nxt.reshape(inst.n_x, -1) / total


def best_estimate(posterior, cost):
    """Index minimising expected cost under ``posterior``; lowest index on ties."""
    risk = posterior @ cost
    return int(np.argmin(risk)), float(risk.min())


# --------------------------------------------------------------------------
# dynamic programming


@dataclass
class PolicyTree:
    """Choice and estimates per z-prefix node.

    node index is ``level_offset[k] + prefix`` where ``prefix`` encodes
    z_1..z_{k} in base n_z (z_1 most significant); level k holds n_z**k nodes.
    """

    value: float
    choice: np.ndarray
    estimate: np.ndarray
    node_value: np.ndarray
    node_stage: np.ndarray
    node_prob: np.ndarray
    remaining: np.ndarray
    level_offset: np.ndarray
    n_z: int

    def node(self, prefix_symbols):
        k = len(prefix_symbols)
        p = 0
        for z in prefix_symbols:
            p = p * self.n_z + int(z)
        return int(self.level_offset[k] + p)

    def to_dict(self):
        return {
            "value": self.value,
            "choice": self.choice.tolist(),
            "estimate": self.estimate.tolist(),
            "node_value": self.node_value.tolist(),
            "remaining": self.remaining.tolist(),
            "level_offset": self.level_offset.tolist(),
            "n_z": self.n_z,
        }


def _level_offsets(n_z, horizon):
    return np.concatenate([[0], np.cumsum([n_z**k for k in range(horizon)])]).astype(np.int64)


def _stage(inst, b, q):
    """Expected stage cost, per-symbol probabilities, estimates and posteriors."""
    pz = symbol_probabilities(b, q, inst.n_yj)
    cost = 0.0
    est = np.zeros(inst.n_z, dtype=np.int64)
    for z in range(inst.n_z):
        if pz[z] <= 0:
            continue
        post = state_posterior(b, q, z, inst.n_yj)
        est[z], r = best_estimate(post, inst.cost)
        cost += pz[z] * r
    return cost, pz, est


def solve_constrained_dp(inst: DiscreteInstance) -> PolicyTree:
    """Exhaustive backward induction over symbol prefixes under the budget."""
    K, nz = inst.horizon, inst.n_z
    offs = _level_offsets(nz, K)
    n_nodes = int(offs[-1])
    zero_idx = inst.zero_leakage_index()

    def rec(k, prefix, b, s):
        feasible = np.flatnonzero(inst.menu_loss <= s + BUDGET_GUARD)
        if feasible.size == 0:
            raise InfeasibleInstanceError(f"no feasible mechanism at step {k + 1} with remaining {s:.6g}")
        best = None
        for j in feasible:
            q = inst.menu[j]
            stage, pz, est = _stage(inst, b, q)
            s_next = max(s - inst.menu_loss[j], 0.0)
            total = stage
            sub = {}
            if k + 1 < K:
                for z in range(nz):
                    if pz[z] <= 0:
                        continue
                    v, t = rec(k + 1, prefix * nz + z, belief_update(b, q, z, inst), s_next)
                    total += pz[z] * v
                    sub.update(t)
            if best is None or total < best[0] - 1e-15:
                node = int(offs[k] + prefix)
                sub[node] = (int(j), est, total, stage, s)
                best = (total, sub)
        return best

    value, table = rec(0, 0, initial_belief(inst), inst.budget)
    choice = np.full(n_nodes, zero_idx, dtype=np.int64)
    estimate = np.zeros((n_nodes, nz), dtype=np.int64)
    node_value = np.zeros(n_nodes)
    node_stage = np.zeros(n_nodes)
    remaining = np.full(n_nodes, np.nan)
    for node, (j, est, v, st, s) in table.items():
        choice[node], estimate[node], node_value[node], node_stage[node], remaining[node] = j, est, v, st, s
    tree = PolicyTree(value, choice, estimate, node_value, node_stage, np.zeros(n_nodes), remaining, offs, nz)
    tree.node_prob = reach_probabilities(inst, tree)
    return tree


def reach_probabilities(inst, tree: PolicyTree):
    """Probability of reaching each prefix node under the tree's choices."""
    K, nz = inst.horizon, inst.n_z
    prob = np.zeros(int(tree.level_offset[-1]))
    frontier = [(0, 1.0, initial_belief(inst))]
    for k in range(K):
        nxt = []
        for prefix, p, b in frontier:
            node = int(tree.level_offset[k] + prefix)
            prob[node] = p
            if k + 1 == K:
                continue
            q = inst.menu[tree.choice[node]]
            pz = symbol_probabilities(b, q, inst.n_yj)
            for z in range(nz):
                if pz[z] > 0:
                    nxt.append((prefix * nz + z, p * pz[z], belief_update(b, q, z, inst)))
        frontier = nxt
    return prob


def path_leakages(inst, tree: PolicyTree):
    """Total leakage along every reachable root-to-leaf path."""
    K, nz = inst.horizon, inst.n_z
    out = []

    def walk(k, prefix, acc):
        node = int(tree.level_offset[k] + prefix)
        acc = acc + inst.menu_loss[tree.choice[node]]
        if k + 1 == K:
            out.append(acc)
            return
        for z in range(nz):
            walk(k + 1, prefix * nz + z, acc)

    walk(0, 0, 0.0)
    return np.array(out)


def sequence_value(inst: DiscreteInstance, sequence):
    """Expected cost of a fixed open-loop menu sequence with optimal estimates."""
    K, nz = inst.horizon, inst.n_z
    if len(sequence) != K:
        raise InvalidInputError("sequence length must equal the horizon")
    total = 0.0
    frontier = [(1.0, initial_belief(inst))]
    for k, j in enumerate(sequence):
        q = inst.menu[j]
        nxt = []
        for p, b in frontier:
            stage, pz, _ = _stage(inst, b, q)
            total += p * stage
            if k + 1 < K:
                for z in range(nz):
                    if pz[z] > 0:
                        nxt.append((p * pz[z], belief_update(b, q, z, inst)))
        frontier = nxt
    return total


def uniform_sequences(inst: DiscreteInstance):
    """All open-loop menu sequences whose every step fits the even split B_G/K."""
    per_step = inst.budget / inst.horizon
    ok = np.flatnonzero(inst.menu_loss <= per_step + BUDGET_GUARD)
    return list(itertools.product(ok.tolist(), repeat=inst.horizon))


def evaluate_uniform(inst: DiscreteInstance):
    """Values of every uniform-split policy, and the best one."""
    seqs = uniform_sequences(inst)
    vals = np.array([sequence_value(inst, s) for s in seqs])
    i = int(np.argmin(vals))
    return {"sequences": seqs, "values": vals, "best_value": float(vals[i]), "best_sequence": list(seqs[i])}


def open_loop_value(inst: DiscreteInstance):
    zero = inst.zero_leakage_index()
    return sequence_value(inst, [zero] * inst.horizon)


def tree_cdfs(inst: DiscreteInstance):
    return (
        np.cumsum(inst.prior),
        np.cumsum(inst.transition, axis=1),
        np.cumsum(inst.observation, axis=2),
        np.cumsum(inst.menu, axis=2),
    )


def monte_carlo_value(inst: DiscreteInstance, tree: PolicyTree, n=100_000, seed=0):
    """Forward simulation of the tree; returns (mean cost, standard error)."""
    rng = np.random.default_rng(seed)
    u = rng.random((int(n), inst.horizon, 2 + inst.m))
    prior_cdf, trans_cdf, obs_cdf, menu_cdf = tree_cdfs(inst)
    costs = kernels.tree_mc(
        u, prior_cdf, trans_cdf, obs_cdf, menu_cdf, tree.choice, tree.estimate,
        inst.cost, inst.n_y, inst.n_z, tree.level_offset,
    )
    return float(costs.mean()), float(costs.std(ddof=1) / math.sqrt(len(costs)))


def bellman_residuals(inst: DiscreteInstance, tree: PolicyTree):
    """value(node) - [stage(node) + sum_z p(z) value(child)] over reachable nodes."""
    K, nz = inst.horizon, inst.n_z
    res = []
    frontier = [(0, initial_belief(inst))]
    for k in range(K):
        nxt = []
        for prefix, b in frontier:
            node = int(tree.level_offset[k] + prefix)
            q = inst.menu[tree.choice[node]]
            stage, pz, _ = _stage(inst, b, q)
            cont = 0.0
            if k + 1 < K:
                for z in range(nz):
                    if pz[z] > 0:
                        cont += pz[z] * tree.node_value[tree.level_offset[k + 1] + prefix * nz + z]
                        nxt.append((prefix * nz + z, belief_update(b, q, z, inst)))
            res.append(tree.node_value[node] - stage - cont)
        frontier = nxt
    return np.array(res)


# --------------------------------------------------------------------------
# random instances and reports


def smoothed_menu(n_y, m, n_z, levels=(0.0, 0.3, 0.6, 0.9)):
    """Mixtures of the uniform symbol law and a deterministic summary of y.

    The summary maps a joint measurement to the sum of its sensor values,
    folded into ``n_z`` symbols. Level 0 is the zero-leakage element.
    """
    joint = list(itertools.product(range(n_y), repeat=m))
    summary = np.array([sum(y) % n_z for y in joint])
    onehot = np.eye(n_z)[summary]
    uniform = np.full((len(joint), n_z), 1.0 / n_z)
    return np.stack([(1.0 - lam) * uniform + lam * onehot for lam in levels])


def _random_stochastic(rng, shape, concentration=1.0):
    a = rng.gamma(concentration, size=shape)
    return a / a.sum(axis=-1, keepdims=True)


def random_instance(seed, n_x=3, n_y=2, m=2, n_z=3, horizon=3, alpha=2.0, budget=None):
    """Sticky random chain with informative sensors and a smoothed menu.

    Unless given, the budget equals the largest menu leakage, so a uniform
    split can only afford cheap mechanisms while an adaptive policy may
    spend everything at once.
    """
    rng = np.random.default_rng(seed)
    trans = 0.6 * np.eye(n_x) + 0.4 * _random_stochastic(rng, (n_x, n_x))
    obs = np.stack([0.5 * np.eye(n_x, n_y) + 0.5 * _random_stochastic(rng, (n_x, n_y)) for _ in range(m)])
    obs /= obs.sum(axis=-1, keepdims=True)
    x = np.arange(n_x, dtype=float)
    inst = DiscreteInstance(
        prior=_random_stochastic(rng, n_x, 2.0),
        transition=trans,
        observation=obs,
        cost=(x[:, None] - x[None, :]) ** 2,
        menu=smoothed_menu(n_y, m, n_z),
        alpha=alpha,
        budget=0.0,
        horizon=horizon,
    )
    return inst.with_budget(float(inst.menu_loss.max()) if budget is None else budget)


def compare(inst: DiscreteInstance):
    """Adaptive DP value against every uniform-split policy."""
    tree = solve_constrained_dp(inst)
    uni = evaluate_uniform(inst)
    gap = uni["best_value"] - tree.value
    return {
        "adaptive_value": tree.value,
        "best_uniform_value": uni["best_value"],
        "best_uniform_sequence": uni["best_sequence"],
        "n_uniform_policies": len(uni["sequences"]),
        "open_loop_value": open_loop_value(inst),
        "dominance": bool(np.all(tree.value <= uni["values"] + 1e-12)),
        "strict": bool(gap > 1e-9),
        "gap": gap,
        "max_path_leakage": float(path_leakages(inst, tree).max()),
        "budget": inst.budget,
        "root_choice": int(tree.choice[0]),
    }
