"""Full-joint enumeration over (x^K, y^K, z^K) for tiny discrete instances.

Shares nothing with the oracle's belief recursion: every quantity is a sum
of products over complete histories.
"""

import itertools

import numpy as np


def joint_y_prob(inst, x, y):
    """p(joint measurement index y | x) with sensor 0 most significant."""
    digits = np.unravel_index(y, (inst.n_y,) * inst.m)
    p = 1.0
    for i, yi in enumerate(digits):
        p *= inst.observation[i, x, yi]
    return p


def history_weights(inst, k, mechanisms, zs):
    """Map (x_k, y^k) -> p(x_k, y^k, z_1..z_{k-1}) using the given per-step mechanisms."""
    out = {}
    for xs in itertools.product(range(inst.n_x), repeat=k):
        px = inst.prior[xs[0]]
        for a, b in zip(xs, xs[1:]):
            px *= inst.transition[a, b]
        for ys in itertools.product(range(inst.n_yj), repeat=k):
            p = px
            for t in range(k):
                p *= joint_y_prob(inst, xs[t], ys[t])
            for t in range(k - 1):
                p *= mechanisms[t][ys[t], zs[t]]
            key = (xs[-1], ys)
            out[key] = out.get(key, 0.0) + p
    return out


def brute_belief(inst, mechanisms, zs):
    """b_{k+1}(x, y^{k+1}) = p(x_{k+1}, y^{k+1} | z^k) as an (n_x, n_yj**(k+1)) array."""
    k = len(zs) + 1
    w = history_weights(inst, k, list(mechanisms) + [None], list(zs) + [None])
    b = np.zeros((inst.n_x, inst.n_yj**k))
    for (x, ys), p in w.items():
        h = 0
        for y in ys:
            h = h * inst.n_yj + y
        b[x, h] = p
    return b / b.sum()


def brute_tree_value(inst, choice, estimate, level_offset):
    """Expected total cost of a policy tree by enumerating every joint history."""
    K, nz = inst.horizon, inst.n_z
    total = 0.0
    for xs in itertools.product(range(inst.n_x), repeat=K):
        px = inst.prior[xs[0]]
        for a, b in zip(xs, xs[1:]):
            px *= inst.transition[a, b]
        if px == 0:
            continue
        for ys in itertools.product(range(inst.n_yj), repeat=K):
            py = px
            for t in range(K):
                py *= joint_y_prob(inst, xs[t], ys[t])
            if py == 0:
                continue
            for zs in itertools.product(range(nz), repeat=K):
                p = py
                prefix = 0
                cost = 0.0
                for t in range(K):
                    node = level_offset[t] + prefix
                    p *= inst.menu[choice[node]][ys[t], zs[t]]
                    cost += inst.cost[xs[t], estimate[node, zs[t]]]
                    prefix = prefix * nz + zs[t]
                total += p * cost
    return total
