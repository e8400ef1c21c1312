import json
import math
from pathlib import Path

import numpy as np
import pytest

from rdpfusion.errors import (
    ImpossibleObservationError,
    InfeasibleInstanceError,
    InvalidInputError,
    UndefinedDivergenceError,
)
from rdpfusion.oracle import (
    DiscreteInstance,
    belief_update,
    bellman_residuals,
    compare,
    discrete_renyi_loss,
    evaluate_uniform,
    initial_belief,
    monte_carlo_value,
    open_loop_value,
    path_leakages,
    random_instance,
    renyi_divergence,
    sequence_value,
    smoothed_menu,
    solve_constrained_dp,
)

from brute_force import brute_belief, brute_tree_value

DATA = Path(__file__).parent / "data"
PKG_DATA = Path(__file__).resolve().parents[1] / "src" / "rdpfusion" / "data"


def test_identical_rows_have_zero_loss():
    q = np.array([[0.2, 0.3, 0.5]] * 4)
    assert discrete_renyi_loss(q, 2.0, 2, 2) == 0.0


def test_randomized_response_value():
    q = [[0.75, 0.25], [0.25, 0.75]]
    hand = math.log(0.75**2 / 0.25 + 0.25**2 / 0.75)
    assert discrete_renyi_loss(q, 2.0) == pytest.approx(hand, abs=1e-15)
    assert hand == pytest.approx(0.8472978603872037, abs=1e-15)
    # direct numeric evaluation of the divergence definition
    direct = max(
        math.log(sum(q[a][z] ** 2 * q[b][z] ** -1 for z in range(2))) for a, b in ((0, 1), (1, 0))
    )
    assert discrete_renyi_loss(q, 2.0) == pytest.approx(direct, abs=1e-15)


def test_loss_non_increasing_when_rows_mix():
    base = np.array([[0.9, 0.05, 0.05], [0.1, 0.2, 0.7]])
    prev = math.inf
    for t in np.linspace(0, 1, 41):
        mid = base.mean(axis=0)
        q = (1 - t) * base + t * mid
        v = discrete_renyi_loss(q, 3.0)
        assert v <= prev + 1e-12
        prev = v
    assert prev == pytest.approx(0.0, abs=1e-15)


def test_zero_denominator_raises():
    with pytest.raises(UndefinedDivergenceError):
        renyi_divergence([0.5, 0.5], [1.0, 0.0], 2.0)


def test_adjacency_is_one_sensor():
    # rows 0=(0,0) and 3=(1,1) differ in both sensors and are not adjacent
    q = np.array([[0.9, 0.1], [0.5, 0.5], [0.5, 0.5], [0.1, 0.9]])
    loss = discrete_renyi_loss(q, 2.0, 2, 2)
    adjacent = [(0, 1), (0, 2), (1, 3), (2, 3)]
    both = [renyi_divergence(q[a], q[b], 2.0) for i, j in adjacent for a, b in ((i, j), (j, i))]
    assert loss == pytest.approx(max(both), abs=1e-15)
    assert loss < renyi_divergence(q[0], q[3], 2.0)


def test_instance_validation():
    inst = random_instance(0)
    d = inst.to_dict()
    d["transition"][0][0] += 1e-9
    with pytest.raises(InvalidInputError):
        DiscreteInstance.from_dict(d)
    d = inst.to_dict()
    d["horizon"] = 4
    with pytest.raises(InvalidInputError):
        DiscreteInstance.from_dict(d)


def test_json_round_trip():
    inst = random_instance(4)
    again = DiscreteInstance.from_json(inst.to_json())
    assert again.to_json() == inst.to_json()
    assert np.array_equal(again.menu_loss, inst.menu_loss)


# --------------------------------------------------------------------------
# beliefs


def test_uninformative_update_is_prediction():
    inst = random_instance(1)
    flat_obs = np.full_like(inst.observation, 1.0 / inst.n_y)
    d = inst.to_dict()
    d["observation"] = flat_obs.tolist()
    inst = DiscreteInstance.from_dict(d)
    q = inst.menu[0]  # uniform symbol law
    b = initial_belief(inst)
    nb = belief_update(b, q, 1, inst)
    assert np.allclose(nb.sum(axis=1), inst.transition.T @ b.sum(axis=1), atol=1e-15)


def test_revealing_mechanism_collapses_history():
    inst = random_instance(2, m=1, n_z=2)
    q = np.eye(2)
    b = initial_belief(inst)
    nb = belief_update(b, q, 1, inst)
    # only histories whose first measurement is 1 survive
    mass = nb.reshape(inst.n_x, inst.n_yj, inst.n_yj).sum(axis=(0, 2))
    assert mass[0] == 0.0 and mass[1] == pytest.approx(1.0, abs=1e-15)


def test_impossible_symbol():
    inst = random_instance(2, m=1, n_z=2)
    b = initial_belief(inst)
    b[:, 1] = 0.0
    b /= b.sum()
    with pytest.raises(ImpossibleObservationError):
        belief_update(b, np.eye(2), 1, inst)


@pytest.mark.parametrize("seed", range(5))
def test_belief_matches_brute_force(seed):
    inst = random_instance(seed, n_x=2)
    rng = np.random.default_rng(seed)
    mechs = [inst.menu[rng.integers(len(inst.menu))] for _ in range(inst.horizon - 1)]
    zs = rng.integers(0, inst.n_z, size=inst.horizon - 1)
    b = initial_belief(inst)
    for k in range(inst.horizon - 1):
        b = belief_update(b, mechs[k], zs[k], inst)
        assert abs(b.sum() - 1.0) < 1e-12 and b.min() >= 0
        ref = brute_belief(inst, mechs[: k + 1], zs[: k + 1])
        assert np.max(np.abs(b - ref)) < 1e-12


# --------------------------------------------------------------------------
# dynamic programming


def test_zero_budget_is_open_loop():
    inst = random_instance(5).with_budget(0.0)
    tree = solve_constrained_dp(inst)
    assert tree.value == pytest.approx(open_loop_value(inst), abs=1e-12)
    assert np.all(inst.menu_loss[tree.choice] == 0.0)


def test_unconstrained_uses_most_informative():
    inst = random_instance(6)
    big = inst.with_budget(inst.horizon * inst.menu_loss.max() * 1.01)
    top = int(np.argmax(big.menu_loss))
    tree = solve_constrained_dp(big)
    assert tree.value == pytest.approx(sequence_value(big, [top] * big.horizon), abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_tree_value_matches_full_enumeration(seed):
    inst = random_instance(seed, n_x=2)
    tree = solve_constrained_dp(inst)
    assert brute_tree_value(inst, tree.choice, tree.estimate, tree.level_offset) == pytest.approx(tree.value, abs=1e-12)


def test_dominance_and_strictness_over_random_instances():
    strict = 0
    for seed in range(5):
        inst = random_instance(seed)
        tree = solve_constrained_dp(inst)
        uni = evaluate_uniform(inst)
        assert np.all(tree.value <= uni["values"] + 1e-12)
        strict += tree.value < uni["best_value"] - 1e-9
    assert strict >= 1


def test_every_path_respects_budget():
    for seed in range(5):
        inst = random_instance(seed, budget=1.5)
        tree = solve_constrained_dp(inst)
        assert path_leakages(inst, tree).max() <= inst.budget + 1e-12


def test_bellman_identity_and_monte_carlo():
    inst = random_instance(0)
    tree = solve_constrained_dp(inst)
    assert np.max(np.abs(bellman_residuals(inst, tree))) < 1e-12
    mean, se = monte_carlo_value(inst, tree, n=100_000, seed=1)
    assert abs(mean - tree.value) <= 3 * se


def test_menu_without_zero_leakage_is_infeasible():
    inst = random_instance(0)
    d = inst.to_dict()
    d["menu"] = smoothed_menu(2, 2, 3, levels=(0.3, 0.6)).tolist()
    inst = DiscreteInstance.from_dict(d)
    with pytest.raises(InfeasibleInstanceError):
        solve_constrained_dp(inst)


@pytest.mark.parametrize("name", ["oracle_fixture.json", "oracle_fixture_b0.json"])
def test_fixture_values_frozen(name):
    exp = json.loads((DATA / "oracle_fixture_expected.json").read_text())[name]
    inst = DiscreteInstance.from_json((PKG_DATA / name).read_text())
    r = compare(inst)
    for key in ("adaptive_value", "best_uniform_value", "open_loop_value"):
        assert abs(r[key] - exp[key]) <= 1e-12
    assert r["best_uniform_sequence"] == exp["best_uniform_sequence"]
    assert r["root_choice"] == exp["root_choice"]


def test_zero_budget_fixture_degenerates():
    inst = DiscreteInstance.from_json((PKG_DATA / "oracle_fixture_b0.json").read_text())
    r = compare(inst)
    assert abs(r["adaptive_value"] - r["best_uniform_value"]) <= 1e-12
    assert abs(r["adaptive_value"] - r["open_loop_value"]) <= 1e-12
