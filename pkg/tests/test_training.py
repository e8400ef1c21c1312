import numpy as np
import pytest

from rdpfusion import autodiff as ad
from rdpfusion.accountant import MechanismShape, clip_bound
from rdpfusion.autodiff import gradient_check
from rdpfusion.environments import DensityWalkEnv, LinearGaussianEnv
from rdpfusion.errors import InvalidInputError
from rdpfusion.fusion import Critic, Estimator, adaptive_policy, run_episodes
from rdpfusion.nn import Adam
from rdpfusion.training import (
    AuditFailure,
    PpoConfig,
    advantages_from_values,
    alternate_optimize,
    audit_batch,
    compute_advantages,
    cost_to_go,
    critic_update,
    joint_loss,
    joint_update,
    make_actor_optimizer,
    make_joint_optimizer,
    ppo_update,
    surrogate_loss,
)

ALPHA = 2.0


def _setup(budget=1.5, horizon=6, seed=0, hidden=6, env=None):
    env = env or LinearGaussianEnv(horizon=horizon)
    rng = np.random.default_rng(seed)
    shape = MechanismShape(2, env.spec.m)
    pol = adaptive_policy(budget, env.horizon, shape, ALPHA, rng, env.spec.n_y, hidden=hidden, head_hidden=hidden)
    est = Estimator(2, env.spec.n_x, rng, hidden=hidden, head_hidden=hidden,
                    out_shift=env.spec.state_mean, out_scale=env.spec.state_std)
    crit = Critic(2, rng, hidden=hidden, head_hidden=hidden)
    return env, pol, est, crit


def _snapshot(params):
    return [p.value.copy() for p in params]


def _same(params, snap):
    return all(np.array_equal(p.value, s) for p, s in zip(params, snap))


# --------------------------------------------------------------------------
# configuration


def test_config_validation():
    with pytest.raises(InvalidInputError):
        PpoConfig(clip_epsilon=1.0)
    with pytest.raises(InvalidInputError):
        PpoConfig(actor_lr=-1e-3)
    with pytest.raises(InvalidInputError):
        PpoConfig(surrogate="mean")
    with pytest.raises(InvalidInputError):
        PpoConfig(batch_episodes=0)
    with pytest.raises(InvalidInputError):
        PpoConfig(min_joint_updates=-1)


def test_patience_loop_respects_minimum():
    from rdpfusion.training import _patience_loop

    steps = []
    # validation never improves, so only the floor and the cap keep it running
    _, n = _patience_loop(steps.append, lambda: 1.0, patience=2, tol=1e-4, max_steps=50, min_steps=10)
    assert n == 10 and steps == list(range(10))
    _, n = _patience_loop(steps.append, lambda: 1.0, patience=2, tol=1e-4, max_steps=50)
    assert n == 2
    _, n = _patience_loop(steps.append, lambda: 1.0, patience=2, tol=1e-4, max_steps=5, min_steps=10)
    assert n == 5


# --------------------------------------------------------------------------
# joint phase


@pytest.mark.parametrize("seed", range(20))
def test_joint_loss_gradient(seed):
    env, pol, est, _ = _setup(horizon=3, seed=seed, hidden=3)
    b = run_episodes(env, pol, est, 1.5, ALPHA, seed=seed, batch=2)
    params = pol.filter_parameters() + est.parameters()
    assert gradient_check(lambda: joint_loss(pol, est, b), params) < 1e-4


def test_joint_loss_replays_the_rollout():
    env, pol, est, _ = _setup()
    b = run_episodes(env, pol, est, 1.5, ALPHA, seed=3, batch=5)
    with ad.no_grad():
        loss = joint_loss(pol, est, b)
    assert float(loss.value) == pytest.approx(b.errors.sum() / 5, rel=1e-12)


def test_zero_learning_rate_changes_nothing():
    env, pol, est, _ = _setup()
    opt = make_joint_optimizer(pol, est, PpoConfig(learning_rate=0.0))
    b = run_episodes(env, pol, est, 1.5, ALPHA, seed=1, batch=4)
    params = pol.parameters() + est.parameters()
    snap = _snapshot(params)
    err = joint_update(pol, est, b, opt)
    assert _same(params, snap)
    assert err == pytest.approx(b.mean_error(), rel=1e-12)


def test_joint_update_leaves_fusion_head_untouched():
    env, pol, est, _ = _setup()
    opt = make_joint_optimizer(pol, est, PpoConfig(learning_rate=1e-2))
    snap = [p.value.tobytes() for p in pol.actor_parameters()]
    filt = _snapshot(pol.filter_parameters())
    for i in range(3):
        joint_update(pol, est, run_episodes(env, pol, est, 1.5, ALPHA, seed=i, batch=4), opt)
    assert [p.value.tobytes() for p in pol.actor_parameters()] == snap
    assert not _same(pol.filter_parameters(), filt)


# --------------------------------------------------------------------------
# advantages and critic


def test_hand_built_advantages():
    raw, _ = advantages_from_values([[1.0, 0.5]], [[1.6, 0.6]], normalize=False)
    assert np.allclose(raw, [[-0.1, -0.1]], atol=1e-15)
    assert np.allclose(cost_to_go(np.array([[1.0, 0.5]])), [[1.5, 0.5]])


def test_normalised_advantages():
    rng = np.random.default_rng(0)
    _, norm = advantages_from_values(rng.exponential(size=(16, 5)), rng.normal(size=(16, 5)))
    assert abs(norm.mean()) < 1e-12 and norm.std() == pytest.approx(1.0, abs=1e-12)
    # a constant-cost batch fitted exactly by the critic has no advantage
    _, flat = advantages_from_values(np.ones((4, 3)), cost_to_go(np.ones((4, 3))))
    assert np.all(flat == 0.0)


def test_critic_regression_loss_non_increasing():
    env, pol, est, crit = _setup(horizon=5)
    b = run_episodes(env, pol, est, 1.5, ALPHA, seed=2, batch=16)
    crit.value_scale = float(cost_to_go(b.errors)[:, 0].mean())
    opt = Adam(crit.parameters(), 1e-3)
    losses = [critic_update(crit, b, opt) for _ in range(100)]
    rises = np.diff(losses)
    assert np.all(rises <= 1e-6 * np.abs(np.array(losses[:-1])))
    assert losses[-1] < losses[0]


def test_critic_learns_zero_target():
    env, pol, est, crit = _setup(horizon=4)
    b = run_episodes(env, pol, est, 1.5, ALPHA, seed=2, batch=8)
    b.errors[...] = 0.0
    opt = Adam(crit.parameters(), 1e-2)
    first = critic_update(crit, b, opt)
    for _ in range(300):
        last = critic_update(crit, b, opt)
    assert last < 1e-3 * first
    raw, _ = compute_advantages(b, crit, normalize=False)
    assert np.max(np.abs(raw)) < 0.05


# --------------------------------------------------------------------------
# actor


def _exploratory(budget=1.5, seed=0, batch=32, horizon=6):
    env, pol, est, crit = _setup(budget=budget, horizon=horizon, seed=seed)
    b = run_episodes(env, pol, est, budget, ALPHA, seed=seed, batch=batch, mode="exploratory")
    return pol, b


@pytest.mark.parametrize("form", ["min", "max"])
def test_unit_ratio_gives_policy_gradient(form):
    pol, b = _exploratory()
    adv = np.random.default_rng(1).standard_normal(b.errors.shape)
    params = pol.actor_parameters()
    loss, diag = surrogate_loss(pol, b, adv, 0.2, form)
    assert diag["clip_fraction"] == 0 and diag["masked"] == 0
    ad.backward(loss)
    g_sur = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    from rdpfusion.training import policy_means

    means = policy_means(pol, b)
    total = None
    for k in range(b.horizon):
        term = ad.tsum(ad.mul(pol.log_prob(b.actions[:, k], means[k]), adv[:, k]))
        total = term if total is None else ad.add(total, term)
    ad.backward(ad.mul(total, 1.0 / b.size))
    for gs, p in zip(g_sur, params):
        assert np.allclose(gs, p.grad, rtol=1e-9, atol=1e-12)


def test_zero_advantages_leave_actor_unchanged():
    pol, b = _exploratory()
    cfg = PpoConfig(actor_lr=1e-2)
    snap = _snapshot(pol.actor_parameters())
    ppo_update(pol, b, np.zeros_like(b.errors), cfg, make_actor_optimizer(pol, cfg))
    assert _same(pol.actor_parameters(), snap)


@pytest.mark.parametrize("form", ["min", "max"])
def test_zero_clip_is_a_no_op(form):
    pol, b = _exploratory()
    cfg = PpoConfig(actor_lr=1e-2, clip_epsilon=0.0, surrogate=form)
    snap = _snapshot(pol.actor_parameters())
    adv = np.random.default_rng(2).standard_normal(b.errors.shape)
    ppo_update(pol, b, adv, cfg, make_actor_optimizer(pol, cfg))
    assert _same(pol.actor_parameters(), snap)


@pytest.mark.parametrize("form", ["min", "max"])
def test_bandit_gain_rises_to_clip_bound(form):
    """One step, cost falls with the released gain: the mean gain climbs until clipped."""
    budget = 1.0
    env, pol, est, _ = _setup(budget=budget, horizon=1)
    bound = clip_bound(budget, pol.shape, ALPHA)
    # start well below the bound
    pol.gain_scale = 0.3 * bound
    cfg = PpoConfig(actor_lr=2e-2, surrogate=form)
    opt = make_actor_optimizer(pol, cfg)

    def mean_gain():
        return float(run_episodes(env, pol, est, budget, ALPHA, seed=0, batch=1).means.mean())

    # exhaustive check of the two-level comparison: the higher gain is cheaper
    cost = lambda g: 1.0 - np.max(np.abs(g), axis=-1)
    assert cost(np.full((1, 3), bound)) < cost(np.full((1, 3), 0.3 * bound))
    history = [mean_gain()]
    for it in range(60):
        b = run_episodes(env, pol, est, budget, ALPHA, seed=100 + it, batch=64, mode="exploratory")
        b.errors[:, 0] = cost(b.gains[:, 0])
        adv = (b.errors - b.errors.mean()) / b.errors.std()
        ppo_update(pol, b, adv, cfg, opt)
        history.append(mean_gain())
    hit = next(i for i, g in enumerate(history) if g >= bound)
    # below the bound the gain climbs; past it clipping removes the signal
    assert all(history[i] > history[0] for i in range(1, hit + 1))
    assert min(history[hit:]) >= 0.9 * bound


def test_ratio_overflow_is_masked():
    pol, b = _exploratory()
    b.log_prob[0, 0] -= 50.0
    _, diag = surrogate_loss(pol, b, np.ones_like(b.errors), 0.2)
    assert diag["masked"] == 1


# --------------------------------------------------------------------------
# outer loop


def test_audit_batch_rejects_overspend():
    env, pol, est, _ = _setup()
    b = run_episodes(env, pol, est, 1.5, ALPHA, seed=0, batch=3)
    audit_batch(b)
    b.gains[1, 2] *= 3.0
    with pytest.raises(AuditFailure):
        audit_batch(b)


def test_zero_outer_rounds_is_identity():
    env, pol, est, crit = _setup()
    params = pol.parameters() + est.parameters() + crit.parameters()
    snap = _snapshot(params)
    res = alternate_optimize(env, env, pol, est, crit, PpoConfig(outer_rounds=0), 1.5, ALPHA, seed=0)
    assert res.log == [] and _same(params, snap)


def _short_run(seed):
    env, pol, est, crit = _setup(env=DensityWalkEnv(m=2, horizon=5), seed=1, hidden=4)
    cfg = PpoConfig(outer_rounds=1, batch_episodes=4, max_joint_updates=3, max_ppo_iterations=3,
                    critic_warmup=2, val_episodes=4, patience=2)
    return alternate_optimize(env, env, pol, est, crit, cfg, 1.0, ALPHA, seed=seed)


def test_training_log_is_deterministic():
    a, b = _short_run(7), _short_run(7)
    assert a.log == b.log and len(a.log) > 0
    assert {"joint", "ppo"} == {r["phase"] for r in a.log}
    for rec in a.log:
        assert sum(rec["mean_leakage_profile"]) <= 1.0 + 1e-9
    assert _short_run(8).log != a.log


def test_kinds_share_filter_and_estimator_init():
    from rdpfusion import config as config_mod
    from rdpfusion.experiment import build_models

    cfg = config_mod.validate({"env": {"name": "linear"}})
    env = LinearGaussianEnv()
    a_pol, a_est, a_crit = build_models(cfg, env, 1.5, "adaptive", 5)
    c_pol, c_est, c_crit = build_models(cfg, env, 1.5, "classical", 5)
    assert a_crit is not None and c_crit is None
    for pa, pc in zip(a_pol.filter_parameters() + a_est.parameters(), c_pol.filter_parameters() + c_est.parameters()):
        assert np.array_equal(pa.value, pc.value)
