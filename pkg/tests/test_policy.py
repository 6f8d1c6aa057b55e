import os

import numpy as np
import pytest

from safereach import autodiff as ad
from safereach import kinematics as kin
from safereach import policy as pol
from safereach.geometry import ObbObstacle
from safereach.scenario import Episode, Scene


@pytest.fixture(scope="module")
def chain():
    return kin.default_chain()


def toy_episode(rng, chain, box=None, n=20):
    start = rng.normal(scale=0.4, size=3)
    goal = rng.normal(scale=0.6, size=3)
    t = np.linspace(0, 1, n)[:, None]
    traj = (1 - t) * start + t * goal
    box = box or ObbObstacle.from_yaw(rng.normal(scale=0.4, size=3), 0.3, [0.05] * 3)
    scene = Scene(start, kin.fk_ee(chain, goal), box, 0)
    return Episode(scene, traj, "toy", {}, 0)


# ---------------------------------------------------------------------------
# schedule


def test_schedule_single_step():
    s = pol.schedule_init(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.beta, [0.5])
    np.testing.assert_array_equal(s.alpha_bar, [1.0, 0.5])


def test_schedule_matches_direct_cumprod():
    s = pol.schedule_init(20, 1e-4, 0.2)
    beta = np.linspace(1e-4, 0.2, 20)
    np.testing.assert_allclose(s.alpha_bar[1:], np.cumprod(1.0 - beta), rtol=0, atol=1e-12)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < 0.12


def test_schedule_rejects_bad_bounds():
    with pytest.raises(pol.PolicyError):
        pol.schedule_init(10, 1e-4, 1.0)
    with pytest.raises(pol.PolicyError):
        pol.schedule_init(10, 0.3, 0.2)
    with pytest.raises(pol.PolicyError):
        pol.schedule_init(0)


# ---------------------------------------------------------------------------
# forward diffusion


def test_diffuse_limits():
    a0 = np.array([2.0])
    eps = np.array([4.0])
    np.testing.assert_array_equal(pol.diffuse_affine(a0, eps, 1.0), a0)
    np.testing.assert_array_equal(pol.diffuse_affine(a0, eps, 0.0), eps)


def test_diffuse_hand_value():
    out = pol.diffuse_affine(np.array([2.0]), np.array([4.0]), 0.25)
    assert out[0] == pytest.approx(4.464101615137754, abs=1e-15)


def test_forward_diffuse_range_check():
    s = pol.schedule_init(5)
    a0 = np.zeros((2, 3))
    with pytest.raises(pol.PolicyError, match="outside"):
        pol.forward_diffuse(a0, 0, np.zeros((2, 3)), s)
    with pytest.raises(pol.PolicyError, match="outside"):
        pol.forward_diffuse(a0, 6, np.zeros((2, 3)), s)
    out = pol.forward_diffuse(a0, 5, np.ones((2, 3)), s)
    np.testing.assert_allclose(out, np.sqrt(1 - s.alpha_bar[5]), atol=1e-15)


# ---------------------------------------------------------------------------
# network


def test_zero_final_layer_predicts_zero_chunk(chain):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(8, 8), seed=0)
    cond = pol.ConditionVector(np.zeros(3), [0.5, 0.2, 0.0],
                               ObbObstacle.from_yaw([0.5, 0.1, 0.0], 0.0, [0.05] * 3))
    rng = np.random.default_rng(0)
    pred = pol.denoise_predict(net, rng.normal(size=(4, 3)), cond, 3)
    assert pred.shape == (4, 3)
    np.testing.assert_array_equal(pred, np.zeros((4, 3)))


def test_denoise_predict_deterministic_and_shaped(chain):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(8, 8), seed=1)
    net.weights[-1].data = np.random.default_rng(2).normal(size=net.weights[-1].data.shape)
    cond = pol.ConditionVector(np.zeros(3), [0.5, 0.2, 0.0],
                               ObbObstacle.from_yaw([0.5, 0.1, 0.0], 0.0, [0.05] * 3))
    a_k = np.random.default_rng(3).normal(size=(4, 3))
    p1 = pol.denoise_predict(net, a_k, cond, 2)
    p2 = pol.denoise_predict(net, a_k, cond, 2)
    assert p1.shape == (4, 3)
    np.testing.assert_array_equal(p1, p2)
    with pytest.raises(pol.PolicyError, match="shape"):
        pol.denoise_predict(net, np.zeros((5, 3)), cond, 2)


# ---------------------------------------------------------------------------
# losses


def test_mse_loss_values():
    assert pol.mse_loss(np.ones((2, 2)), np.ones((2, 2))) == 0.0
    assert pol.mse_loss(np.array([[1.0, 1.0]]), np.array([[0.0, 0.0]])) == 1.0
    assert pol.mse_loss(np.array([[3.0]]), np.array([[1.0]])) == 4.0


def test_geo_loss_zero_when_clear(chain):
    far = ObbObstacle.from_yaw([10.0, 0.0, 0.0], 0.0, [0.05] * 3)
    assert pol.geo_loss(np.zeros((4, 3)), chain, far, 0.10) == 0.0


def test_geo_loss_single_violation_hand_value(chain):
    # ee probe at x=0.9, face at x=0.98: sdf 0.08, radius 0.03 -> d = 0.05
    box = ObbObstacle.from_yaw([1.03, 0.0, 0.0], 0.0, [0.05, 0.5, 0.5])
    val = pol.geo_loss(np.zeros((1, 3)), chain, box, 0.10)
    assert val == pytest.approx(0.0025, abs=1e-12)


def test_geo_loss_two_violations_hand_value(chain):
    # same box; widen link2's radius so d = 0.28 - 0.30 = -0.02 joins d = 0.05
    box = ObbObstacle.from_yaw([1.03, 0.0, 0.0], 0.0, [0.05, 0.5, 0.5])
    radii = {"link1_end": 0.03, "link2_end": 0.30, "end_effector": 0.03}
    chain2 = kin.KinematicChain(chain.segments, chain.representative_set, radii,
                                chain.joint_limits, "wide")
    val = pol.geo_loss(np.zeros((1, 3)), chain2, box, 0.10)
    assert val == pytest.approx(0.00845, abs=1e-12)


def test_geo_loss_rejects_nonpositive_delta(chain):
    with pytest.raises(pol.PolicyError):
        pol.geo_loss(np.zeros((1, 3)), chain, ObbObstacle.from_yaw([1, 0, 0], 0, [0.1] * 3), 0.0)


def test_geo_loss_tensor_path_matches_numpy(chain):
    rng = np.random.default_rng(4)
    box = ObbObstacle.from_yaw([0.5, 0.2, 0.0], 0.2, [0.06] * 3)
    chunk = rng.normal(scale=0.5, size=(6, 3))
    f_np = pol.geo_loss(chunk, chain, box, 0.10)
    t = ad.Tensor(chunk, requires_grad=True)
    f_t = pol.geo_loss(t, chain, box, 0.10)
    assert float(f_t.data) == pytest.approx(f_np, abs=1e-15)


def test_geo_loss_monotone_in_active_clearance(chain):
    # raising a violating clearance (probe backing away) never raises the loss
    box = ObbObstacle.from_yaw([1.03, 0.0, 0.0], 0.0, [0.05, 0.5, 0.5])
    vals = []
    for x in [0.98, 0.96, 0.94, 0.9]:  # clearance d = 0.95 - x grows along the list
        segs = (
            kin.Segment("j1", np.zeros(3), np.array([0.0, 0.0, 1.0])),
            kin.Segment("tip", np.array([x, 0.0, 0.0]), None),
        )
        c = kin.KinematicChain(segs, ("tip",), {"tip": 0.03}, [[-3, 3]], "probe")
        vals.append(pol.geo_loss(np.zeros((1, 1)), c, box, 0.10))
    assert all(vals)  # every probe stays inside the active band
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_geo_loss_gradcheck_through_fk_and_sdf(chain):
    rng = np.random.default_rng(5)
    box = ObbObstacle.from_yaw([0.45, 0.15, 0.0], 0.1, [0.06] * 3)
    found = 0
    worst = 0.0
    while found < 10:
        chunk = rng.normal(scale=0.6, size=(3, 3))
        if pol.geo_loss(chunk, chain, box, 0.10) == 0.0:
            continue
        found += 1

        def f(t):
            out = pol.geo_loss(t, chain, box, 0.10)
            assert isinstance(out, ad.Tensor)
            return out

        worst = max(worst, ad.gradient_check(f, ad.Tensor(chunk, requires_grad=True), h=1e-6))
    assert worst <= 1e-4


# ---------------------------------------------------------------------------
# training


def make_batch(chain, n=6, seed=0, far=False):
    rng = np.random.default_rng(seed)
    box = ObbObstacle.from_yaw([10.0, 0.0, 0.0], 0.0, [0.05] * 3) if far else None
    return [toy_episode(rng, chain, box=box) for _ in range(n)]


def test_train_step_reports_three_losses(chain):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(16,), seed=0)
    sched = pol.schedule_init(5)
    state = pol.TrainState.new(1)
    out = pol.train_step(net, make_batch(chain), sched, chain, 1.0, 0.10, state)
    assert set(out) == {"mse", "geo", "total"}
    assert out["total"] == pytest.approx(out["mse"] + out["geo"], abs=1e-12)


def test_train_step_lambda_zero_total_is_mse(chain):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(16,), seed=0)
    sched = pol.schedule_init(5)
    out = pol.train_step(net, make_batch(chain), sched, chain, 0.0, 0.10,
                         pol.TrainState.new(1))
    assert out["total"] == out["mse"]


def test_train_step_rejects_negative_lambda(chain):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(16,), seed=0)
    with pytest.raises(pol.PolicyError):
        pol.train_step(net, make_batch(chain), pol.schedule_init(5), chain, -1.0,
                       0.10, pol.TrainState.new(1))


def _run_steps(lam, chain, steps=5, far=False, geo_enabled=True):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(16,), seed=0)
    sched = pol.schedule_init(5)
    state = pol.TrainState.new(9)
    batch = make_batch(chain, far=far)
    for _ in range(steps):
        if geo_enabled:
            pol.train_step(net, batch, sched, chain, lam, 0.10, state)
        else:
            # geometry-disabled twin: the same update path minus every
            # clearance computation
            rng = state.rng
            a0, conds = pol._sample_windows(rng, batch, net.t_a)
            ks = rng.integers(1, sched.K + 1, size=len(batch))
            eps = rng.standard_normal((len(batch), net.t_a * net.dof))
            a0_flat = a0.reshape(len(batch), -1)
            a_k = (np.sqrt(sched.alpha_bar[ks])[:, None] * a0_flat
                   + np.sqrt(1.0 - sched.alpha_bar[ks])[:, None] * eps)
            pred = net.forward(ad.Tensor(net.input_for(a_k, conds, ks)))
            mse = ad.tmean(ad.square(ad.sub(pred, ad.Tensor(a0_flat))))
            ad.backward(mse)
            pol.adam_update(state.opt, net.params())
    return [w.data.copy() for w in net.weights]


def test_lambda_zero_bit_identical_to_geometry_disabled(chain):
    with_geo = _run_steps(0.0, chain, geo_enabled=True)
    without = _run_steps(0.0, chain, geo_enabled=False)
    for a, b in zip(with_geo, without):
        assert np.array_equal(a, b)


def test_far_obstacle_update_equals_lambda_zero(chain):
    lam1 = _run_steps(1.0, chain, far=True)
    lam0 = _run_steps(0.0, chain, far=True)
    for a, b in zip(lam1, lam0):
        assert np.array_equal(a, b)


class _OracleNet(pol.PolicyNetwork):
    """Denoiser that ignores its input and returns a stored clean chunk."""

    def __init__(self, a0, cond_width):
        super().__init__(a0.shape[0], a0.shape[1], cond_width, hidden=(2,), seed=0)
        self._a0 = a0

    def forward(self, x):
        from safereach import autodiff as ad
        return ad.Tensor(np.tile(self._a0.reshape(1, -1), (x.data.shape[0], 1)))


def test_oracle_denoiser_gives_zero_mse_for_all_k(chain):
    sched = pol.schedule_init(8)
    rng = np.random.default_rng(11)
    a0 = rng.normal(size=(4, 3))
    net = _OracleNet(a0, pol.cond_dim(chain))
    cond = pol.ConditionVector(np.zeros(3), [0.5, 0.2, 0.0],
                               ObbObstacle.from_yaw([0.5, 0.1, 0.0], 0.0, [0.05] * 3))
    for k in range(1, sched.K + 1):
        a_k = pol.forward_diffuse(a0, k, rng.normal(size=(4, 3)), sched)
        pred = pol.denoise_predict(net, a_k, cond, k)
        assert pol.mse_loss(a0, pred) == 0.0


def test_training_reduces_mse_on_toy_set(chain):
    rng = np.random.default_rng(21)
    episodes = [toy_episode(rng, chain) for _ in range(10)]
    net = pol.PolicyNetwork(8, 3, pol.cond_dim(chain), hidden=(32, 32), seed=0)
    sched = pol.schedule_init(10)
    state = pol.TrainState.new(2, lr=3e-4)
    first = None
    last = None
    for step in range(200):
        batch = [episodes[int(i)] for i in state.rng.integers(0, 10, size=8)]
        out = pol.train_step(net, batch, sched, chain, 1.0, 0.10, state)
        if step == 0:
            first = out["mse"]
        last = out["mse"]
    assert last <= 0.5 * first


# ---------------------------------------------------------------------------
# sampling


def test_sample_chunk_single_step_collapse(chain):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(8,), seed=3)
    net.weights[-1].data = np.random.default_rng(4).normal(size=net.weights[-1].data.shape)
    sched = pol.schedule_init(1, 0.5, 0.5)
    cond = pol.ConditionVector(np.zeros(3), [0.5, 0.2, 0.0],
                               ObbObstacle.from_yaw([0.5, 0.1, 0.0], 0.0, [0.05] * 3))
    chunk = pol.sample_chunk(net, cond, sched, np.random.default_rng(7))
    noise = np.random.default_rng(7).standard_normal((1, 12))
    expected = pol.denoise_predict(net, noise.reshape(4, 3), cond, 1)
    np.testing.assert_array_equal(chunk, expected)


def test_sample_chunk_deterministic_and_finite(chain):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(8,), seed=5)
    net.weights[-1].data = np.random.default_rng(6).normal(size=net.weights[-1].data.shape)
    sched = pol.schedule_init(6)
    rng = np.random.default_rng(13)
    for _ in range(100):
        cond = pol.ConditionVector(rng.normal(size=3), rng.normal(size=3),
                                   ObbObstacle.from_yaw(rng.normal(size=3), 0.1, [0.05] * 3))
        chunk = pol.sample_chunk(net, cond, sched, np.random.default_rng(5))
        again = pol.sample_chunk(net, cond, sched, np.random.default_rng(5))
        assert chunk.shape == (4, 3)
        assert np.all(np.isfinite(chunk))
        np.testing.assert_array_equal(chunk, again)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path, chain):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(8, 8), seed=8)
    sched = pol.schedule_init(6)
    path = tmp_path / "ckpt.json"
    pol.save_checkpoint(path, net, sched, chain, {"lambda": 1.0})
    net2, sched2, meta = pol.load_checkpoint(path, chain)
    assert meta == {"lambda": 1.0}
    assert sched2.K == 6
    assert net2.layer_sizes == net.layer_sizes
    for a, b in zip(net.weights, net2.weights):
        assert np.array_equal(a.data, b.data)


def test_checkpoint_deterministic_bytes(tmp_path, chain):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(8,), seed=9)
    sched = pol.schedule_init(4)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    pol.save_checkpoint(p1, net, sched, chain)
    pol.save_checkpoint(p2, net, sched, chain)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_chain_hash_mismatch(tmp_path, chain):
    net = pol.PolicyNetwork(4, 3, pol.cond_dim(chain), hidden=(8,), seed=10)
    sched = pol.schedule_init(4)
    path = tmp_path / "ckpt.json"
    pol.save_checkpoint(path, net, sched, chain)
    other = kin.KinematicChain(chain.segments, chain.representative_set,
                               {**chain.radii, "end_effector": 0.04},
                               chain.joint_limits, "other")
    with pytest.raises(pol.CheckpointError, match="chain hash"):
        pol.load_checkpoint(path, other)
