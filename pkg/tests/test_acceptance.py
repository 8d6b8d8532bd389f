"""End-to-end acceptance checks, one per shipped guarantee.

Every test prints one PASS line so a verbose run reads as a checklist;
a failed guarantee shows up as the test's failure line instead. The two
refinement-trend checks share one trained model through a module fixture
and are the slow part of the suite.
"""
from __future__ import annotations

import hashlib
import heapq
import time

import numpy as np
import pytest

from voxrefine import autodiff as ad
from voxrefine.clicks import OracleConfig
from voxrefine.datagen import (
    PHANTOM_SHAPES,
    PhantomConfig,
    generate_phantom,
    initial_segmentation,
)
from voxrefine.env import (
    ActionSet,
    EnvConfig,
    RefineEnv,
    cross_entropy_map,
    discounted_return,
    run_episode,
)
from voxrefine.geodesy import GeodesicConfig, geodesic_field
from voxrefine.metrics import dice, evaluate_sequence, mean_report
from voxrefine.network import ActorCriticNet, NetConfig, save_checkpoint
from voxrefine.training import TrainConfig, compute_advantages, episode_losses, train
from voxrefine.volumes import LabelMask, ProbabilityMap, Volume3D, binarize


# ---------------------------------------------------------------------------
# geodesic distances


def _heap_dijkstra(intensity, seeds, connectivity, lam):
    """Independent heap-based Dijkstra, written apart from the shipped code."""
    dims = intensity.shape
    offs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                o = abs(dx) + abs(dy) + abs(dz)
                if o == 0 or (connectivity == 6 and o > 1):
                    continue
                offs.append((dx, dy, dz, (dx * dx + dy * dy + dz * dz) ** 0.5))
    dist = np.full(dims, np.inf)
    heap = []
    for s in seeds:
        dist[tuple(s)] = 0.0
        heapq.heappush(heap, (0.0, tuple(s)))
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for dx, dy, dz, slen in offs:
            w = (u[0] + dx, u[1] + dy, u[2] + dz)
            if not all(0 <= w[i] < dims[i] for i in range(3)):
                continue
            cand = d + slen + lam * abs(intensity[w] - intensity[u])
            if cand < dist[w]:
                dist[w] = cand
                heapq.heappush(heap, (cand, w))
    return dist


def test_exact_geodesic_backend_matches_brute_force_dijkstra():
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    for case in range(200):
        dims = tuple(int(rng.integers(2, 7)) for _ in range(3))
        img = rng.normal(size=dims)
        connectivity = 6 if case % 2 else 26
        lam = float(rng.uniform(0.0, 2.0))
        n_seeds = int(rng.integers(1, 4))
        seeds = [tuple(int(rng.integers(0, d)) for d in dims)
                 for _ in range(n_seeds)]
        cfg = GeodesicConfig(connectivity=connectivity, intensity_weight=lam,
                             backend="dijkstra")
        got = geodesic_field(Volume3D(img), seeds, cfg).data
        want = _heap_dijkstra(img, seeds, connectivity, lam)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    print(f"PASS geodesic exact backend == brute-force Dijkstra "
          f"(200 volumes, atol 1e-9, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# gradients


def test_every_parameter_matches_central_finite_differences():
    t0 = time.monotonic()
    rng = np.random.default_rng(5)
    dims = (4, 4, 4)
    truth = LabelMask((rng.random(dims) < 0.3).astype(float))
    image = Volume3D(rng.normal(size=dims))
    prob0 = ProbabilityMap(rng.random(dims))
    net = ActorCriticNet(NetConfig(channels=2, n_actions=6), rng,
                         zero_heads=False)
    env_cfg = EnvConfig(
        horizon=2,
        oracle=OracleConfig(mode="good", n_click=2, noise_halfwidth=0),
        geodesy=GeodesicConfig(backend="raster", raster_passes=2))
    env = RefineEnv(image, truth, env_cfg)
    trace, outputs = run_episode(env, net, prob0, rng=np.random.default_rng(3))
    advs = compute_advantages(trace, gamma=0.95)
    cfg = TrainConfig()

    def total_loss():
        outs = [net.forward_state(s.state) for s in trace.steps]
        p_loss, v_loss = episode_losses(outs, trace, advs, cfg)
        return p_loss.data + v_loss.data

    # analytic gradients on the recorded trajectory
    outs = [net.forward_state(s.state) for s in trace.steps]
    p_loss, v_loss = episode_losses(outs, trace, advs, cfg)
    ad.zero_grads(net.parameters().values())
    ad.backward(ad.add(p_loss, v_loss))

    # h must be small enough that no hidden relu flips inside +/-h, and
    # the atol sits at the finite-difference roundoff floor for this h
    h = 1e-6
    for name, p in net.parameters().items():
        flat = p.data.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = total_loss()
            flat[i] = orig - h
            fm = total_loss()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        np.testing.assert_allclose(
            p.grad.ravel(), numeric, rtol=1e-6, atol=3e-8,
            err_msg=f"parameter {name}")
    elapsed = time.monotonic() - t0
    assert elapsed < 120.0
    print(f"PASS all parameter tensors match central differences "
          f"(rel 1e-6, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# rewards


def test_episode_rewards_telescope_to_total_error_drop():
    t0 = time.monotonic()
    for k in range(100):
        rng = np.random.default_rng(np.random.SeedSequence((77, k)))
        dims = (5, 6, 4)
        truth = LabelMask((rng.random(dims) < 0.35).astype(float))
        image = Volume3D(rng.normal(size=dims))
        prob0 = ProbabilityMap(rng.random(dims))
        net = ActorCriticNet(NetConfig(channels=2), rng, zero_heads=False)
        env_cfg = EnvConfig(
            horizon=3,
            oracle=OracleConfig(mode="good", n_click=2, noise_halfwidth=1),
            geodesy=GeodesicConfig(backend="raster", raster_passes=1))
        env = RefineEnv(image, truth, env_cfg)
        trace, _ = run_episode(env, net, prob0, rng=rng)
        total = sum(s.reward.data for s in trace.steps)
        drop = (cross_entropy_map(prob0, truth)
                - cross_entropy_map(trace.final_state.prob, truth))
        np.testing.assert_allclose(total, drop, rtol=0, atol=1e-9)
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    print(f"PASS per-voxel rewards telescope over 100 episodes "
          f"(atol 1e-9, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# return and advantage arithmetic


def _trace_with(mean_rewards, values):
    from voxrefine.env import EpisodeTrace, StepRecord

    trace = EpisodeTrace()
    for r, v in zip(mean_rewards, values):
        trace.steps.append(StepRecord(
            state=None, actions=np.zeros((1, 1, 1), dtype=int),
            reward=Volume3D(np.full((1, 1, 1), r)), mean_reward=r,
            value=v, new_clicks=0))
    return trace


def test_return_and_advantage_hand_arithmetic():
    # the tabulated discounted return; the widely quoted 0.833725 value
    # does not satisfy the stated formula, the direct evaluation does
    direct = 0.5 + 0.95 * 0.2 + 0.95 ** 2 * 0.1 + 0.95 ** 3 * 0.05 \
        + 0.95 ** 4 * 0.02
    assert direct == pytest.approx(0.839408875, abs=1e-12)
    got = discounted_return([0.5, 0.2, 0.1, 0.05, 0.02], gamma=0.95)
    assert got == pytest.approx(0.839408875, abs=1e-12)

    advs = compute_advantages(_trace_with([1.0], [0.3]), gamma=0.5)
    assert advs[0].advantage == pytest.approx(0.7, abs=1e-12)

    advs = compute_advantages(_trace_with([1.0, 0.5], [0.0, 0.0]), gamma=0.9)
    assert advs[0].return_to_go == pytest.approx(1.45, abs=1e-12)
    assert advs[1].return_to_go == pytest.approx(0.5, abs=1e-12)
    assert advs[0].advantage == pytest.approx(1.45, abs=1e-12)
    assert advs[1].advantage == pytest.approx(0.5, abs=1e-12)
    print("PASS discounted-return and advantage arithmetic (1e-12)")


# ---------------------------------------------------------------------------
# dice


def test_dice_matches_brute_force_counting():
    rng = np.random.default_rng(31)
    pairs = []
    for _ in range(998):
        da, db = rng.uniform(0.05, 0.95, size=2)
        pairs.append(((rng.random((8, 8, 8)) < da),
                      (rng.random((8, 8, 8)) < db)))
    zeros = np.zeros((8, 8, 8), dtype=bool)
    pairs.append((zeros, zeros.copy()))                 # empty vs empty
    pairs.append((zeros, rng.random((8, 8, 8)) < 0.5))  # empty vs nonempty
    for a, b in pairs:
        inter = 0
        na = 0
        nb = 0
        for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
            inter += 1 if (x and y) else 0
            na += 1 if x else 0
            nb += 1 if y else 0
        want = 1.0 if (na + nb) == 0 else 2.0 * inter / (na + nb)
        got = dice(LabelMask(a.astype(float)), LabelMask(b.astype(float)))
        assert got == want
    print("PASS dice equals brute-force counting on 1000 mask pairs (exact)")


# ---------------------------------------------------------------------------
# refinement trends


def _phantom_case(seed):
    img, truth = generate_phantom(
        PhantomConfig(shape=PHANTOM_SHAPES[seed % 3], seed=seed))
    return img, initial_segmentation(img, "bg"), truth


def _eval_env(mode):
    return EnvConfig(
        horizon=5,
        oracle=OracleConfig(mode=mode, n_click=5, noise_halfwidth=1),
        geodesy=GeodesicConfig(backend="raster", raster_passes=1))


@pytest.fixture(scope="module")
def trained_trend_model():
    """Train once with the best recipe found and score the 20-case suite."""
    train_set = [_phantom_case(1000 + i) for i in range(10)]
    cfg = TrainConfig(epochs_pretrain=15, epochs_finetune=45, lr=2e-3,
                      augment=False, seed=7)
    t0 = time.monotonic()
    result = train(train_set, cfg, _eval_env("good"),
                   NetConfig(channels=4, value_bias_init=-1.0))
    suite = [_phantom_case(100 + i) for i in range(20)]
    good = mean_report([
        evaluate_sequence(result.net, img, p0, truth, _eval_env("good"), seed=0)
        for img, p0, truth in suite])
    return result.net, suite, good, time.monotonic() - t0


def test_good_interaction_dice_rises_every_step(trained_trend_model):
    net, suite, good, elapsed = trained_trend_model
    assert elapsed < 45 * 60.0
    steps = good.step_dice  # index 0 = initial, 1..5 = refinement steps
    assert all(steps[t + 1] > steps[t] for t in range(1, 5)), steps
    assert steps[5] >= steps[0] + 0.2, steps
    print(f"PASS refinement trend: dice strictly rising steps 1-5 and "
          f"final >= initial+0.20 ({['%.3f' % s for s in steps]}, "
          f"train+eval {elapsed:.0f}s)")


def test_interaction_quality_orders_final_dice(trained_trend_model):
    net, suite, good, _ = trained_trend_model
    t0 = time.monotonic()
    without = mean_report([
        evaluate_sequence(net, img, p0, truth, _eval_env("without"), seed=0)
        for img, p0, truth in suite])
    bad = mean_report([
        evaluate_sequence(net, img, p0, truth, _eval_env("bad"), seed=0)
        for img, p0, truth in suite])
    elapsed = time.monotonic() - t0
    assert elapsed < 10 * 60.0
    assert bad.step_dice[5] <= bad.step_dice[0] + 0.01, bad.step_dice
    assert good.step_dice[5] > without.step_dice[5] > bad.step_dice[5], (
        good.step_dice[5], without.step_dice[5], bad.step_dice[5])
    print(f"PASS interaction ordering good {good.step_dice[5]:.3f} > "
          f"without {without.step_dice[5]:.3f} > bad {bad.step_dice[5]:.3f} "
          f"({elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# unit-magnitude action regime


def test_unit_actions_binarize_probabilities_after_one_step():
    rng = np.random.default_rng(9)
    dims = (6, 6, 5)
    truth = LabelMask((rng.random(dims) < 0.3).astype(float))
    image = Volume3D(rng.normal(size=dims))
    prob0 = ProbabilityMap(rng.random(dims))
    env_cfg = EnvConfig(
        horizon=3,
        actions=ActionSet((-1.0, 1.0)),
        oracle=OracleConfig(mode="good", n_click=2, noise_halfwidth=0),
        geodesy=GeodesicConfig(backend="raster", raster_passes=1))
    net = ActorCriticNet(NetConfig(channels=2, n_actions=2), rng,
                         zero_heads=False)
    env = RefineEnv(image, truth, env_cfg)
    trace, _ = run_episode(env, net, prob0, rng=rng)
    after_first = [s.state.prob.data for s in trace.steps[1:]]
    after_first.append(trace.final_state.prob.data)
    for p in after_first:
        assert np.isin(p, (0.0, 1.0)).all()
    print("PASS unit-magnitude actions give exactly binary maps after step 1")


# ---------------------------------------------------------------------------
# determinism


def test_synchronous_training_checkpoints_hash_identical(tmp_path):
    rng = np.random.default_rng(0)
    dims = (6, 6, 6)
    truth = np.zeros(dims)
    truth[2:4, 2:4, 2:4] = 1.0
    case = (Volume3D(truth + rng.normal(0, 0.05, dims)),
            ProbabilityMap(np.zeros(dims)), LabelMask(truth))
    env_cfg = EnvConfig(
        horizon=2,
        oracle=OracleConfig(mode="good", n_click=2, noise_halfwidth=1),
        geodesy=GeodesicConfig(backend="raster", raster_passes=1))
    cfg = TrainConfig(epochs_pretrain=2, epochs_finetune=2, augment=True,
                      seed=13)
    digests = []
    for run in range(2):
        result = train([case], cfg, env_cfg, NetConfig(channels=2))
        path = tmp_path / f"run{run}.vxrc"
        save_checkpoint(path, result.net)
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
    assert digests[0] == digests[1]
    print(f"PASS two seeded synchronous runs give hash-identical "
          f"checkpoints ({digests[0][:12]}...)")
