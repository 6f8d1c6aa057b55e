"""Counterfactual episode generation.

Per episode: plan an obstacle-free reference by straight-line joint
interpolation to an IK goal, place a box so it interferes with that
reference (min clearance below the threshold), then re-plan a collision-free
trajectory around the box with a joint-space RRT plus shortcut smoothing.
Only the re-planned trajectory is stored.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin
from .geometry import ObbObstacle, obb_sdf


class GenerationError(RuntimeError):
    pass


def derive_seed(*parts):
    """Stable child seed from integer/str parts (platform independent)."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.extend(p.encode())
        else:
            ints.append(int(p))
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class Scene:
    start_joints: np.ndarray
    target: np.ndarray
    obstacle: ObbObstacle
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "start_joints", np.array(self.start_joints, dtype=np.float64))
        object.__setattr__(self, "target", np.array(self.target, dtype=np.float64))


@dataclass
class Episode:
    scene: Scene
    trajectory: np.ndarray  # (N, dof)
    instruction: str
    provenance: dict = field(default_factory=dict)
    episode_id: int = -1


TARGET_MARGIN = 0.02  # scene invariant: box never this close to the target point
PLACEMENT_TARGET_MARGIN = 0.06  # sampler keeps more room, mirroring the
                                # object-level (cube vs cube) non-intersection


def scene_valid(chain, scene, delta):
    """Shared scene invariants: box clear of target point and start pose."""
    if obb_sdf(scene.target, scene.obstacle) < TARGET_MARGIN:
        return False
    start_clear = kin.min_clearance(chain, scene.start_joints, scene.obstacle)
    return start_clear > delta


# ---------------------------------------------------------------------------
# reference plan and obstacle placement


def plan_reference(chain, start_q, goal_q, n_steps):
    """Straight-line joint interpolation; trivially feasible without obstacles."""
    t = np.linspace(0.0, 1.0, n_steps)[:, None]
    return (1.0 - t) * np.asarray(start_q) + t * np.asarray(goal_q)


DETOUR_MARGIN = 0.05  # certified corridor width; keeps scenes solvable with
                      # clearance to spare rather than margin-hugging squeezes


def _detour_exists(chain, ref_traj, box, rng, margin, *, n_dirs=8,
                   magnitudes=(0.25, 0.5, 0.9, 1.3)):
    """Cheap re-planability screen: does some bump-deformed copy of the
    reference clear the box? Endpoints stay fixed (the bump vanishes there),
    so a hit certifies a collision-free local deviation exists."""
    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
    t = np.linspace(0.0, 1.0, len(ref_traj))
    bump = np.sin(np.pi * t)[:, None]
    for _ in range(n_dirs):
        v = rng.normal(size=chain.dof)
        v /= np.linalg.norm(v)
        for mag in magnitudes:
            for sign in (1.0, -1.0):
                cand = np.clip(ref_traj + sign * mag * bump * v, lo, hi)
                if kin.min_clearance(chain, cand, box) >= margin:
                    return True
    return False


def place_obstacle_counterfactual(chain, ref_traj, epsilon, rng, *, delta=0.10,
                                  target=None, start_q=None, goal_q=None,
                                  planner_margin=0.01, offset_radius=0.15,
                                  half_lo=0.03, half_hi=0.08,
                                  old_center=None, min_center_dist=0.0,
                                  detour_margin=DETOUR_MARGIN,
                                  max_attempts=200):
    """Sample a box near the swept reference path until it interferes.

    Accepts a pose when the reference's min clearance drops below epsilon
    while the start pose, the goal pose, and the target point stay clear and
    a local deviation around the box still exists (re-planability).
    Returns None when the attempt budget runs out.
    """
    if epsilon <= 0.0:
        raise GenerationError(f"epsilon must be > 0, got {epsilon}")
    ref_traj = np.asarray(ref_traj, dtype=np.float64)
    anchor_pts = kin.fk_points(chain, ref_traj)
    n, k = anchor_pts.shape[0], anchor_pts.shape[1]
    for _ in range(max_attempts):
        wp = int(rng.integers(0, n))
        slot = int(rng.integers(0, k))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        radius = offset_radius * rng.uniform() ** (1.0 / 3.0)
        yaw = rng.uniform(-np.pi, np.pi)
        half = rng.uniform(half_lo, half_hi, size=3)
        center = anchor_pts[wp, slot] + radius * direction
        box = ObbObstacle.from_yaw(center, yaw, half)
        if old_center is not None and np.linalg.norm(center - old_center) < min_center_dist:
            continue
        if kin.min_clearance(chain, ref_traj, box) >= epsilon:
            continue
        if target is not None and obb_sdf(target, box) < PLACEMENT_TARGET_MARGIN:
            continue
        if start_q is not None and kin.min_clearance(chain, start_q, box) <= delta:
            continue
        if goal_q is not None and kin.min_clearance(chain, goal_q, box) <= planner_margin:
            continue
        if not _detour_exists(chain, ref_traj, box, rng,
                              max(planner_margin, detour_margin)):
            continue
        return box
    return None


# ---------------------------------------------------------------------------
# joint-space RRT with shortcut smoothing


def _config_free(chain, q, box, margin):
    return kin.min_clearance(chain, q, box) >= margin


def _edge_free(chain, q0, q1, box, margin, resolution):
    dist = float(np.linalg.norm(q1 - q0))
    n = max(2, int(np.ceil(dist / resolution)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    qs = (1.0 - t) * q0 + t * q1
    return kin.min_clearance(chain, qs, box) >= margin


def rrt_plan(chain, q_start, q_goal, box, rng, *, margin=0.01, step=0.1,
             goal_bias=0.1, max_nodes=5000, edge_resolution=0.01,
             connect_radius=1.5):
    """Goal-biased RRT in joint space; returns a waypoint list or None.

    New nodes within ``connect_radius`` of the goal attempt a direct,
    fully checked connect edge (the usual fix for the sparse last mile).
    """
    q_start = np.asarray(q_start, dtype=np.float64)
    q_goal = np.asarray(q_goal, dtype=np.float64)
    if not (_config_free(chain, q_start, box, margin)
            and _config_free(chain, q_goal, box, margin)):
        return None
    if _edge_free(chain, q_start, q_goal, box, margin, edge_resolution):
        return [q_start.copy(), q_goal.copy()]
    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
    nodes = np.empty((max_nodes + 2, chain.dof))
    parents = np.empty(max_nodes + 2, dtype=np.int64)
    nodes[0] = q_start
    parents[0] = -1
    count = 1
    for _ in range(max_nodes):
        q_rand = q_goal if rng.uniform() < goal_bias else rng.uniform(lo, hi)
        d2 = ((nodes[:count] - q_rand) ** 2).sum(axis=1)
        ni = int(np.argmin(d2))
        dist = float(np.sqrt(d2[ni]))
        if dist < 1e-12:
            continue
        q_new = q_rand if dist <= step else nodes[ni] + (q_rand - nodes[ni]) * (step / dist)
        if not _config_free(chain, q_new, box, margin):
            continue
        if not _edge_free(chain, nodes[ni], q_new, box, margin, edge_resolution):
            continue
        nodes[count] = q_new
        parents[count] = ni
        count += 1
        if (np.linalg.norm(q_new - q_goal) <= connect_radius
                and _edge_free(chain, q_new, q_goal, box, margin, edge_resolution)):
            nodes[count] = q_goal
            parents[count] = count - 1
            count += 1
            path = []
            i = count - 1
            while i >= 0:
                path.append(nodes[i].copy())
                i = parents[i]
            path.reverse()
            return path
    return None


SHORTCUT_MARGIN = 0.05  # splices must keep this much clearance; keeps the
                        # demonstrations from hugging the box at the hard floor


def shortcut_path(chain, path, box, rng, *, margin=SHORTCUT_MARGIN,
                  edge_resolution=0.01, attempts=200):
    """Random shortcutting: splice out detours whose direct edge keeps a
    comfortable clearance (the hard 0.01 m floor still governs validity)."""
    path = [np.asarray(q, dtype=np.float64) for q in path]
    for _ in range(attempts):
        if len(path) <= 2:
            break
        i = int(rng.integers(0, len(path)))
        j = int(rng.integers(0, len(path)))
        if i > j:
            i, j = j, i
        if j <= i + 1:
            continue
        if _edge_free(chain, path[i], path[j], box, margin, edge_resolution):
            path = path[: i + 1] + path[j:]
    return path


def resample_waypoints(path, n_steps):
    """Arc-length resampling of a piecewise-linear joint path to n_steps rows."""
    path = np.asarray(path, dtype=np.float64)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0.0:
        return np.repeat(path[:1], n_steps, axis=0)
    targets = np.linspace(0.0, total, n_steps)
    out = np.empty((n_steps, path.shape[1]))
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    frac = (targets - cum[idx]) / np.where(seg[idx] > 0.0, seg[idx], 1.0)
    out = path[idx] + frac[:, None] * (path[idx + 1] - path[idx])
    out[0] = path[0]
    out[-1] = path[-1]
    return out


def replan_with_obstacle(chain, scene, goal_q, rng, *, n_steps=80, margin=0.01,
                         step=0.1, goal_bias=0.1, max_nodes=5000,
                         edge_resolution=0.01, shortcut_attempts=200,
                         shortcut_margin=SHORTCUT_MARGIN):
    """Collision-free trajectory from the scene start to the IK goal."""
    path = rrt_plan(chain, scene.start_joints, goal_q, scene.obstacle, rng,
                    margin=margin, step=step, goal_bias=goal_bias,
                    max_nodes=max_nodes, edge_resolution=edge_resolution)
    if path is None:
        return None
    path = shortcut_path(chain, path, scene.obstacle, rng,
                         margin=max(shortcut_margin, margin),
                         edge_resolution=edge_resolution, attempts=shortcut_attempts)
    traj = resample_waypoints(path, n_steps)
    if kin.min_clearance(chain, traj, scene.obstacle) < margin:
        return None  # rare resampling dip below the checked edges
    return traj


# ---------------------------------------------------------------------------
# episode pipeline


def _sample_scene_inputs(chain, rng, *, min_target_norm=0.2, max_joint_travel=2.5,
                         ik_tol=0.005, max_tries=50):
    """Start config, reachable target, and IK goal with moderate joint travel.

    The travel cap keeps demonstrations at tabletop-reach scale instead of
    whole-arm reconfigurations, which also keeps re-planning tractable.
    """
    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
    for _ in range(max_tries):
        start = rng.uniform(0.5 * lo, 0.5 * hi)
        q_target = rng.uniform(0.8 * lo, 0.8 * hi)
        target = kin.fk_ee(chain, q_target)
        radial = np.linalg.norm(target)
        if radial < min_target_norm or radial > 0.97 * chain.max_reach:
            continue
        if np.linalg.norm(target - kin.fk_ee(chain, start)) < 0.15:
            continue
        try:
            goal_q = kin.solve_ik(chain, target, start, tol=ik_tol)
        except kin.UnreachableError:
            continue
        if np.linalg.norm(goal_q - start) > max_joint_travel:
            continue
        return start, target, goal_q
    return None


def generate_episode(chain, seed, *, n_steps=80, epsilon=0.10, delta=0.10,
                     ik_tol=0.005, planner_margin=0.01, rrt_step=0.1,
                     goal_bias=0.1, max_nodes=5000, edge_resolution=0.01,
                     shortcut_attempts=200):
    """One full pipeline attempt; returns None on any resample signal."""
    rng = np.random.default_rng(seed)
    inputs = _sample_scene_inputs(chain, rng, ik_tol=ik_tol)
    if inputs is None:
        return None
    start, target, goal_q = inputs
    ref = plan_reference(chain, start, goal_q, n_steps)
    box = place_obstacle_counterfactual(
        chain, ref, epsilon, rng, delta=delta, target=target, start_q=start,
        goal_q=goal_q, planner_margin=planner_margin)
    if box is None:
        return None
    scene = Scene(start, target, box, seed)
    if not scene_valid(chain, scene, delta):
        return None
    traj = replan_with_obstacle(
        chain, scene, goal_q, rng, n_steps=n_steps, margin=planner_margin,
        step=rrt_step, goal_bias=goal_bias, max_nodes=max_nodes,
        edge_resolution=edge_resolution, shortcut_attempts=shortcut_attempts)
    if traj is None:
        return None
    d_tgt = float(np.linalg.norm(kin.fk_ee(chain, traj[-1]) - target))
    if d_tgt > ik_tol:
        return None
    instruction = (f"Reach the target at ({target[0]:.2f}, {target[1]:.2f}), "
                   "avoiding the obstacle.")
    provenance = {
        "epsilon": float(epsilon),
        "planner_seed": int(seed),
        "min_clearance_ref": kin.min_clearance(chain, ref, box),
        "min_clearance_plus": kin.min_clearance(chain, traj, box),
    }
    return Episode(scene, traj, instruction, provenance)


def _generate_with_retries(args):
    chain, index, master_seed, retries, kwargs = args
    for attempt in range(retries):
        seed = derive_seed(master_seed, index, attempt)
        ep = generate_episode(chain, seed, **kwargs)
        if ep is not None:
            ep.episode_id = index
            ep.provenance["attempts"] = attempt + 1
            return ep
    raise GenerationError(f"episode {index}: no valid scene after {retries} attempts")


def generate_dataset(chain, count, epsilon, seed, *, jobs=1, retries=50, **kwargs):
    """Generate ``count`` episodes with per-episode derived seeds."""
    if count < 1:
        raise GenerationError(f"count must be >= 1, got {count}")
    kwargs = dict(kwargs, epsilon=epsilon)
    tasks = [(chain, i, seed, retries, kwargs) for i in range(count)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            episodes = list(pool.map(_generate_with_retries, tasks))
    else:
        episodes = [_generate_with_retries(t) for t in tasks]
    return episodes


# ---------------------------------------------------------------------------
# serialization and statistics


def episode_to_json(ep, chain):
    record = {
        "episode_id": ep.episode_id,
        "seed": int(ep.scene.seed),
        "chain_hash": chain.chain_hash,
        "start_joints": ep.scene.start_joints.tolist(),
        "target": ep.scene.target.tolist(),
        "obstacle": ep.scene.obstacle.to_dict(),
        "trajectory": ep.trajectory.tolist(),
        "instruction": ep.instruction,
    }
    return json.dumps(record, separators=(",", ":"))


def episode_from_json(line, chain=None):
    d = json.loads(line)
    if chain is not None and d["chain_hash"] != chain.chain_hash:
        raise GenerationError(
            f"episode {d['episode_id']}: chain hash {d['chain_hash']} != {chain.chain_hash}")
    scene = Scene(np.asarray(d["start_joints"]), np.asarray(d["target"]),
                  ObbObstacle.from_dict(d["obstacle"]), d["seed"])
    return Episode(scene, np.asarray(d["trajectory"], dtype=np.float64),
                   d["instruction"], {}, d["episode_id"])


def write_dataset(path, episodes, chain):
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(episode_to_json(ep, chain))
            fh.write("\n")


def load_dataset(path, chain=None):
    episodes = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                episodes.append(episode_from_json(line, chain))
    return episodes


def dataset_stats(episodes, chain):
    """Demonstration statistics: clearance and final accuracy distributions."""
    d_min = np.array([kin.min_clearance(chain, ep.trajectory, ep.scene.obstacle)
                      for ep in episodes])
    d_tgt = np.array([np.linalg.norm(kin.fk_ee(chain, ep.trajectory[-1]) - ep.scene.target)
                      for ep in episodes])
    return {
        "episodes": len(episodes),
        "steps_per_episode": int(episodes[0].trajectory.shape[0]) if episodes else 0,
        "d_min_mean": float(d_min.mean()),
        "d_min_std": float(d_min.std()),
        "d_tgt_mean": float(d_tgt.mean()),
        "d_tgt_std": float(d_tgt.std()),
        "p_dmin_lt_0.02": float(np.mean(d_min < 0.02)),
        "p_dmin_lt_0.05": float(np.mean(d_min < 0.05)),
        "p_dtgt_lt_0.10": float(np.mean(d_tgt < 0.10)),
        "p_dtgt_lt_0.15": float(np.mean(d_tgt < 0.15)),
    }
