"""Rollout execution, clearance/accuracy metrics, obstacle perturbations,
and episode-level clustered bootstrap confidence intervals.

Conventions fixed here: SSR and the threshold probabilities use strict
inequalities; the large-perturbation protocol averages d_min and d_tgt over
its rollouts before thresholding; d_min covers executed steps only and the
same representative body points used during training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin
from . import policy as pol
from .geometry import ObbObstacle
from .scenario import (Scene, derive_seed, place_obstacle_counterfactual,
                       scene_valid)


class EvaluationError(RuntimeError):
    pass


class PerturbationError(EvaluationError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    episode_id: int
    perturbation_id: int
    rollout_id: int
    d_min: float
    d_tgt: float
    executed_steps: int
    collided: bool

    def __post_init__(self):
        if self.collided != (self.d_min < 0.0):
            raise EvaluationError("EvalRecord: collided flag must equal d_min < 0")

    def to_dict(self):
        return {
            "episode_id": self.episode_id,
            "perturbation_id": self.perturbation_id,
            "rollout_id": self.rollout_id,
            "d_min": self.d_min,
            "d_tgt": self.d_tgt,
            "executed_steps": self.executed_steps,
            "collided": self.collided,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["episode_id"], d["perturbation_id"], d["rollout_id"],
                   d["d_min"], d["d_tgt"], d["executed_steps"], d["collided"])


def records_to_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")))
            fh.write("\n")


def records_from_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(EvalRecord.from_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# rollouts


def rollout(net, scene, chain, chunks_per_episode, schedule, rng, *,
            sampler=pol.sample_chunk, episode_id=-1, perturbation_id=-1,
            rollout_id=0):
    """Execute chunks open-loop: sample, run every step (clamped to joint
    limits), recondition on the resulting joints, repeat. Collisions are
    recorded, never aborted."""
    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
    current = np.asarray(scene.start_joints, dtype=np.float64).copy()
    executed = []
    for _ in range(chunks_per_episode):
        cond = pol.ConditionVector(current, scene.target, scene.obstacle)
        chunk = sampler(net, cond, schedule, rng)
        chunk = np.clip(chunk, lo, hi)
        executed.append(chunk)
        current = chunk[-1].copy()
    steps = np.vstack(executed)
    d_min = kin.min_clearance(chain, steps, scene.obstacle)
    d_tgt = float(np.linalg.norm(kin.fk_ee(chain, steps[-1]) - scene.target))
    return EvalRecord(episode_id, perturbation_id, rollout_id, d_min, d_tgt,
                      steps.shape[0], d_min < 0.0)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    ssr: dict
    p_dmin: dict
    p_dtgt: dict
    n_records: int
    n_episodes: int
    ci_half_width: dict = field(default_factory=dict)
    degenerate: bool = False

    def metric_rows(self):
        rows = []
        for pair, value in self.ssr.items():
            rows.append((f"ssr({pair[0]:g},{pair[1]:g})", value,
                         self.ci_half_width.get(pair)))
        for thr, value in self.p_dmin.items():
            rows.append((f"p(d_min<{thr:g})", value, None))
        for thr, value in self.p_dtgt.items():
            rows.append((f"p(d_tgt<{thr:g})", value, None))
        return rows


DEFAULT_SSR_PAIRS = ((0.02, 0.10), (0.05, 0.15))
DEFAULT_DMIN_THRESHOLDS = (0.02, 0.05)
DEFAULT_DTGT_THRESHOLDS = (0.10, 0.15)


def compute_metrics(records, pairs=DEFAULT_SSR_PAIRS, *,
                    dmin_thresholds=DEFAULT_DMIN_THRESHOLDS,
                    dtgt_thresholds=DEFAULT_DTGT_THRESHOLDS):
    if not records:
        raise EvaluationError("compute_metrics: no records")
    d_min = np.array([r.d_min for r in records])
    d_tgt = np.array([r.d_tgt for r in records])
    ssr = {(a, b): float(np.mean((d_min > a) & (d_tgt < b))) for a, b in pairs}
    p_dmin = {t: float(np.mean(d_min < t)) for t in dmin_thresholds}
    p_dtgt = {t: float(np.mean(d_tgt < t)) for t in dtgt_thresholds}
    episodes = {r.episode_id for r in records}
    return MetricReport(ssr, p_dmin, p_dtgt, len(records), len(episodes))


# ---------------------------------------------------------------------------
# perturbations


def perturb_small(scene, rng, chain, *, delta=0.10, max_shift=0.10,
                  scale_lo=0.9, scale_hi=1.1, max_attempts=100):
    """In-plane shift up to ``max_shift`` plus per-axis size scaling; start,
    target and instruction stay untouched."""
    for _ in range(max_attempts):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        mag = rng.uniform(0.0, max_shift)
        scales = rng.uniform(scale_lo, scale_hi, size=3)
        shift = np.array([mag * np.cos(theta), mag * np.sin(theta), 0.0])
        box = ObbObstacle(scene.obstacle.center + shift, scene.obstacle.rotation,
                          scene.obstacle.half_extents * scales)
        new_scene = Scene(scene.start_joints, scene.target, box, scene.seed)
        if scene_valid(chain, new_scene, delta):
            return new_scene
    raise PerturbationError(f"perturb_small: no valid pose in {max_attempts} attempts")


def perturb_large(scene, demo_trajectory, epsilon, rng, chain, *, delta=0.10,
                  min_displacement=0.15, max_attempts=500):
    """Relocate the obstacle to a substantially different, still
    demo-interfering pose; start and target stay untouched.

    A second pass with the minimal corridor screen runs if the comfortable
    one exhausts its budget (rare demo geometries)."""
    for detour_margin in (None, 0.01):
        kwargs = {} if detour_margin is None else {"detour_margin": detour_margin}
        box = place_obstacle_counterfactual(
            chain, demo_trajectory, epsilon, rng, delta=delta, target=scene.target,
            start_q=scene.start_joints, goal_q=demo_trajectory[-1],
            old_center=scene.obstacle.center, min_center_dist=min_displacement,
            max_attempts=max_attempts, **kwargs)
        if box is not None:
            return Scene(scene.start_joints, scene.target, box, scene.seed)
    raise PerturbationError(f"perturb_large: no valid pose in 2x{max_attempts} attempts")


# ---------------------------------------------------------------------------
# protocols


PROTOCOLS = {
    "small": {"perturbations": 5, "rollouts": 1, "averaged": False},
    "large": {"perturbations": 2, "rollouts": 5, "averaged": True},
}


def run_protocol(net, episodes, level, chain, schedule, seed, *,
                 chunks_per_episode=3, epsilon=0.10, delta=0.10, counts=None,
                 sampler=pol.sample_chunk):
    """Perturb each base episode and roll the policy out.

    small: 5 perturbations x 1 rollout, one record each.
    large: 2 perturbations x 5 rollouts, the rollouts' d_min/d_tgt averaged
    into a single record per perturbation.
    """
    if level not in PROTOCOLS:
        raise EvaluationError(f"unknown perturbation level: {level!r}")
    proto = dict(PROTOCOLS[level])
    if counts:
        proto.update(counts)
    records = []
    for ep in episodes:
        for p in range(proto["perturbations"]):
            prng = np.random.default_rng(derive_seed(seed, ep.episode_id, p, 1))
            if level == "small":
                scene_p = perturb_small(ep.scene, prng, chain, delta=delta)
            else:
                scene_p = perturb_large(ep.scene, ep.trajectory, epsilon, prng,
                                        chain, delta=delta)
            rolls = []
            for r in range(proto["rollouts"]):
                rrng = np.random.default_rng(derive_seed(seed, ep.episode_id, p, r, 2))
                rolls.append(rollout(net, scene_p, chain, chunks_per_episode,
                                     schedule, rrng, sampler=sampler,
                                     episode_id=ep.episode_id, perturbation_id=p,
                                     rollout_id=r))
            if proto["averaged"]:
                d_min = float(np.mean([x.d_min for x in rolls]))
                d_tgt = float(np.mean([x.d_tgt for x in rolls]))
                records.append(EvalRecord(ep.episode_id, p, -1, d_min, d_tgt,
                                          rolls[0].executed_steps, d_min < 0.0))
            else:
                records.extend(rolls)
    return records


# ---------------------------------------------------------------------------
# clustered bootstrap


def clustered_bootstrap_ci(records, pair, b=2000, seed=0):
    """95% CI half-width (percentage points) of SSR(pair) via resampling
    whole episodes with replacement.

    Returns (half_width_pp, degenerate) where degenerate flags a single
    episode cluster.
    """
    if b < 1:
        raise EvaluationError(f"bootstrap: B must be >= 1, got {b}")
    if not records:
        raise EvaluationError("bootstrap: no records")
    alpha, beta = pair
    episode_order = []
    seen = {}
    for r in records:
        if r.episode_id not in seen:
            seen[r.episode_id] = len(episode_order)
            episode_order.append(r.episode_id)
    n_ep = len(episode_order)
    passes = np.zeros(n_ep)
    totals = np.zeros(n_ep)
    for r in records:
        g = seen[r.episode_id]
        totals[g] += 1
        passes[g] += float(r.d_min > alpha and r.d_tgt < beta)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n_ep, size=(b, n_ep))
    reps = passes[draws].sum(axis=1) / totals[draws].sum(axis=1)
    lo, hi = np.percentile(reps, [2.5, 97.5])
    return float((hi - lo) / 2.0 * 100.0), n_ep == 1
