"""Serial-chain kinematics: forward kinematics on plain arrays and on the
autodiff tape, plus damped-gradient-descent inverse kinematics.

A chain is an ordered list of segments. Each segment first translates by its
``offset`` in the parent frame, then (if it is a joint) rotates about its
unit ``axis`` by the next joint angle. A segment's "frame origin" is its
position after the translate step; the configured representative set picks
the segments whose origins act as clearance probe points.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from . import kernels

_AXIS_TOL = 1e-9


class ChainError(ValueError):
    pass


class UnreachableError(RuntimeError):
    """IK could not reach the target; callers resample the scene."""


@dataclass(frozen=True, eq=False)
class Segment:
    name: str
    offset: np.ndarray
    axis: np.ndarray | None  # None for fixed segments (e.g. the tool tip)

    def __post_init__(self):
        object.__setattr__(self, "offset", np.array(self.offset, dtype=np.float64))
        if self.offset.shape != (3,):
            raise ChainError(f"segment {self.name}: offset must be a 3-vector")
        if self.axis is not None:
            axis = np.array(self.axis, dtype=np.float64)
            if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > _AXIS_TOL:
                raise ChainError(f"segment {self.name}: axis must be a unit 3-vector")
            object.__setattr__(self, "axis", axis)


@dataclass(frozen=True, eq=False)
class KinematicChain:
    segments: tuple
    representative_set: tuple
    radii: dict
    joint_limits: np.ndarray
    name: str = "chain"

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "representative_set", tuple(self.representative_set))
        object.__setattr__(self, "joint_limits", np.array(self.joint_limits, dtype=np.float64))
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise ChainError("duplicate segment names")
        for rep in self.representative_set:
            if rep not in names:
                raise ChainError(f"representative link {rep!r} not in chain")
            if self.radii.get(rep, 0.0) <= 0.0:
                raise ChainError(f"representative link {rep!r} needs a radius > 0")
        if self.joint_limits.shape != (self.dof, 2):
            raise ChainError(f"joint_limits must be ({self.dof}, 2)")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ChainError("joint_limits must satisfy min < max")

    @property
    def dof(self):
        return sum(1 for s in self.segments if s.axis is not None)

    @property
    def link_names(self):
        return [s.name for s in self.segments]

    @property
    def max_reach(self):
        return float(sum(np.linalg.norm(s.offset) for s in self.segments))

    @cached_property
    def _arrays(self):
        """(offsets, axes, is_joint, rep_idx, radii) in kernel layout."""
        m = len(self.segments)
        offsets = np.zeros((m, 3))
        axes = np.zeros((m, 3))
        is_joint = np.zeros(m, dtype=np.uint8)
        for i, s in enumerate(self.segments):
            offsets[i] = s.offset
            if s.axis is not None:
                axes[i] = s.axis
                is_joint[i] = 1
        names = self.link_names
        rep_idx = np.array([names.index(r) for r in self.representative_set], dtype=np.int64)
        radii = np.array([self.radii[r] for r in self.representative_set])
        return offsets, axes, is_joint, rep_idx, radii

    def to_dict(self):
        return {
            "name": self.name,
            "segments": [
                {
                    "name": s.name,
                    "offset": [float(v) for v in s.offset],
                    "axis": None if s.axis is None else [float(v) for v in s.axis],
                }
                for s in self.segments
            ],
            "representative_set": list(self.representative_set),
            "radii": {k: float(v) for k, v in self.radii.items()},
            "joint_limits": [[float(lo), float(hi)] for lo, hi in self.joint_limits],
        }

    @classmethod
    def from_dict(cls, d):
        segments = tuple(
            Segment(s["name"], np.asarray(s["offset"], dtype=np.float64),
                    None if s.get("axis") is None else np.asarray(s["axis"], dtype=np.float64))
            for s in d["segments"]
        )
        return cls(segments, tuple(d["representative_set"]), dict(d["radii"]),
                   np.asarray(d["joint_limits"], dtype=np.float64), d.get("name", "chain"))

    @cached_property
    def chain_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_chain():
    """Planar 3-revolute arm, links 0.4/0.3/0.2 m, all probe radii 0.03 m."""
    z = np.array([0.0, 0.0, 1.0])
    segments = (
        Segment("base_joint", np.zeros(3), z),
        Segment("link1_end", np.array([0.4, 0.0, 0.0]), z),
        Segment("link2_end", np.array([0.3, 0.0, 0.0]), z),
        Segment("end_effector", np.array([0.2, 0.0, 0.0]), None),
    )
    reps = ("link1_end", "link2_end", "end_effector")
    radii = {r: 0.03 for r in reps}
    limits = np.array([[-3.0, 3.0]] * 3)
    return KinematicChain(segments, reps, radii, limits, name="planar3")


@dataclass(frozen=True)
class JointState:
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.array(self.q, dtype=np.float64))


@dataclass(frozen=True)
class LinkPoses:
    """World 4x4 homogeneous transforms, one per segment, in chain order."""

    names: tuple
    poses: tuple

    def pose(self, name):
        return self.poses[self.names.index(name)]


def _as_q(chain, q):
    arr = q.q if isinstance(q, JointState) else np.asarray(q, dtype=np.float64)
    if arr.shape != (chain.dof,):
        raise ChainError(f"joint state length {arr.shape} does not match dof {chain.dof}")
    return arr


def _axis_rotation(axis, theta):
    ax, ay, az = axis
    c, s = np.cos(theta), np.sin(theta)
    omc = 1.0 - c
    return np.array([
        [c + omc * ax * ax, -s * az + omc * ax * ay, s * ay + omc * ax * az],
        [s * az + omc * ay * ax, c + omc * ay * ay, -s * ax + omc * ay * az],
        [-s * ay + omc * az * ax, s * ax + omc * az * ay, c + omc * az * az],
    ])


def forward_kinematics(chain, q):
    """World pose of every segment frame for one configuration."""
    qv = _as_q(chain, q)
    T = np.eye(4)
    poses = []
    j = 0
    for seg in chain.segments:
        T = T.copy()
        T[:3, 3] = T[:3, 3] + T[:3, :3] @ seg.offset
        if seg.axis is not None:
            T[:3, :3] = T[:3, :3] @ _axis_rotation(seg.axis, qv[j])
            j += 1
        poses.append(T)
    return LinkPoses(tuple(chain.link_names), tuple(poses))


def representative_points(poses: LinkPoses, chain):
    """Frame origins of the representative set, as (link_id, point) pairs."""
    return [(name, poses.pose(name)[:3, 3].copy()) for name in chain.representative_set]


def fk_points(chain, qs):
    """Representative points for configs qs (n, dof) -> (n, |S|, 3)."""
    qs = np.asarray(qs, dtype=np.float64)
    if qs.ndim == 1:
        qs = qs.reshape(1, -1)
    if qs.shape[1] != chain.dof:
        raise ChainError(f"configs have {qs.shape[1]} columns, dof is {chain.dof}")
    off, axes, is_joint, rep_idx, _ = chain._arrays
    return kernels.fk_points_batch(qs, off, axes, is_joint, rep_idx)


def clearances(chain, qs, box):
    """Surface clearance per config and representative link, (n, |S|)."""
    qs = np.asarray(qs, dtype=np.float64)
    if qs.ndim == 1:
        qs = qs.reshape(1, -1)
    off, axes, is_joint, rep_idx, radii = chain._arrays
    return kernels.clearance_batch(qs, off, axes, is_joint, rep_idx, radii,
                                   box.center, box.rotation, box.half_extents)


def min_clearance(chain, qs, box):
    qs = np.asarray(qs, dtype=np.float64)
    if qs.ndim == 1:
        qs = qs.reshape(1, -1)
    off, axes, is_joint, rep_idx, radii = chain._arrays
    return kernels.min_clearance(qs, off, axes, is_joint, rep_idx, radii,
                                 box.center, box.rotation, box.half_extents)


# ---------------------------------------------------------------------------
# tape-side forward kinematics
#
# Frame entries are carried as a 3x3 rotation plus position, each entry a
# python float (structurally constant) or a (n,) Tensor. Structural zeros
# are skipped so the planar default records a compact graph while remaining
# value-identical to the kernels.


def _bs_mul(a, b):
    if isinstance(a, float) and isinstance(b, float):
        return a * b
    if isinstance(a, float):
        a, b = b, a
    # a is Tensor, b is float or Tensor
    if isinstance(b, float):
        if b == 0.0:
            return 0.0
        if b == 1.0:
            return a
        return ad.smul(a, b)
    return ad.mul(a, b)


def _bs_add(a, b):
    if isinstance(a, float) and isinstance(b, float):
        return a + b
    if isinstance(a, float):
        a, b = b, a
    if isinstance(b, float):
        if b == 0.0:
            return a
        return ad.add(a, ad.Tensor(np.full(a.data.shape, b)))
    return ad.add(a, b)


def _bs_tensor(v, n):
    return v if isinstance(v, ad.Tensor) else ad.Tensor(np.full(n, v))


def _fk_frames_graph(chain, q):
    """Origins of every segment frame as {name: [x, y, z]} batch entries."""
    n = q.data.shape[0]
    if q.data.shape[1] != chain.dof:
        raise ChainError(f"configs have {q.data.shape[1]} columns, dof is {chain.dof}")
    R = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    p = [0.0, 0.0, 0.0]
    origins = {}
    j = 0
    for seg in chain.segments:
        off = seg.offset
        p = [
            _bs_add(p[i], _bs_add(_bs_add(_bs_mul(R[i][0], float(off[0])),
                                          _bs_mul(R[i][1], float(off[1]))),
                                  _bs_mul(R[i][2], float(off[2]))))
            for i in range(3)
        ]
        if seg.axis is not None:
            theta = ad.tslice(q, (slice(None), j))
            j += 1
            c = ad.cos(theta)
            s = ad.sin(theta)
            omc = ad.sub(ad.Tensor(np.ones(n)), c)
            ax, ay, az = (float(v) for v in seg.axis)
            K = [[0.0, -az, ay], [az, 0.0, -ax], [-ay, ax, 0.0]]
            A = [[None] * 3 for _ in range(3)]
            for m in range(3):
                for nn in range(3):
                    aa = (ax, ay, az)[m] * (ax, ay, az)[nn]
                    term = c if m == nn else 0.0
                    term = _bs_add(term, _bs_mul(s, K[m][nn]))
                    A[m][nn] = _bs_add(term, _bs_mul(omc, aa))
            Rn = [[None] * 3 for _ in range(3)]
            for i in range(3):
                for nn in range(3):
                    Rn[i][nn] = _bs_add(_bs_add(_bs_mul(R[i][0], A[0][nn]),
                                                _bs_mul(R[i][1], A[1][nn])),
                                        _bs_mul(R[i][2], A[2][nn]))
            R = Rn
        origins[seg.name] = p
    return origins


def fk_points_graph(chain, q):
    """Differentiable representative points for a (n, dof) joint Tensor.

    Returns a list aligned with the representative set; each element is an
    (x, y, z) triple of (n,) Tensors.
    """
    n = q.data.shape[0]
    origins = _fk_frames_graph(chain, q)
    return [tuple(_bs_tensor(v, n) for v in origins[name]) for name in chain.representative_set]


def fk_ee_graph(chain, q):
    """Differentiable end-effector position for a (n, dof) joint Tensor."""
    n = q.data.shape[0]
    origins = _fk_frames_graph(chain, q)
    return tuple(_bs_tensor(v, n) for v in origins[chain.segments[-1].name])


def fk_ee(chain, qs):
    """End-effector position(s): origin of the final segment frame."""
    qs = np.asarray(qs, dtype=np.float64)
    single = qs.ndim == 1
    if single:
        qs = qs.reshape(1, -1)
    off, axes, is_joint, _, _ = chain._arrays
    last = np.array([len(chain.segments) - 1], dtype=np.int64)
    pts = kernels.fk_points_batch(qs, off, axes, is_joint, last)[:, 0, :]
    return pts[0] if single else pts


_IK_STARTS = 8
_IK_FACTORS = np.array([2.0, 1.0, 0.5, 0.125])


def solve_ik(chain, target, q0, tol=0.005, max_iters=500):
    """Joint angles whose end effector lies within ``tol`` of ``target``.

    Damped gradient descent on the squared end-effector error, with joint
    limits enforced by clamping. Several deterministic starts descend in
    parallel (one batched tape pass per iteration) so local minima of the
    folded-arm landscape do not strand the solver.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (3,):
        raise ChainError("target must be a 3-vector")
    if np.linalg.norm(target) > chain.max_reach + 1e-12:
        raise UnreachableError(
            f"target norm {np.linalg.norm(target):.3f} exceeds reach {chain.max_reach:.3f}")
    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
    q0 = np.clip(_as_q(chain, q0), lo, hi)
    seed_rng = np.random.default_rng(0)
    q = np.vstack([q0, seed_rng.uniform(lo, hi, size=(_IK_STARTS - 1, chain.dof))])
    s = q.shape[0]
    step = np.full(s, 0.25)
    stall = np.zeros(s, dtype=int)
    restart_rng = np.random.default_rng(1)
    best_q, best_err = q[0].copy(), float(np.linalg.norm(fk_ee(chain, q[0]) - target))
    for _ in range(max_iters):
        qt = ad.Tensor(q, requires_grad=True)
        px, py, pz = fk_ee_graph(chain, qt)
        ex = ad.sub(px, ad.Tensor(np.full(s, target[0])))
        ey = ad.sub(py, ad.Tensor(np.full(s, target[1])))
        ez = ad.sub(pz, ad.Tensor(np.full(s, target[2])))
        loss = ad.tsum(ad.add(ad.add(ad.square(ex), ad.square(ey)), ad.square(ez)))
        ad.backward(loss)
        errs = np.sqrt(ex.data ** 2 + ey.data ** 2 + ez.data ** 2)
        if errs[0] <= tol:
            return q[0].copy()  # favor the caller's basin when it works
        hit = errs <= tol
        if np.any(hit):
            # prefer the converged solution nearest the initial guess
            cand = q[hit]
            return cand[int(np.argmin(np.linalg.norm(cand - q0, axis=1)))].copy()
        k = int(np.argmin(errs))
        if errs[k] < best_err:
            best_q, best_err = q[k].copy(), float(errs[k])
        grad = qt.grad
        # vectorized backtracking: per start, try a few step factors at once
        cand = q[:, None, :] - (step[:, None] * _IK_FACTORS)[:, :, None] * grad[:, None, :]
        cand = np.clip(cand, lo, hi)
        cerr = np.linalg.norm(
            fk_ee(chain, cand.reshape(-1, chain.dof)) - target, axis=1).reshape(s, -1)
        pick = np.argmin(cerr, axis=1)
        cbest = cerr[np.arange(s), pick]
        improved = cbest < errs - 1e-15
        q[improved] = cand[np.arange(s), pick][improved]
        step[improved] = np.minimum(step[improved] * np.where(pick[improved] == 0, 1.6, 1.0), 4.0)
        stall[improved] = 0
        step[~improved] *= 0.3
        stall[~improved] += 1
        dead = (stall >= 8) | (step < 1e-10)
        dead[0] = False  # keep the caller's basin alive for preference
        if np.any(dead):
            q[dead] = restart_rng.uniform(lo, hi, size=(int(dead.sum()), chain.dof))
            step[dead] = 0.25
            stall[dead] = 0
    if best_err <= tol:
        return best_q
    raise UnreachableError(f"IK failed: residual {best_err:.4f} > tol {tol}")
