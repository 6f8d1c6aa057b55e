"""Denoising policy: noise schedule, conditional MLP, imitation loss,
clearance hinge loss, combined training step, and inference sampling.

The network predicts the clean action chunk directly (x0 parameterization);
sampling re-noises the prediction to the next level with fresh Gaussian
noise. The clearance loss maps predicted chunks through forward kinematics
and the box SDF, then averages a squared hinge over the active violations
only, so batches with no near-obstacle prediction contribute an exact zero.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kinematics as kin
from .geometry import ObbObstacle, obb_sdf_graph


class PolicyError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule; alpha_bar[k] is cumulative, alpha_bar[0] = 1."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def K(self):
        return len(self.beta)


def schedule_init(K, beta_start=1e-4, beta_end=0.2):
    if K < 1:
        raise PolicyError(f"schedule_init: K must be >= 1, got {K}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise PolicyError(
            f"schedule_init: need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, K)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return DiffusionSchedule(beta, alpha_bar)


def diffuse_affine(a0, eps, alpha_bar_k):
    """sqrt(ab) * a0 + sqrt(1 - ab) * eps, the forward noising map."""
    return np.sqrt(alpha_bar_k) * a0 + np.sqrt(1.0 - alpha_bar_k) * eps


def forward_diffuse(a0, k, eps, schedule):
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if not 1 <= k <= schedule.K:
        raise PolicyError(f"forward_diffuse: k={k} outside [1, {schedule.K}]")
    if a0.shape != eps.shape:
        raise PolicyError(f"forward_diffuse: a0 {a0.shape} vs eps {eps.shape}")
    return diffuse_affine(a0, eps, schedule.alpha_bar[k])


# ---------------------------------------------------------------------------
# conditioning


@dataclass(frozen=True)
class ActionChunk:
    """Fixed-horizon joint-target sequence, shape (T_a, dof)."""

    actions: np.ndarray

    def __post_init__(self):
        arr = np.array(self.actions, dtype=np.float64)
        if arr.ndim != 2:
            raise PolicyError(f"ActionChunk: expected (T_a, dof), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise PolicyError("ActionChunk: non-finite actions")
        object.__setattr__(self, "actions", arr)

    @property
    def horizon(self):
        return self.actions.shape[0]

    @property
    def dof(self):
        return self.actions.shape[1]


@dataclass(frozen=True)
class ConditionVector:
    """Low-dimensional scene conditioning: current joints, target point and
    the obstacle as center + yaw + half extents."""

    start_joints: np.ndarray
    target: np.ndarray
    obstacle: ObbObstacle

    def encode(self):
        return np.concatenate([
            np.asarray(self.start_joints, dtype=np.float64),
            np.asarray(self.target, dtype=np.float64),
            self.obstacle.center,
            [self.obstacle.yaw],
            self.obstacle.half_extents,
        ])


def cond_dim(chain):
    return chain.dof + 10


def step_embedding(k, dim=16):
    """Sinusoidal embedding of the diffusion step; k scalar or (n,)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.multiply.outer(np.asarray(k, dtype=np.float64), freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# ---------------------------------------------------------------------------
# network


class PolicyNetwork:
    """Fully connected denoiser over [flat chunk; condition; step embedding].

    Bias folded into each weight matrix as its final row (inputs get an
    appended ones column). Hidden layers tanh; final layer zero-initialized
    so a fresh network predicts the zero chunk. Inputs are rescaled by fixed
    per-feature constants so radian-scale joints and centimeter-scale box
    extents start out equally visible.
    """

    def __init__(self, t_a, dof, cond_width, hidden=(256, 256, 256), embed_dim=16, seed=0):
        self.t_a = int(t_a)
        self.dof = int(dof)
        self.cond_width = int(cond_width)
        self.embed_dim = int(embed_dim)
        chunk_dim = self.t_a * self.dof
        self.layer_sizes = [chunk_dim + cond_width + embed_dim, *hidden, chunk_dim]
        self.input_scale = self._build_input_scale(chunk_dim)
        rng = np.random.default_rng(seed)
        self.weights = []
        last = len(self.layer_sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes, self.layer_sizes[1:])):
            if i == last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
            aug = np.vstack([w, np.zeros((1, fan_out))])
            self.weights.append(ad.Tensor(aug, requires_grad=True))

    def _build_input_scale(self, chunk_dim):
        scale = np.ones(self.layer_sizes[0])
        scale[:chunk_dim] = 1.0 / 3.0  # noisy joint targets, radians
        cond = np.ones(self.cond_width)
        cond[: self.dof] = 1.0 / 3.0        # current joints
        cond[self.dof: self.dof + 6] = 1.0   # target and box center, meters
        cond[self.dof + 6] = 1.0 / np.pi     # yaw
        cond[self.dof + 7:] = 10.0           # half extents, ~0.05 m scale
        scale[chunk_dim: chunk_dim + self.cond_width] = cond
        return scale

    def params(self):
        return list(self.weights)

    def forward(self, x):
        """x: (B, input_dim) Tensor -> (B, chunk_dim) Tensor."""
        if x.data.shape[1] != self.layer_sizes[0]:
            raise PolicyError(
                f"forward: input width {x.data.shape[1]} != {self.layer_sizes[0]}")
        h = x
        n_layers = len(self.weights)
        for i, w in enumerate(self.weights):
            ones = ad.Tensor(np.ones((h.data.shape[0], 1)))
            h = ad.matmul(ad.concat([h, ones], axis=1), w)
            if i < n_layers - 1:
                h = ad.tanh(h)
        return h

    def input_for(self, a_k_flat, cond_rows, ks):
        """Assemble the (rescaled) network input matrix from numpy parts."""
        emb = step_embedding(ks, self.embed_dim)
        if emb.ndim == 1:
            emb = emb.reshape(1, -1)
        return np.concatenate([a_k_flat, cond_rows, emb], axis=1) * self.input_scale


def denoise_predict(net, a_k, cond, k):
    """Single-chunk prediction of the clean chunk; plain arrays in and out."""
    a_k = a_k.actions if isinstance(a_k, ActionChunk) else np.asarray(a_k, dtype=np.float64)
    if a_k.shape != (net.t_a, net.dof):
        raise PolicyError(f"denoise_predict: chunk shape {a_k.shape} != ({net.t_a}, {net.dof})")
    cond_row = cond.encode() if isinstance(cond, ConditionVector) else np.asarray(cond)
    x = net.input_for(a_k.reshape(1, -1), cond_row.reshape(1, -1), np.array([k]))
    with ad.no_grad():
        out = net.forward(ad.Tensor(x))
    return out.data.reshape(net.t_a, net.dof)


# ---------------------------------------------------------------------------
# losses


def mse_loss(a0, pred):
    """Mean over all chunk entries of the squared difference."""
    if isinstance(a0, ad.Tensor) or isinstance(pred, ad.Tensor):
        return ad.tmean(ad.square(ad.sub(pred, a0)))
    a0 = a0.actions if isinstance(a0, ActionChunk) else np.asarray(a0, dtype=np.float64)
    pred = pred.actions if isinstance(pred, ActionChunk) else np.asarray(pred, dtype=np.float64)
    if a0.shape != pred.shape:
        raise PolicyError(f"mse_loss: shapes {a0.shape} vs {pred.shape}")
    return float(np.mean((a0 - pred) ** 2))


def _hinge_average(clearances, delta):
    """Squared hinge averaged over active violations only; exact 0 if none."""
    d = np.asarray(clearances, dtype=np.float64)
    active = d < delta
    if not np.any(active):
        return 0.0
    terms = (delta - d[active]) ** 2
    return float(terms.sum() / active.sum())


def geo_loss(chunk, chain, box, delta):
    """Clearance hinge loss of one action chunk against one obstacle.

    Accepts a plain array/ActionChunk (returns float) or a (T_a, dof) Tensor
    (returns a scalar Tensor differentiable through FK and the SDF; a float
    0.0 when no step/link violates, matching the exact-zero branch).
    """
    if delta <= 0.0:
        raise PolicyError(f"geo_loss: delta must be > 0, got {delta}")
    if isinstance(chunk, ad.Tensor):
        t_a = chunk.data.shape[0]
        flat = ad.reshape(chunk, (1, chunk.data.size))
        loss, value, _ = geo_loss_batched(flat, t_a, chain, [box], delta)
        return loss if isinstance(loss, ad.Tensor) else value
    arr = chunk.actions if isinstance(chunk, ActionChunk) else np.asarray(chunk, dtype=np.float64)
    return _hinge_average(kin.clearances(chain, arr, box), delta)


def geo_loss_batched(flat_chunks, t_a, chain, boxes, delta):
    """Batch-mean clearance loss for flat chunks (B, T_a*dof) on the tape.

    Returns (loss, value, n_violations) where ``loss`` is a Tensor when any
    violation is active and the float 0.0 otherwise; per-sample losses follow
    the active-violation average, then the batch is averaged.
    """
    b = flat_chunks.data.shape[0]
    dof = chain.dof
    configs_np = flat_chunks.data.reshape(b * t_a, dof)
    clear = np.empty((b, t_a, len(chain.representative_set)))
    for i, box in enumerate(boxes):
        clear[i] = kin.clearances(chain, configs_np[i * t_a:(i + 1) * t_a], box)
    counts = (clear < delta).reshape(b, -1).sum(axis=1)
    total_violations = int(counts.sum())
    if total_violations == 0:
        return 0.0, 0.0, 0
    weights = np.zeros(b)
    nz = counts > 0
    weights[nz] = 1.0 / (counts[nz] * b)
    row_w = np.repeat(weights, t_a)

    configs = ad.reshape(flat_chunks, (b * t_a, dof))
    triples = kin.fk_points_graph(chain, configs)
    centers = np.repeat(np.stack([bx.center for bx in boxes]), t_a, axis=0)
    rots = np.repeat(np.stack([bx.rotation for bx in boxes]), t_a, axis=0)
    halves = np.repeat(np.stack([bx.half_extents for bx in boxes]), t_a, axis=0)
    delta_const = ad.Tensor(np.full(b * t_a, delta))
    w_const = ad.Tensor(row_w)
    loss = None
    for (px, py, pz), name in zip(triples, chain.representative_set):
        sdf = obb_sdf_graph(px, py, pz, centers, rots, halves)
        d = ad.sub(sdf, ad.Tensor(np.full(b * t_a, chain.radii[name])))
        hinge = ad.square(ad.relu(ad.sub(delta_const, d)))
        contrib = ad.tsum(ad.mul(hinge, w_const))
        loss = contrib if loss is None else ad.add(loss, contrib)
    return loss, float(loss.data), total_violations


# ---------------------------------------------------------------------------
# optimizer and training


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_update(opt, params):
    if not opt.m:
        opt.m = [np.zeros_like(p.data) for p in params]
        opt.v = [np.zeros_like(p.data) for p in params]
    opt.step += 1
    b1c = 1.0 - opt.beta1 ** opt.step
    b2c = 1.0 - opt.beta2 ** opt.step
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * (g * g)
        mhat = opt.m[i] / b1c
        vhat = opt.v[i] / b2c
        p.data = p.data - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
        p.grad = None


@dataclass
class TrainState:
    rng: np.random.Generator
    opt: AdamState

    @classmethod
    def new(cls, seed, lr=1e-4):
        return cls(np.random.default_rng(seed), AdamState(lr=lr))


def _sample_windows(rng, episodes, t_a):
    """One training window per episode draw: condition on the pre-window
    joints, target the next T_a joint commands (end-padded at the goal).

    Window starts run past the trajectory end so hold-at-goal chunks are
    well represented; rollouts outlast the demonstrations, so the policy
    must learn to stay put once it has arrived."""
    starts = np.array([rng.integers(1, len(ep.trajectory) + t_a) for ep in episodes])
    a0 = np.empty((len(episodes), t_a, episodes[0].trajectory.shape[1]))
    conds = []
    for i, (ep, s) in enumerate(zip(episodes, starts)):
        traj = ep.trajectory
        idx = np.minimum(np.arange(s, s + t_a), len(traj) - 1)
        a0[i] = traj[idx]
        cond_q = traj[min(s - 1, len(traj) - 1)]
        conds.append(ConditionVector(cond_q, ep.scene.target, ep.scene.obstacle).encode())
    return a0, np.stack(conds)


def train_step(net, batch, schedule, chain, lam, delta, state):
    """One combined-objective update; returns the three loss scalars.

    Random draws happen in a fixed order (windows, steps, noise) before any
    loss computation, so runs with lam = 0 stay on the same random stream as
    feasibility-supervised runs.
    """
    if lam < 0.0:
        raise PolicyError(f"train_step: lambda must be >= 0, got {lam}")
    if not batch:
        raise PolicyError("train_step: empty batch")
    rng = state.rng
    b = len(batch)
    a0, conds = _sample_windows(rng, batch, net.t_a)
    ks = rng.integers(1, schedule.K + 1, size=b)
    eps = rng.standard_normal((b, net.t_a * net.dof))
    a0_flat = a0.reshape(b, -1)
    coeff_a = np.sqrt(schedule.alpha_bar[ks])[:, None]
    coeff_e = np.sqrt(1.0 - schedule.alpha_bar[ks])[:, None]
    a_k = coeff_a * a0_flat + coeff_e * eps

    x = net.input_for(a_k, conds, ks)
    pred = net.forward(ad.Tensor(x))
    mse = ad.tmean(ad.square(ad.sub(pred, ad.Tensor(a0_flat))))
    boxes = [ep.scene.obstacle for ep in batch]
    if lam > 0.0:
        geo_t, geo_val, _ = geo_loss_batched(pred, net.t_a, chain, boxes, delta)
        total = mse if not isinstance(geo_t, ad.Tensor) else ad.add(mse, ad.smul(geo_t, lam))
    else:
        geo_val = _geo_value_np(pred.data, net.t_a, chain, boxes, delta)
        total = mse
    ad.backward(total)
    adam_update(state.opt, net.params())
    mse_val = float(mse.data)
    return {"mse": mse_val, "geo": geo_val, "total": mse_val + lam * geo_val}


def _geo_value_np(pred_flat, t_a, chain, boxes, delta):
    """Logging-only clearance loss (kernel path, no tape)."""
    b = pred_flat.shape[0]
    configs = pred_flat.reshape(b * t_a, chain.dof)
    vals = []
    for i, box in enumerate(boxes):
        vals.append(_hinge_average(kin.clearances(chain, configs[i * t_a:(i + 1) * t_a], box), delta))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# sampling


def sample_chunk(net, cond, schedule, rng):
    """Iterative denoising from a standard-normal chunk; returns (T_a, dof)."""
    cond_row = cond.encode() if isinstance(cond, ConditionVector) else np.asarray(cond)
    a = rng.standard_normal((1, net.t_a * net.dof))
    with ad.no_grad():
        for k in range(schedule.K, 0, -1):
            x = net.input_for(a, cond_row.reshape(1, -1), np.array([k]))
            pred = net.forward(ad.Tensor(x)).data
            if k > 1:
                noise = rng.standard_normal(a.shape)
                a = diffuse_affine(pred, noise, schedule.alpha_bar[k - 1])
            else:
                a = pred
    return a.reshape(net.t_a, net.dof)


# ---------------------------------------------------------------------------
# checkpoints


_CKPT_FORMAT = "safereach-checkpoint"
_CKPT_VERSION = 1


def save_checkpoint(path, net, schedule, chain, train_config=None):
    payload = {
        "format": _CKPT_FORMAT,
        "version": _CKPT_VERSION,
        "t_a": net.t_a,
        "dof": net.dof,
        "cond_width": net.cond_width,
        "embed_dim": net.embed_dim,
        "layer_sizes": net.layer_sizes,
        "schedule": {
            "k": schedule.K,
            "beta_start": float(schedule.beta[0]),
            "beta_end": float(schedule.beta[-1]),
        },
        "chain_hash": chain.chain_hash,
        "train_config": train_config or {},
        "weights": [
            {
                "shape": list(w.data.shape),
                "dtype": "<f8",
                "data": base64.b64encode(np.ascontiguousarray(w.data).tobytes()).decode(),
            }
            for w in net.weights
        ],
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    with open(path, "w") as fh:
        fh.write(blob)


def load_checkpoint(path, chain):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != _CKPT_FORMAT or payload.get("version") != _CKPT_VERSION:
        raise CheckpointError(f"{path}: not a version-{_CKPT_VERSION} checkpoint")
    if payload["chain_hash"] != chain.chain_hash:
        raise CheckpointError(
            f"{path}: checkpoint chain hash {payload['chain_hash']} != {chain.chain_hash}")
    hidden = tuple(payload["layer_sizes"][1:-1])
    net = PolicyNetwork(payload["t_a"], payload["dof"], payload["cond_width"],
                        hidden=hidden, embed_dim=payload["embed_dim"])
    for w, spec in zip(net.weights, payload["weights"]):
        arr = np.frombuffer(base64.b64decode(spec["data"]), dtype=spec["dtype"])
        w.data = arr.reshape(spec["shape"]).copy()
    schedule = schedule_init(payload["schedule"]["k"], payload["schedule"]["beta_start"],
                             payload["schedule"]["beta_end"])
    return net, schedule, payload["train_config"]


def file_hash(path):
    """Git-style blob hash of a file's bytes (short form)."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()[:12]
