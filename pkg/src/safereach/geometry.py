"""Oriented-bounding-box obstacles and their analytic signed distance field.

The SDF uses the exact max/clamp formula: with box-frame coordinates
``q = R^T (p - c)`` and ``a = |q| - h``,

    sdf = ||max(a, 0)||_2 + min(max_i a_i, 0)

Negative inside, zero on the surface, positive outside. Subgradient
conventions match the autodiff module (0 at kinks, lowest axis index wins
ties), so the tape composition, the closed-form gradient, and the compiled
kernels all agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels

_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ObbObstacle:
    """Oriented box: world-from-box rotation, center and half extents in meters."""

    center: np.ndarray
    rotation: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.array(self.center, dtype=np.float64))
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=np.float64))
        object.__setattr__(self, "half_extents", np.array(self.half_extents, dtype=np.float64))
        if self.center.shape != (3,) or self.half_extents.shape != (3,):
            raise GeometryError("ObbObstacle: center and half_extents must be 3-vectors")
        if self.rotation.shape != (3, 3):
            raise GeometryError("ObbObstacle: rotation must be 3x3")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise GeometryError(f"ObbObstacle: rotation not orthonormal (|R^T R - I| = {err:.2e})")
        if np.linalg.det(self.rotation) < 0.0:
            raise GeometryError("ObbObstacle: rotation must be proper (det +1)")
        if np.any(self.half_extents <= 0.0):
            raise GeometryError("ObbObstacle: half_extents must be strictly positive")

    @classmethod
    def from_yaw(cls, center, yaw, half_extents):
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(center, rot, half_extents)

    @property
    def yaw(self):
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def transformed(self, rot, translation):
        """The box under a rigid world transform (R, t)."""
        rot = np.asarray(rot, dtype=np.float64)
        return ObbObstacle(rot @ self.center + np.asarray(translation, dtype=np.float64),
                           rot @ self.rotation, self.half_extents)

    def to_dict(self):
        return {
            "center": [float(v) for v in self.center],
            "yaw": self.yaw,
            "half_extents": [float(v) for v in self.half_extents],
        }

    @classmethod
    def from_dict(cls, d):
        return cls.from_yaw(np.asarray(d["center"], dtype=np.float64), float(d["yaw"]),
                            np.asarray(d["half_extents"], dtype=np.float64))


@dataclass(frozen=True)
class ClearanceSample:
    """One (link, horizon step) clearance measurement, signed, in meters."""

    link_id: str
    step: int
    distance: float


def obb_sdf(point, box: ObbObstacle):
    """Signed distance from point(s) to the box surface.

    Accepts a single 3-vector (returns float) or an (n, 3) array.
    """
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    vals = kernels.obb_sdf_batch(pts.reshape(-1, 3), box.center, box.rotation, box.half_extents)
    return float(vals[0]) if single else vals


def surface_clearance(point, radius, box: ObbObstacle):
    """sdf minus a body radius: positive clearance, zero contact, negative penetration."""
    if radius < 0.0:
        raise GeometryError(f"surface_clearance: negative radius {radius}")
    res = obb_sdf(point, box)
    return res - radius


def obb_sdf_grad(point, box: ObbObstacle):
    """Closed-form d sdf / d point; matches the tape's subgradient conventions."""
    p = np.asarray(point, dtype=np.float64)
    q = box.rotation.T @ (p - box.center)
    a = np.abs(q) - box.half_extents
    r = np.maximum(a, 0.0)
    norm = np.sqrt(np.sum(r * r))
    d_ext = (r / norm) * (a > 0.0) if norm > 0.0 else np.zeros(3)
    mx_idx = int(np.argmax(a))  # lowest index wins ties
    d_int = np.zeros(3)
    if a[mx_idx] < 0.0:
        d_int[mx_idx] = 1.0
    dq = (d_ext + d_int) * np.sign(q)
    return box.rotation @ dq


def obb_sdf_graph(px, py, pz, center, rot, half):
    """Tape-differentiable SDF for coordinate tensors px/py/pz of shape (n,).

    ``center``/``rot``/``half`` are constants, either one box ((3,), (3,3),
    (3,)) or per-row boxes ((n,3), (n,3,3), (n,3)). Forward values are
    bit-identical to the kernels.
    """
    n = px.data.shape[0]
    center = np.broadcast_to(np.asarray(center, dtype=np.float64).reshape(-1, 3), (n, 3))
    rot = np.broadcast_to(np.asarray(rot, dtype=np.float64).reshape(-1, 3, 3), (n, 3, 3))
    half = np.broadcast_to(np.asarray(half, dtype=np.float64).reshape(-1, 3), (n, 3))

    def const(arr):
        return ad.Tensor(np.ascontiguousarray(arr))

    dx = ad.sub(px, const(center[:, 0]))
    dy = ad.sub(py, const(center[:, 1]))
    dz = ad.sub(pz, const(center[:, 2]))
    axes = []
    for i in range(3):
        qi = ad.add(ad.add(ad.mul(dx, const(rot[:, 0, i])), ad.mul(dy, const(rot[:, 1, i]))),
                    ad.mul(dz, const(rot[:, 2, i])))
        axes.append(ad.sub(ad.tabs(qi), const(half[:, i])))
    rx, ry, rz = (ad.relu(a) for a in axes)
    ext = ad.sqrt(ad.add(ad.add(ad.square(rx), ad.square(ry)), ad.square(rz)))
    stacked = ad.concat([ad.reshape(a, (n, 1)) for a in axes], axis=1)
    mx = ad.max_over_axis(stacked, 1)
    inter = ad.smul(ad.relu(ad.smul(mx, -1.0)), -1.0)  # min(mx, 0)
    return ad.add(ext, inter)
