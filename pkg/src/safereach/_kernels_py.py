"""Pure numpy geometry kernels (fallback when the C extension is absent).

Expression ordering deliberately mirrors ``_kernels_c.pyx`` so both backends
produce identical floats on identical inputs; both precompute joint-angle
trig with the same numpy call for the same reason.
"""

import numpy as np

BACKEND = "numpy"


def obb_sdf_batch(points, center, rot, half):
    """Signed distance of row points (n,3) to an oriented box."""
    points = np.asarray(points, dtype=np.float64)
    dx = points[:, 0] - center[0]
    dy = points[:, 1] - center[1]
    dz = points[:, 2] - center[2]
    qx = rot[0, 0] * dx + rot[1, 0] * dy + rot[2, 0] * dz
    qy = rot[0, 1] * dx + rot[1, 1] * dy + rot[2, 1] * dz
    qz = rot[0, 2] * dx + rot[1, 2] * dy + rot[2, 2] * dz
    ax = np.abs(qx) - half[0]
    ay = np.abs(qy) - half[1]
    az = np.abs(qz) - half[2]
    rx = np.maximum(ax, 0.0)
    ry = np.maximum(ay, 0.0)
    rz = np.maximum(az, 0.0)
    ext = np.sqrt(rx * rx + ry * ry + rz * rz)
    mx = np.maximum(np.maximum(ax, ay), az)
    return ext + np.minimum(mx, 0.0)


def _advance(R, p, offset, axis, c, s):
    # translate by offset in the current frame, then rotate about axis
    px = p[0] + (R[0][0] * offset[0] + R[0][1] * offset[1] + R[0][2] * offset[2])
    py = p[1] + (R[1][0] * offset[0] + R[1][1] * offset[1] + R[1][2] * offset[2])
    pz = p[2] + (R[2][0] * offset[0] + R[2][1] * offset[1] + R[2][2] * offset[2])
    p = [px, py, pz]
    if c is None:
        return R, p
    ax, ay, az = axis
    omc = 1.0 - c
    A = [
        [c + omc * ax * ax, -s * az + omc * ax * ay, s * ay + omc * ax * az],
        [s * az + omc * ay * ax, c + omc * ay * ay, -s * ax + omc * ay * az],
        [-s * ay + omc * az * ax, s * ax + omc * az * ay, c + omc * az * az],
    ]
    Rn = [[None] * 3 for _ in range(3)]
    for i in range(3):
        for n in range(3):
            Rn[i][n] = R[i][0] * A[0][n] + R[i][1] * A[1][n] + R[i][2] * A[2][n]
    return Rn, p


def _fk_all_origins(qs, offsets, axes, is_joint):
    qs = np.asarray(qs, dtype=np.float64)
    n = qs.shape[0]
    cq = np.cos(qs)
    sq = np.sin(qs)
    ones = np.ones(n, dtype=np.float64)
    zeros = np.zeros(n, dtype=np.float64)
    R = [[ones.copy(), zeros.copy(), zeros.copy()],
         [zeros.copy(), ones.copy(), zeros.copy()],
         [zeros.copy(), zeros.copy(), ones.copy()]]
    p = [zeros.copy(), zeros.copy(), zeros.copy()]
    origins = []
    j = 0
    for seg in range(offsets.shape[0]):
        if is_joint[seg]:
            R, p = _advance(R, p, offsets[seg], axes[seg], cq[:, j], sq[:, j])
            j += 1
        else:
            R, p = _advance(R, p, offsets[seg], axes[seg], None, None)
        origins.append(p)
    return origins


def fk_points_batch(qs, offsets, axes, is_joint, rep_idx):
    """Frame origins of the representative segments for a batch of configs.

    qs: (n, dof); offsets/axes: (m, 3); is_joint: (m,) uint8;
    rep_idx: (k,) segment indices in output order. Returns (n, k, 3).
    """
    origins = _fk_all_origins(qs, offsets, axes, is_joint)
    n = np.asarray(qs).shape[0]
    out = np.empty((n, len(rep_idx), 3), dtype=np.float64)
    for slot, seg in enumerate(rep_idx):
        out[:, slot, 0] = origins[seg][0]
        out[:, slot, 1] = origins[seg][1]
        out[:, slot, 2] = origins[seg][2]
    return out


def clearance_batch(qs, offsets, axes, is_joint, rep_idx, radii, center, rot, half):
    """Per-config, per-representative-point surface clearance, shape (n, k)."""
    pts = fk_points_batch(qs, offsets, axes, is_joint, rep_idx)
    n, k = pts.shape[0], pts.shape[1]
    out = np.empty((n, k), dtype=np.float64)
    for slot in range(k):
        out[:, slot] = obb_sdf_batch(pts[:, slot, :], center, rot, half) - radii[slot]
    return out


def min_clearance(qs, offsets, axes, is_joint, rep_idx, radii, center, rot, half):
    return float(
        clearance_batch(qs, offsets, axes, is_joint, rep_idx, radii, center, rot, half).min()
    )
