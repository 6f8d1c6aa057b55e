# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels: batched OBB signed distance, batched forward
kinematics of representative points, and trajectory clearance.

Must stay numerically identical to ``_kernels_py.py``: same expressions,
same evaluation order, and joint-angle trig precomputed through the same
numpy ufuncs.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()

BACKEND = "compiled"


cdef inline double _sdf_one(double px, double py, double pz,
                            const double[:, ::1] rot,
                            const double[::1] center,
                            const double[::1] half) noexcept nogil:
    cdef double dx = px - center[0]
    cdef double dy = py - center[1]
    cdef double dz = pz - center[2]
    cdef double qx = rot[0, 0] * dx + rot[1, 0] * dy + rot[2, 0] * dz
    cdef double qy = rot[0, 1] * dx + rot[1, 1] * dy + rot[2, 1] * dz
    cdef double qz = rot[0, 2] * dx + rot[1, 2] * dy + rot[2, 2] * dz
    cdef double ax = fabs(qx) - half[0]
    cdef double ay = fabs(qy) - half[1]
    cdef double az = fabs(qz) - half[2]
    cdef double rx = ax if ax > 0.0 else 0.0
    cdef double ry = ay if ay > 0.0 else 0.0
    cdef double rz = az if az > 0.0 else 0.0
    cdef double ext = sqrt(rx * rx + ry * ry + rz * rz)
    cdef double mx = ax if ax >= ay else ay
    if az > mx:
        mx = az
    cdef double inter = mx if mx < 0.0 else 0.0
    return ext + inter


def obb_sdf_batch(points, center, rot, half):
    """Signed distance of row points (n,3) to an oriented box."""
    cdef cnp.ndarray[double, ndim=2] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] c = np.ascontiguousarray(center, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] r = np.ascontiguousarray(rot, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] h = np.ascontiguousarray(half, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef const double[:, ::1] pv = pts
    cdef const double[:, ::1] rv = r
    cdef const double[::1] cv = c
    cdef const double[::1] hv = h
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            ov[i] = _sdf_one(pv[i, 0], pv[i, 1], pv[i, 2], rv, cv, hv)
    return out


cdef inline void _fk_origins(const double[::1] cq, const double[::1] sq,
                             const double[:, ::1] offsets,
                             const double[:, ::1] axes,
                             const unsigned char[::1] is_joint,
                             double[:, ::1] origins) noexcept nogil:
    cdef double R[3][3]
    cdef double Rn[3][3]
    cdef double A[3][3]
    cdef double p[3]
    cdef Py_ssize_t seg, i, nn, j
    cdef double ox, oy, oz, ax, ay, az, c, s, omc
    cdef Py_ssize_t m = offsets.shape[0]
    R[0][0] = 1.0; R[0][1] = 0.0; R[0][2] = 0.0
    R[1][0] = 0.0; R[1][1] = 1.0; R[1][2] = 0.0
    R[2][0] = 0.0; R[2][1] = 0.0; R[2][2] = 1.0
    p[0] = 0.0; p[1] = 0.0; p[2] = 0.0
    j = 0
    for seg in range(m):
        ox = offsets[seg, 0]; oy = offsets[seg, 1]; oz = offsets[seg, 2]
        p[0] = p[0] + (R[0][0] * ox + R[0][1] * oy + R[0][2] * oz)
        p[1] = p[1] + (R[1][0] * ox + R[1][1] * oy + R[1][2] * oz)
        p[2] = p[2] + (R[2][0] * ox + R[2][1] * oy + R[2][2] * oz)
        if is_joint[seg]:
            c = cq[j]
            s = sq[j]
            j += 1
            ax = axes[seg, 0]; ay = axes[seg, 1]; az = axes[seg, 2]
            omc = 1.0 - c
            A[0][0] = c + omc * ax * ax
            A[0][1] = -s * az + omc * ax * ay
            A[0][2] = s * ay + omc * ax * az
            A[1][0] = s * az + omc * ay * ax
            A[1][1] = c + omc * ay * ay
            A[1][2] = -s * ax + omc * ay * az
            A[2][0] = -s * ay + omc * az * ax
            A[2][1] = s * ax + omc * az * ay
            A[2][2] = c + omc * az * az
            for i in range(3):
                for nn in range(3):
                    Rn[i][nn] = R[i][0] * A[0][nn] + R[i][1] * A[1][nn] + R[i][2] * A[2][nn]
            for i in range(3):
                for nn in range(3):
                    R[i][nn] = Rn[i][nn]
        origins[seg, 0] = p[0]
        origins[seg, 1] = p[1]
        origins[seg, 2] = p[2]


def fk_points_batch(qs, offsets, axes, is_joint, rep_idx):
    """Frame origins of the representative segments for a batch of configs."""
    cdef cnp.ndarray[double, ndim=2] q = np.ascontiguousarray(qs, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] off = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] axs = np.ascontiguousarray(axes, dtype=np.float64)
    cdef cnp.ndarray[unsigned char, ndim=1] jnt = np.ascontiguousarray(is_joint, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] rep = np.ascontiguousarray(rep_idx, dtype=np.int64)
    cdef cnp.ndarray[double, ndim=2] cq = np.cos(q)
    cdef cnp.ndarray[double, ndim=2] sq = np.sin(q)
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t m = off.shape[0]
    cdef Py_ssize_t k = rep.shape[0]
    cdef cnp.ndarray[double, ndim=3] out = np.empty((n, k, 3), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] origins = np.empty((m, 3), dtype=np.float64)
    cdef const double[:, ::1] cqv = cq
    cdef const double[:, ::1] sqv = sq
    cdef const double[:, ::1] offv = off
    cdef const double[:, ::1] axv = axs
    cdef const unsigned char[::1] jv = jnt
    cdef const cnp.int64_t[::1] repv = rep
    cdef double[:, :, ::1] outv = out
    cdef double[:, ::1] occ = origins
    cdef Py_ssize_t i, slot
    with nogil:
        for i in range(n):
            _fk_origins(cqv[i], sqv[i], offv, axv, jv, occ)
            for slot in range(k):
                outv[i, slot, 0] = occ[repv[slot], 0]
                outv[i, slot, 1] = occ[repv[slot], 1]
                outv[i, slot, 2] = occ[repv[slot], 2]
    return out


def clearance_batch(qs, offsets, axes, is_joint, rep_idx, radii, center, rot, half):
    """Per-config, per-representative-point surface clearance, shape (n, k)."""
    cdef cnp.ndarray[double, ndim=2] q = np.ascontiguousarray(qs, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] off = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] axs = np.ascontiguousarray(axes, dtype=np.float64)
    cdef cnp.ndarray[unsigned char, ndim=1] jnt = np.ascontiguousarray(is_joint, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] rep = np.ascontiguousarray(rep_idx, dtype=np.int64)
    cdef cnp.ndarray[double, ndim=1] rad = np.ascontiguousarray(radii, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] c = np.ascontiguousarray(center, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] r = np.ascontiguousarray(rot, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] h = np.ascontiguousarray(half, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] cq = np.cos(q)
    cdef cnp.ndarray[double, ndim=2] sq = np.sin(q)
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t m = off.shape[0]
    cdef Py_ssize_t k = rep.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, k), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] origins = np.empty((m, 3), dtype=np.float64)
    cdef const double[:, ::1] cqv = cq
    cdef const double[:, ::1] sqv = sq
    cdef const double[:, ::1] offv = off
    cdef const double[:, ::1] axv = axs
    cdef const unsigned char[::1] jv = jnt
    cdef const cnp.int64_t[::1] repv = rep
    cdef const double[::1] radv = rad
    cdef const double[:, ::1] rv = r
    cdef const double[::1] cv = c
    cdef const double[::1] hv = h
    cdef double[:, ::1] outv = out
    cdef double[:, ::1] occ = origins
    cdef Py_ssize_t i, slot, seg
    with nogil:
        for i in range(n):
            _fk_origins(cqv[i], sqv[i], offv, axv, jv, occ)
            for slot in range(k):
                seg = repv[slot]
                outv[i, slot] = _sdf_one(occ[seg, 0], occ[seg, 1], occ[seg, 2],
                                         rv, cv, hv) - radv[slot]
    return out


def min_clearance(qs, offsets, axes, is_joint, rep_idx, radii, center, rot, half):
    cdef cnp.ndarray[double, ndim=2] cl = clearance_batch(
        qs, offsets, axes, is_joint, rep_idx, radii, center, rot, half)
    return float(cl.min())
