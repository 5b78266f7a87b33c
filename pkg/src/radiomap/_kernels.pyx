# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled voxel-traversal kernels.

Mirrors :mod:`radiomap._kernels_py` exactly; see that module for the
argument conventions. Grid coordinates are ``(p - origin) / resolution``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, INFINITY

cnp.import_array()

ctypedef unsigned long long u64

cdef u64 SIG_MUL = 1000003ULL


cdef inline int _walk(const unsigned char[:, :, ::1] occ, int nx, int ny, int nz,
                      double gx, double gy, double gz,
                      double dx, double dy, double dz, double t_max,
                      double* t_out, int* vox, int* axis_out, int* step_out) noexcept nogil:
    """Traverse from a grid point. Returns 1 on hit, 0 on exit/limit.

    ``t_out`` receives the hit distance, or the distance at which the ray
    left the grid or reached ``t_max``.
    """
    cdef int ix = <int>floor(gx)
    cdef int iy = <int>floor(gy)
    cdef int iz = <int>floor(gz)
    cdef int sx, sy, sz
    cdef double tmx, tmy, tmz, tdx, tdy, tdz, t
    cdef int axis
    if ix >= nx:
        ix = nx - 1
    if iy >= ny:
        iy = ny - 1
    if iz >= nz:
        iz = nz - 1
    if ix < 0:
        ix = 0
    if iy < 0:
        iy = 0
    if iz < 0:
        iz = 0
    if occ[ix, iy, iz]:
        t_out[0] = 0.0
        vox[0] = ix
        vox[1] = iy
        vox[2] = iz
        axis_out[0] = -1
        step_out[0] = 0
        return 1
    if dx > 0:
        sx = 1
        tmx = (ix + 1 - gx) / dx
        tdx = 1.0 / dx
    elif dx < 0:
        sx = -1
        tmx = (ix - gx) / dx
        tdx = -1.0 / dx
    else:
        sx = 0
        tmx = INFINITY
        tdx = INFINITY
    if dy > 0:
        sy = 1
        tmy = (iy + 1 - gy) / dy
        tdy = 1.0 / dy
    elif dy < 0:
        sy = -1
        tmy = (iy - gy) / dy
        tdy = -1.0 / dy
    else:
        sy = 0
        tmy = INFINITY
        tdy = INFINITY
    if dz > 0:
        sz = 1
        tmz = (iz + 1 - gz) / dz
        tdz = 1.0 / dz
    elif dz < 0:
        sz = -1
        tmz = (iz - gz) / dz
        tdz = -1.0 / dz
    else:
        sz = 0
        tmz = INFINITY
        tdz = INFINITY
    while True:
        if tmx <= tmy and tmx <= tmz:
            axis = 0
            t = tmx
        elif tmy <= tmz:
            axis = 1
            t = tmy
        else:
            axis = 2
            t = tmz
        if t > t_max:
            t_out[0] = t_max
            return 0
        if axis == 0:
            ix += sx
            tmx += tdx
            if ix < 0 or ix >= nx:
                t_out[0] = t
                return 0
        elif axis == 1:
            iy += sy
            tmy += tdy
            if iy < 0 or iy >= ny:
                t_out[0] = t
                return 0
        else:
            iz += sz
            tmz += tdz
            if iz < 0 or iz >= nz:
                t_out[0] = t
                return 0
        if occ[ix, iy, iz]:
            t_out[0] = t
            vox[0] = ix
            vox[1] = iy
            vox[2] = iz
            axis_out[0] = axis
            step_out[0] = sx if axis == 0 else (sy if axis == 1 else sz)
            return 1


def raycast_batch(const unsigned char[:, :, ::1] occ, double[:, ::1] starts,
                  double[:, ::1] dirs, double[::1] t_max):
    cdef Py_ssize_t n = starts.shape[0], i
    cdef int nx = occ.shape[0], ny = occ.shape[1], nz = occ.shape[2]
    t_arr = np.empty(n, dtype=np.float64)
    vox_arr = np.full((n, 3), -1, dtype=np.int64)
    axis_arr = np.full(n, -1, dtype=np.int64)
    hit_arr = np.zeros(n, dtype=np.bool_)
    cdef double[::1] t_v = t_arr
    cdef long long[:, ::1] vox_v = vox_arr
    cdef long long[::1] axis_v = axis_arr
    cdef cnp.npy_bool[::1] hit_v = hit_arr
    cdef double t
    cdef int vox[3]
    cdef int axis, step, hit
    with nogil:
        for i in range(n):
            hit = _walk(occ, nx, ny, nz, starts[i, 0], starts[i, 1], starts[i, 2],
                        dirs[i, 0], dirs[i, 1], dirs[i, 2], t_max[i],
                        &t, vox, &axis, &step)
            t_v[i] = t
            if hit:
                hit_v[i] = 1
                vox_v[i, 0] = vox[0]
                vox_v[i, 1] = vox[1]
                vox_v[i, 2] = vox[2]
                axis_v[i] = axis
    return hit_arr, t_arr, vox_arr, axis_arr


def segments_blocked(const unsigned char[:, :, ::1] occ, double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], i
    cdef int nx = occ.shape[0], ny = occ.shape[1], nz = occ.shape[2]
    out = np.zeros(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] out_v = out
    cdef double dx, dy, dz, length, t
    cdef int vox[3]
    cdef int axis, step
    with nogil:
        for i in range(n):
            dx = b[i, 0] - a[i, 0]
            dy = b[i, 1] - a[i, 1]
            dz = b[i, 2] - a[i, 2]
            length = (dx * dx + dy * dy + dz * dz) ** 0.5
            if length == 0.0:
                continue
            dx /= length
            dy /= length
            dz /= length
            # the far endpoint itself is excluded (open segment)
            if _walk(occ, nx, ny, nz, a[i, 0], a[i, 1], a[i, 2], dx, dy, dz,
                     length * (1.0 - 1e-9), &t, vox, &axis, &step):
                out_v[i] = 1
    return out


def trace_specular(const unsigned char[:, :, ::1] occ, double[::1] src,
                   double[:, ::1] dirs, int max_bounces, double max_len):
    cdef Py_ssize_t n = dirs.shape[0], i
    cdef int nb = max_bounces + 1, b
    cdef int nx = occ.shape[0], ny = occ.shape[1], nz = occ.shape[2]
    starts = np.zeros((n, nb, 3), dtype=np.float64)
    sdirs = np.zeros((n, nb, 3), dtype=np.float64)
    lengths = np.zeros((n, nb), dtype=np.float64)
    cum = np.zeros((n, nb), dtype=np.float64)
    sigs = np.zeros((n, nb), dtype=np.uint64)
    valid = np.zeros((n, nb), dtype=np.bool_)
    cdef double[:, :, ::1] st_v = starts
    cdef double[:, :, ::1] sd_v = sdirs
    cdef double[:, ::1] len_v = lengths
    cdef double[:, ::1] cum_v = cum
    cdef u64[:, ::1] sig_v = sigs
    cdef cnp.npy_bool[:, ::1] val_v = valid
    cdef double p[3]
    cdef double d[3]
    cdef double t, total, boundary
    cdef int vox[3]
    cdef int axis, step, hit
    cdef u64 sig, face
    with nogil:
        for i in range(n):
            p[0] = src[0]
            p[1] = src[1]
            p[2] = src[2]
            d[0] = dirs[i, 0]
            d[1] = dirs[i, 1]
            d[2] = dirs[i, 2]
            total = 0.0
            sig = 0
            for b in range(nb):
                hit = _walk(occ, nx, ny, nz, p[0], p[1], p[2], d[0], d[1], d[2],
                            max_len - total, &t, vox, &axis, &step)
                if hit and axis < 0:
                    break
                st_v[i, b, 0] = p[0]
                st_v[i, b, 1] = p[1]
                st_v[i, b, 2] = p[2]
                sd_v[i, b, 0] = d[0]
                sd_v[i, b, 1] = d[1]
                sd_v[i, b, 2] = d[2]
                len_v[i, b] = t
                cum_v[i, b] = total
                sig_v[i, b] = sig
                val_v[i, b] = 1
                if not hit:
                    break
                total += t
                p[0] += t * d[0]
                p[1] += t * d[1]
                p[2] += t * d[2]
                if step > 0:
                    boundary = vox[axis]
                    p[axis] = boundary - 1e-7
                else:
                    boundary = vox[axis] + 1
                    p[axis] = boundary + 1e-7
                d[axis] = -d[axis]
                face = <u64>(axis * 4194304 + (<int>boundary) * 2 + (1 if step > 0 else 0)) + 1
                sig = sig * SIG_MUL + face
    return starts, sdirs, lengths, cum, sigs, valid
