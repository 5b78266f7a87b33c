"""Pure-NumPy voxel traversal, the fallback for the compiled kernels.

All rays of a batch advance in lockstep, one voxel boundary per iteration,
so the Python loop runs once per voxel step rather than once per ray.
Results match ``_kernels.pyx`` bit for bit: the same comparisons, the same
tie-breaking (x before y before z) and the same accumulation order.

Coordinates are in grid units, ``(p - origin) / resolution``; ``occ`` is a
C-contiguous uint8 array indexed ``[ix, iy, iz]``.
"""

import numpy as np

SIG_MUL = np.uint64(1000003)


def _walk(occ, g, d, t_max):
    """Vectorized traversal. Returns (hit, t, vox, axis, step)."""
    nx, ny, nz = occ.shape
    dims = np.array([nx, ny, nz])
    n = g.shape[0]
    idx = np.floor(g).astype(np.int64)
    np.clip(idx, 0, dims - 1, out=idx)

    hit = np.zeros(n, dtype=bool)
    t_out = np.empty(n, dtype=np.float64)
    vox = np.full((n, 3), -1, dtype=np.int64)
    axis_out = np.full(n, -1, dtype=np.int64)
    step_out = np.zeros(n, dtype=np.int64)

    start_occ = occ[idx[:, 0], idx[:, 1], idx[:, 2]].astype(bool)
    hit[start_occ] = True
    t_out[start_occ] = 0.0
    vox[start_occ] = idx[start_occ]

    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos_next = np.where(d > 0, (idx + 1 - g) / d, (idx - g) / d)
        tmax = np.where(d != 0, pos_next, np.inf)
        tdelta = np.where(d > 0, 1.0 / d, np.where(d < 0, -1.0 / d, np.inf))

    active = np.flatnonzero(~start_occ)
    while active.size:
        tm = tmax[active]
        ax = np.where((tm[:, 0] <= tm[:, 1]) & (tm[:, 0] <= tm[:, 2]), 0,
                      np.where(tm[:, 1] <= tm[:, 2], 1, 2))
        t = tm[np.arange(active.size), ax]

        over = t > t_max[active]
        if over.any():
            done = active[over]
            t_out[done] = t_max[done]
            active, ax, t = active[~over], ax[~over], t[~over]

        idx[active, ax] += step[active, ax]
        tmax[active, ax] += tdelta[active, ax]
        cur = idx[active]
        inside = np.all((cur >= 0) & (cur < dims), axis=1)
        if not inside.all():
            out = active[~inside]
            t_out[out] = t[~inside]
            active, ax, t, cur = active[inside], ax[inside], t[inside], cur[inside]

        occupied = occ[cur[:, 0], cur[:, 1], cur[:, 2]].astype(bool)
        if occupied.any():
            h = active[occupied]
            hit[h] = True
            t_out[h] = t[occupied]
            vox[h] = cur[occupied]
            axis_out[h] = ax[occupied]
            step_out[h] = step[h, ax[occupied]]
            active = active[~occupied]
    return hit, t_out, vox, axis_out, step_out


def raycast_batch(occ, starts, dirs, t_max):
    hit, t, vox, axis, _ = _walk(occ, starts, dirs, np.asarray(t_max, dtype=np.float64))
    return hit, t, vox, axis


def segments_blocked(occ, a, b):
    delta = b - a
    length = np.sqrt(delta[:, 0] * delta[:, 0] + delta[:, 1] * delta[:, 1]
                     + delta[:, 2] * delta[:, 2])
    out = np.zeros(a.shape[0], dtype=bool)
    nz = length != 0.0
    if nz.any():
        d = delta[nz] / length[nz, None]
        hit, _, _, _, _ = _walk(occ, a[nz], d, length[nz] * (1.0 - 1e-9))
        out[nz] = hit
    return out


def trace_specular(occ, src, dirs, max_bounces, max_len):
    n = dirs.shape[0]
    nb = max_bounces + 1
    starts = np.zeros((n, nb, 3))
    sdirs = np.zeros((n, nb, 3))
    lengths = np.zeros((n, nb))
    cum = np.zeros((n, nb))
    sigs = np.zeros((n, nb), dtype=np.uint64)
    valid = np.zeros((n, nb), dtype=bool)

    p = np.repeat(np.asarray(src, dtype=np.float64)[None, :], n, axis=0)
    d = np.array(dirs, dtype=np.float64, copy=True)
    total = np.zeros(n)
    sig = np.zeros(n, dtype=np.uint64)
    live = np.arange(n)
    for b in range(nb):
        if live.size == 0:
            break
        hit, t, vox, axis, step = _walk(occ, p[live], d[live], max_len - total[live])
        inside_start = hit & (axis < 0)
        keep = ~inside_start
        live, hit, t, vox, axis, step = (live[keep], hit[keep], t[keep], vox[keep],
                                         axis[keep], step[keep])
        starts[live, b] = p[live]
        sdirs[live, b] = d[live]
        lengths[live, b] = t
        cum[live, b] = total[live]
        sigs[live, b] = sig[live]
        valid[live, b] = True

        live, t, vox, axis, step = live[hit], t[hit], vox[hit], axis[hit], step[hit]
        total[live] += t
        p[live] += t[:, None] * d[live]
        rows = np.arange(live.size)
        boundary = np.where(step > 0, vox[rows, axis], vox[rows, axis] + 1)
        p[live, axis] = np.where(step > 0, boundary - 1e-7, boundary + 1e-7)
        d[live, axis] = -d[live, axis]
        face = (axis * 4194304 + boundary * 2 + (step > 0)).astype(np.uint64) + np.uint64(1)
        sig[live] = sig[live] * SIG_MUL + face
    return starts, sdirs, lengths, cum, sigs, valid
