"""Numba kernels for the hot paths: decode, trilinear gather/scatter, ray
schedules, the two-pass march, rasterization, and the sparse Adam step.

Determinism rules used throughout:
  - prange loops only ever write elementwise (one owner per output slot), or
  - scatter loops are partitioned by a fixed modulus (NPART) over destination
    rows, so accumulation order never depends on thread count or schedule.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

NPART = 8  # fixed scatter partition count; independent of runtime threads

N_CHANNELS = 8  # density + rgb + 4 feature channels
DOMAIN_HALF = 2.0


# ---------------------------------------------------------------------------
# decode


@njit(parallel=True, cache=True)
def decode_channels(raw, alive, out):
    """softplus density / sigmoid appearance; dead voxels decode to zeros."""
    n = raw.shape[0]
    for i in prange(n):
        if alive[i] == 0:
            for c in range(N_CHANNELS):
                out[i, c] = 0.0
        else:
            x = raw[i, 0]
            if x > 0.0:
                out[i, 0] = x + np.log1p(np.exp(-x))
            else:
                out[i, 0] = np.log1p(np.exp(x))
            for c in range(1, N_CHANNELS):
                v = raw[i, c]
                if v >= 0.0:
                    out[i, c] = 1.0 / (1.0 + np.exp(-v))
                else:
                    e = np.exp(v)
                    out[i, c] = e / (1.0 + e)


# ---------------------------------------------------------------------------
# trilinear gather / scatter


@njit(inline="always")
def _corner_setup(px, py, pz, r):
    ux = (px + DOMAIN_HALF) / (2.0 * DOMAIN_HALF) * r - 0.5
    uy = (py + DOMAIN_HALF) / (2.0 * DOMAIN_HALF) * r - 0.5
    uz = (pz + DOMAIN_HALF) / (2.0 * DOMAIN_HALF) * r - 0.5
    bx = np.floor(ux)
    by = np.floor(uy)
    bz = np.floor(uz)
    return bx, by, bz, ux - bx, uy - by, uz - bz


@njit(inline="always")
def _clampi(v, lo, hi):
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


@njit(parallel=True, cache=True)
def gather_trilinear_rays(channels, r, positions, counts, sampled, corner_idx, corner_w):
    """Counts-aware gather over (B, S, .) ray-major arrays.

    Entries at and past counts[ray] are left untouched (stale); every
    downstream kernel honors counts.
    """
    b = positions.shape[0]
    for ray in prange(b):
        n = counts[ray]
        for s in range(n):
            bx, by, bz, fx, fy, fz = _corner_setup(
                positions[ray, s, 0], positions[ray, s, 1], positions[ray, s, 2], r
            )
            ib = int(bx)
            jb = int(by)
            kb = int(bz)
            for c in range(N_CHANNELS):
                sampled[ray, s, c] = 0.0
            corner = 0
            for di in range(2):
                wi = fx if di == 1 else 1.0 - fx
                ii = _clampi(ib + di, 0, r - 1)
                for dj in range(2):
                    wj = fy if dj == 1 else 1.0 - fy
                    jj = _clampi(jb + dj, 0, r - 1)
                    for dk in range(2):
                        wk = fz if dk == 1 else 1.0 - fz
                        kk = _clampi(kb + dk, 0, r - 1)
                        w = wi * wj * wk
                        lin = (ii * r + jj) * r + kk
                        corner_idx[ray, s, corner] = lin
                        corner_w[ray, s, corner] = w
                        for c in range(N_CHANNELS):
                            sampled[ray, s, c] += w * channels[lin, c]
                        corner += 1


@njit(parallel=True, cache=True)
def scatter_add_channels(corner_idx, corner_w, counts, g_samples, out):
    """Accumulate per-sample decoded-channel grads into a dense (V, C) buffer.

    Ray-major (B, S, .) inputs honoring counts. Partitioned by destination row
    modulo NPART: deterministic for any thread count. out must be pre-zeroed.
    """
    b = corner_idx.shape[0]
    for part in prange(NPART):
        for ray in range(b):
            n = counts[ray]
            for s in range(n):
                for corner in range(8):
                    lin = corner_idx[ray, s, corner]
                    if lin % NPART != part:
                        continue
                    w = corner_w[ray, s, corner]
                    for c in range(N_CHANNELS):
                        out[lin, c] += w * g_samples[ray, s, c]


@njit(parallel=True, cache=True)
def scatter_add_sigma(corner_idx, corner_w, counts, g_sigma, out):
    """Accumulate per-sample density grads into a dense (V,) buffer.

    Same deterministic partitioning as scatter_add_channels.
    """
    b = corner_idx.shape[0]
    for part in prange(NPART):
        for ray in range(b):
            n = counts[ray]
            for s in range(n):
                g = g_sigma[ray, s]
                if g == 0.0:
                    continue
                for corner in range(8):
                    lin = corner_idx[ray, s, corner]
                    if lin % NPART != part:
                        continue
                    out[lin] += corner_w[ray, s, corner] * g


@njit(parallel=True, cache=True)
def ray_forward(sampled, deltas, counts, alphas, trans, weights, sum_w, acc_c, acc_f):
    """Per-ray opacity model + deferred accumulation, fused.

    sampled (B, S, C), deltas (B, S) -> alphas/trans/weights (B, S),
    sum_w (B,), acc_c (B, 3), acc_f (B, 4). Entries past counts[ray] are
    never read or written. trans is the exclusive transmittance.
    """
    b = deltas.shape[0]
    for ray in prange(b):
        t = 1.0
        sw = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        f0 = 0.0
        f1 = 0.0
        f2 = 0.0
        f3 = 0.0
        for s in range(counts[ray]):
            a = -np.expm1(-sampled[ray, s, 0] * deltas[ray, s])
            trans[ray, s] = t
            alphas[ray, s] = a
            w = a * t
            weights[ray, s] = w
            sw += w
            c0 += w * sampled[ray, s, 1]
            c1 += w * sampled[ray, s, 2]
            c2 += w * sampled[ray, s, 3]
            f0 += w * sampled[ray, s, 4]
            f1 += w * sampled[ray, s, 5]
            f2 += w * sampled[ray, s, 6]
            f3 += w * sampled[ray, s, 7]
            t *= 1.0 - a
        sum_w[ray] = sw
        acc_c[ray, 0] = c0
        acc_c[ray, 1] = c1
        acc_c[ray, 2] = c2
        acc_f[ray, 0] = f0
        acc_f[ray, 1] = f1
        acc_f[ray, 2] = f2
        acc_f[ray, 3] = f3


@njit(parallel=True, cache=True)
def ray_backward(
    sampled,
    deltas,
    counts,
    alphas,
    trans,
    weights,
    g_color,
    g_feature,
    g_wm,
    g_wm_ext,
    use_ext,
    g_samples,
    g_sigma_ext,
):
    """Per-sample gradients of the fused forward, parallel over rays.

    Upstream per-ray grads: g_color (B, 3) on the accumulated diffuse,
    g_feature (B, 4) on the accumulated feature, g_wm (B,) on the mesh weight
    w_m = 1 - sum(w) through the blend, g_wm_ext (B,) a separate mesh-weight
    gradient whose density grads must stay separable (adjustment loss).

    Writes g_samples (B, S, C) and, when use_ext, g_sigma_ext (B, S).
    The transmittance recurrence runs without divisions:
        dL/da_i = T_i (g_w_i - G_{i+1});  G_i = g_w_i a_i + G_{i+1} (1 - a_i)
    """
    b = deltas.shape[0]
    for ray in prange(b):
        gc0 = g_color[ray, 0]
        gc1 = g_color[ray, 1]
        gc2 = g_color[ray, 2]
        gf0 = g_feature[ray, 0]
        gf1 = g_feature[ray, 1]
        gf2 = g_feature[ray, 2]
        gf3 = g_feature[ray, 3]
        gwm = g_wm[ray]
        big_g = 0.0
        for s in range(counts[ray] - 1, -1, -1):
            gw = (
                sampled[ray, s, 1] * gc0
                + sampled[ray, s, 2] * gc1
                + sampled[ray, s, 3] * gc2
                + sampled[ray, s, 4] * gf0
                + sampled[ray, s, 5] * gf1
                + sampled[ray, s, 6] * gf2
                + sampled[ray, s, 7] * gf3
                - gwm
            )
            a = alphas[ray, s]
            g_alpha = trans[ray, s] * (gw - big_g)
            big_g = gw * a + big_g * (1.0 - a)
            g_samples[ray, s, 0] = g_alpha * deltas[ray, s] * (1.0 - a)
            w = weights[ray, s]
            g_samples[ray, s, 1] = w * gc0
            g_samples[ray, s, 2] = w * gc1
            g_samples[ray, s, 3] = w * gc2
            g_samples[ray, s, 4] = w * gf0
            g_samples[ray, s, 5] = w * gf1
            g_samples[ray, s, 6] = w * gf2
            g_samples[ray, s, 7] = w * gf3
        if use_ext:
            gw = -g_wm_ext[ray]
            big_g = 0.0
            for s in range(counts[ray] - 1, -1, -1):
                a = alphas[ray, s]
                g_alpha = trans[ray, s] * (gw - big_g)
                big_g = gw * a + big_g * (1.0 - a)
                g_sigma_ext[ray, s] = g_alpha * deltas[ray, s] * (1.0 - a)


@njit(parallel=True, cache=True)
def scatter_max_weight(corner_idx, counts, values, out):
    """Per-voxel running max of sample weights over all touching corners."""
    b = corner_idx.shape[0]
    for part in prange(NPART):
        for ray in range(b):
            n = counts[ray]
            for s in range(n):
                v = values[ray, s]
                for corner in range(8):
                    lin = corner_idx[ray, s, corner]
                    if lin % NPART != part:
                        continue
                    if v > out[lin]:
                        out[lin] = v


@njit(parallel=True, cache=True)
def raw_grad_from_decoded(decoded, alive, acc_main, acc_sigma, allow, out):
    """Chain decoded-channel grads through softplus/sigmoid to raw params.

    acc_sigma holds the separable density grads that only apply where
    allow[voxel] != 0 (the adjustment loss skips mesh-occupied cells). Dead
    voxels get exactly zero gradient.
    """
    n = decoded.shape[0]
    for i in prange(n):
        if alive[i] == 0:
            for c in range(N_CHANNELS):
                out[i, c] = 0.0
            continue
        g = acc_main[i, 0] + (acc_sigma[i] if allow[i] != 0 else 0.0)
        sig = decoded[i, 0]
        out[i, 0] = g * (-np.expm1(-sig))
        for c in range(1, N_CHANNELS):
            a = decoded[i, c]
            out[i, c] = acc_main[i, c] * a * (1.0 - a)


# ---------------------------------------------------------------------------
# fused grid update: raw grads + lazy Adam + incremental re-decode


@njit(parallel=True, cache=True)
def fused_grid_update(
    decoded, alive, acc_main, acc_sigma, allow, raw, m, v, lr, beta1, beta2, eps, bc1, bc2
):
    """Consume accumulated decoded-space grads: chain to raw params, apply a
    lazy Adam step, and re-decode the touched rows in place.

    Accumulators are zeroed as they are read, so they are scatter-ready for
    the next step. Dead voxels never move and never decode to anything but 0.
    """
    n = decoded.shape[0]
    for i in prange(n):
        if alive[i] == 0:
            acc_sigma[i] = 0.0
            for c in range(N_CHANNELS):
                acc_main[i, c] = 0.0
            continue
        g0 = acc_main[i, 0]
        if allow[i] != 0:
            g0 += acc_sigma[i]
        acc_sigma[i] = 0.0
        touched = g0 != 0.0
        if not touched:
            for c in range(1, N_CHANNELS):
                if acc_main[i, c] != 0.0:
                    touched = True
                    break
        if not touched:
            continue
        sig = decoded[i, 0]
        g = g0 * (-np.expm1(-sig))
        m[i, 0] = beta1 * m[i, 0] + (1.0 - beta1) * g
        v[i, 0] = beta2 * v[i, 0] + (1.0 - beta2) * g * g
        raw[i, 0] -= lr * (m[i, 0] / bc1) / (np.sqrt(v[i, 0] / bc2) + eps)
        for c in range(1, N_CHANNELS):
            a = decoded[i, c]
            g = acc_main[i, c] * a * (1.0 - a)
            acc_main[i, c] = 0.0
            m[i, c] = beta1 * m[i, c] + (1.0 - beta1) * g
            v[i, c] = beta2 * v[i, c] + (1.0 - beta2) * g * g
            raw[i, c] -= lr * (m[i, c] / bc1) / (np.sqrt(v[i, c] / bc2) + eps)
        acc_main[i, 0] = 0.0
        # re-decode the row so the cached decoded grid stays in sync
        x = raw[i, 0]
        if x > 0.0:
            decoded[i, 0] = x + np.log1p(np.exp(-x))
        else:
            decoded[i, 0] = np.log1p(np.exp(x))
        for c in range(1, N_CHANNELS):
            vv = raw[i, c]
            if vv >= 0.0:
                decoded[i, c] = 1.0 / (1.0 + np.exp(-vv))
            else:
                e = np.exp(vv)
                decoded[i, c] = e / (1.0 + e)


# ---------------------------------------------------------------------------
# contraction scalars + march schedule


@njit(inline="always")
def _contract_scalar(x0, x1, x2):
    a0 = abs(x0)
    a1 = abs(x1)
    a2 = abs(x2)
    r = a0
    if a1 > r:
        r = a1
    if a2 > r:
        r = a2
    if r <= 1.0:
        return x0, x1, x2
    if a0 >= a1 and a0 >= a2:
        m = 0
    elif a1 >= a2:
        m = 1
    else:
        m = 2
    o0 = x0 / r
    o1 = x1 / r
    o2 = x2 / r
    if m == 0:
        o0 = (2.0 - 1.0 / a0) * (1.0 if x0 > 0 else -1.0)
    elif m == 1:
        o1 = (2.0 - 1.0 / a1) * (1.0 if x1 > 0 else -1.0)
    else:
        o2 = (2.0 - 1.0 / a2) * (1.0 if x2 > 0 else -1.0)
    return o0, o1, o2


@njit(inline="always")
def _contract_speed(x0, x1, x2, d0, d1, d2):
    """Norm of the contraction JVP: how fast the contracted point moves per
    unit world distance along d."""
    a0 = abs(x0)
    a1 = abs(x1)
    a2 = abs(x2)
    r = a0
    if a1 > r:
        r = a1
    if a2 > r:
        r = a2
    if r <= 1.0:
        return np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if a0 >= a1 and a0 >= a2:
        m = 0
        dm = d0
        xm = x0
    elif a1 >= a2:
        m = 1
        dm = d1
        xm = x1
    else:
        m = 2
        dm = d2
        xm = x2
    dr = (1.0 if xm > 0 else -1.0) * dm
    r2 = r * r
    o0 = d0 / r - x0 * dr / r2
    o1 = d1 / r - x1 * dr / r2
    o2 = d2 / r - x2 * dr / r2
    if m == 0:
        o0 = dm / r2
    elif m == 1:
        o1 = dm / r2
    else:
        o2 = dm / r2
    return np.sqrt(o0 * o0 + o1 * o1 + o2 * o2)


@njit(parallel=True, cache=True)
def make_schedule(origins, dirs, t_far, t_limit, near, step_c, positions, deltas, ts, counts):
    """Adaptive march schedule: steps of ~step_c contracted arc length.

    Fills positions (B, S, 3) with contracted sample points, deltas (B, S)
    with contracted chord lengths, ts (B, S) with ray parameters, counts (B,)
    with the number of live samples. Padded tail entries keep delta == 0.
    t_limit stops emission (surface depth) without touching emitted deltas,
    matching the renderer's depth-termination rule exactly.
    """
    b = origins.shape[0]
    smax = positions.shape[1]
    for ray in prange(b):
        o0 = origins[ray, 0]
        o1 = origins[ray, 1]
        o2 = origins[ray, 2]
        d0 = dirs[ray, 0]
        d1 = dirs[ray, 1]
        d2 = dirs[ray, 2]
        far = t_far[ray]
        limit = t_limit[ray]
        t = near
        n = 0
        if t < far:
            x0 = o0 + t * d0
            x1 = o1 + t * d1
            x2 = o2 + t * d2
            p0, p1, p2 = _contract_scalar(x0, x1, x2)
            while n < smax and t < far:
                if t >= limit:
                    break
                spd = _contract_speed(x0, x1, x2, d0, d1, d2)
                if spd < 1e-9:
                    spd = 1e-9
                t_next = t + step_c / spd
                if t_next > far:
                    t_next = far
                q0 = o0 + t_next * d0
                q1 = o1 + t_next * d1
                q2 = o2 + t_next * d2
                c0, c1, c2 = _contract_scalar(q0, q1, q2)
                e0 = c0 - p0
                e1 = c1 - p1
                e2 = c2 - p2
                delta = np.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
                if delta > 0.0:
                    positions[ray, n, 0] = p0
                    positions[ray, n, 1] = p1
                    positions[ray, n, 2] = p2
                    deltas[ray, n] = delta
                    ts[ray, n] = t
                    n += 1
                t = t_next
                x0 = q0
                x1 = q1
                x2 = q2
                p0 = c0
                p1 = c1
                p2 = c2
        counts[ray] = n  # entries past n are stale; consumers honor counts


# ---------------------------------------------------------------------------
# two-pass renderer march


@njit(inline="always")
def _provably_dead(pyr, offsets, n_levels, r, ib, jb, kb):
    """True when every trilinear corner voxel of the sample is dead.

    The corner block spans voxels [ib, ib+1]^3 (clamped). Levels are tested
    coarse to fine; at level k the block is covered by at most 8 cells, and
    if all of them are dead the sample provably contributes nothing. Finer
    levels rescue blocks sitting in the alive fringe of a coarse cell.
    """
    i0 = _clampi(ib, 0, r - 1)
    j0 = _clampi(jb, 0, r - 1)
    k0 = _clampi(kb, 0, r - 1)
    i1 = _clampi(ib + 1, 0, r - 1)
    j1 = _clampi(jb + 1, 0, r - 1)
    k1 = _clampi(kb + 1, 0, r - 1)
    for lvl in range(n_levels - 1, -1, -1):
        res = r >> lvl
        ci0 = i0 >> lvl
        cj0 = j0 >> lvl
        ck0 = k0 >> lvl
        ci1 = i1 >> lvl
        cj1 = j1 >> lvl
        ck1 = k1 >> lvl
        all_dead = True
        for ci in range(ci0, ci1 + 1):
            for cj in range(cj0, cj1 + 1):
                for ck in range(ck0, ck1 + 1):
                    if pyr[offsets[lvl] + (ci * res + cj) * res + ck] != 0:
                        all_dead = False
                        break
                if not all_dead:
                    break
            if not all_dead:
                break
        if all_dead:
            return True
    return False


@njit(parallel=True, cache=True)
def two_pass_march(
    channels,
    r,
    pyr,
    pyr_offsets,
    n_levels,
    origin,
    dirs,
    t_far,
    t_stop,
    near,
    step_c,
    max_steps,
    use_pyramid,
    use_depth,
    acc_diffuse,
    acc_feature,
    sum_w,
    stats,
):
    """Ray-march pass of the renderer.

    Walks the same adaptive schedule as training, skips samples whose whole
    interpolation neighborhood is dead (pyramid test), and stops marching at
    the rasterized surface depth when use_depth is on.

    stats (P, 4) int64 per ray: [evaluated, skipped, depth_terminated, visited].
    """
    p = dirs.shape[0]
    for ray in prange(p):
        o0 = origin[0]
        o1 = origin[1]
        o2 = origin[2]
        d0 = dirs[ray, 0]
        d1 = dirs[ray, 1]
        d2 = dirs[ray, 2]
        far = t_far[ray]
        stop = t_stop[ray] if use_depth else np.inf
        t = near
        trans = 1.0
        aw = 0.0
        ac0 = 0.0
        ac1 = 0.0
        ac2 = 0.0
        af0 = 0.0
        af1 = 0.0
        af2 = 0.0
        af3 = 0.0
        n_eval = 0
        n_skip = 0
        terminated = 0
        steps = 0
        x0 = o0 + t * d0
        x1 = o1 + t * d1
        x2 = o2 + t * d2
        p0, p1, p2 = _contract_scalar(x0, x1, x2)
        while steps < max_steps and t < far:
            if t >= stop:
                terminated = 1
                break
            spd = _contract_speed(x0, x1, x2, d0, d1, d2)
            if spd < 1e-9:
                spd = 1e-9
            t_next = t + step_c / spd
            if t_next > far:
                t_next = far
            q0 = o0 + t_next * d0
            q1 = o1 + t_next * d1
            q2 = o2 + t_next * d2
            c0, c1, c2 = _contract_scalar(q0, q1, q2)
            e0 = c0 - p0
            e1 = c1 - p1
            e2 = c2 - p2
            delta = np.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
            if delta > 0.0:
                bx, by, bz, fx, fy, fz = _corner_setup(p0, p1, p2, r)
                ib = int(bx)
                jb = int(by)
                kb = int(bz)
                if use_pyramid and _provably_dead(
                    pyr, pyr_offsets, n_levels, r, ib, jb, kb
                ):
                    n_skip += 1
                else:
                    sig = 0.0
                    cr = 0.0
                    cg = 0.0
                    cb = 0.0
                    f0 = 0.0
                    f1 = 0.0
                    f2 = 0.0
                    f3 = 0.0
                    for di in range(2):
                        wi = fx if di == 1 else 1.0 - fx
                        ii = _clampi(ib + di, 0, r - 1)
                        for dj in range(2):
                            wj = fy if dj == 1 else 1.0 - fy
                            jj = _clampi(jb + dj, 0, r - 1)
                            for dk in range(2):
                                wk = fz if dk == 1 else 1.0 - fz
                                kk = _clampi(kb + dk, 0, r - 1)
                                w = wi * wj * wk
                                lin = (ii * r + jj) * r + kk
                                sig += w * channels[lin, 0]
                                cr += w * channels[lin, 1]
                                cg += w * channels[lin, 2]
                                cb += w * channels[lin, 3]
                                f0 += w * channels[lin, 4]
                                f1 += w * channels[lin, 5]
                                f2 += w * channels[lin, 6]
                                f3 += w * channels[lin, 7]
                    n_eval += 1
                    alpha = -np.expm1(-sig * delta)
                    w_s = alpha * trans
                    if w_s > 0.0:
                        aw += w_s
                        ac0 += w_s * cr
                        ac1 += w_s * cg
                        ac2 += w_s * cb
                        af0 += w_s * f0
                        af1 += w_s * f1
                        af2 += w_s * f2
                        af3 += w_s * f3
                    trans *= 1.0 - alpha
            t = t_next
            x0 = q0
            x1 = q1
            x2 = q2
            p0 = c0
            p1 = c1
            p2 = c2
            steps += 1
        acc_diffuse[ray, 0] = ac0
        acc_diffuse[ray, 1] = ac1
        acc_diffuse[ray, 2] = ac2
        acc_feature[ray, 0] = af0
        acc_feature[ray, 1] = af1
        acc_feature[ray, 2] = af2
        acc_feature[ray, 3] = af3
        sum_w[ray] = aw
        stats[ray, 0] = n_eval
        stats[ray, 1] = n_skip
        stats[ray, 2] = terminated
        stats[ray, 3] = n_eval + n_skip


# ---------------------------------------------------------------------------
# software rasterizer


@njit(cache=True)
def rasterize_faces(verts_cam, tris, fx, fy, cx, cy, width, height, face_id, depth, bary):
    """Perspective z-buffer rasterization, serial over faces in index order.

    Strict depth test keeps the lowest face id on exact ties. No near-plane
    clipping: faces with any vertex at z <= 1e-9 are dropped.
    """
    nf = tris.shape[0]
    for f in range(nf):
        z0 = verts_cam[tris[f, 0], 2]
        z1 = verts_cam[tris[f, 1], 2]
        z2 = verts_cam[tris[f, 2], 2]
        if z0 <= 1e-9 or z1 <= 1e-9 or z2 <= 1e-9:
            continue
        u0 = fx * verts_cam[tris[f, 0], 0] / z0 + cx
        v0 = fy * verts_cam[tris[f, 0], 1] / z0 + cy
        u1 = fx * verts_cam[tris[f, 1], 0] / z1 + cx
        v1 = fy * verts_cam[tris[f, 1], 1] / z1 + cy
        u2 = fx * verts_cam[tris[f, 2], 0] / z2 + cx
        v2 = fy * verts_cam[tris[f, 2], 1] / z2 + cy
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if area == 0.0:
            continue
        sgn = 1.0 if area > 0 else -1.0
        area_abs = area * sgn
        min_x = int(np.floor(min(u0, min(u1, u2)) - 0.5))
        max_x = int(np.ceil(max(u0, max(u1, u2)) + 0.5))
        min_y = int(np.floor(min(v0, min(v1, v2)) - 0.5))
        max_y = int(np.ceil(max(v0, max(v1, v2)) + 0.5))
        if min_x < 0:
            min_x = 0
        if min_y < 0:
            min_y = 0
        if max_x > width - 1:
            max_x = width - 1
        if max_y > height - 1:
            max_y = height - 1
        for py in range(min_y, max_y + 1):
            sy = py + 0.5
            for px in range(min_x, max_x + 1):
                sx = px + 0.5
                e0 = ((u2 - u1) * (sy - v1) - (v2 - v1) * (sx - u1)) * sgn
                e1 = ((u0 - u2) * (sy - v2) - (v0 - v2) * (sx - u2)) * sgn
                e2 = ((u1 - u0) * (sy - v0) - (v1 - v0) * (sx - u0)) * sgn
                if e0 < 0.0 or e1 < 0.0 or e2 < 0.0:
                    continue
                l0 = e0 / area_abs
                l1 = e1 / area_abs
                l2 = e2 / area_abs
                zinv = l0 / z0 + l1 / z1 + l2 / z2
                if zinv <= 0.0:
                    continue
                z = 1.0 / zinv
                if z < depth[py, px]:
                    depth[py, px] = z
                    face_id[py, px] = f
                    bary[py, px, 0] = (l0 / z0) * z
                    bary[py, px, 1] = (l1 / z1) * z
                    bary[py, px, 2] = (l2 / z2) * z
