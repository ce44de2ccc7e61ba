"""Compiled particle-transport loop.

One call transports particles ``[start, stop)`` and scores them into private
buffers.  Everything a particle does depends only on its own counter-based
stream, so chunks can run on any thread in any order.
"""

from __future__ import annotations

import numba
import numpy as np

from protonplan.rng import STATE_SIZE, exponential, normal_pair, stream_init, uniform
from protonplan.scattering import transition

# geometry/config vector layout
G_MODE3D, G_XLO, G_XHI, G_YLO, G_YHI, G_ZHI, G_EMIN, G_EMAX, G_STEP, G_MAXLEN, G_MU, G_RATE, \
    G_EREF, G_QE, G_QNE = range(15)
N_GEO = 15

# grid vector layout
R_DZ, R_NZ, R_ELO, R_DE, R_NE, R_NC = range(6)

# balance vector layout
B_INJECTED, B_DEPOSITED, B_RELEASED, B_ESCAPED, B_RESIDUAL, B_TRUNCATED, B_OVERFLOW_LEN, \
    B_OVERFLOW_SEG, B_OVERFLOW_DEP, B_N_RANGE_OUT, B_N_EXIT, B_N_MAXLEN, B_N_COLLISIONS, \
    B_N_ELASTIC, B_N_SEGMENTS = range(15)
N_BAL = 15

# event record columns
EV_X0, EV_DIR0, EV_E0, EV_X1, EV_DIR1, EV_E1, EV_LEN, EV_DEP, EV_CAUSE, EV_PID = 0, 3, 6, 7, 10, 13, 14, 15, 16, 17
N_EV = 18
CAUSE_NONE, CAUSE_RANGE_OUT, CAUSE_EXIT, CAUSE_MAXLEN = 0, 1, 2, 3


@numba.njit(inline="always")
def _layer(starts, z, wz):
    if starts.shape[0] == 1:
        return 0
    k = np.searchsorted(starts, z, side="right") - 1
    if k < 0:
        k = 0
    if wz < 0.0 and k > 0 and z == starts[k]:
        k -= 1
    return k


@numba.njit(inline="always")
def _score(hist, touched, n_touched, k, value):
    if hist[k] == 0.0:
        touched[n_touched] = k
        n_touched += 1
    hist[k] += value
    return n_touched


@numba.njit(inline="always")
def _bin(t):
    # floor for the non-negative range that can hit a bin; -1 otherwise
    if t >= 0.0:
        return np.int64(t)
    return -1


@numba.njit(inline="always")
def _face(a0, a1, lo, hi, axis, frac, cause, hit_axis, hit_side):
    # earliest crossing of the [lo, hi] bounds along one axis of the segment
    if a1 > hi:
        f = min(max((hi - a0) / (a1 - a0), 0.0), 1.0)
        if cause == CAUSE_NONE or f < frac:
            return f, CAUSE_EXIT, axis, 1
    elif a1 < lo:
        f = min(max((lo - a0) / (a1 - a0), 0.0), 1.0)
        if cause == CAUSE_NONE or f < frac:
            return f, CAUSE_EXIT, axis, -1
    return frac, cause, hit_axis, hit_side


@numba.njit(cache=True, nogil=True, error_model="numpy")
def transport_chunk(
    geo, starts, alpha, p, rho, e_screen, sig_e, sig_ne, kappa_e, kappa_ne, f_min, f_max,
    b_mean, b_sigma, b_cum, b_pos, b_lat_sigma, b_dir,
    grid, seed, stream_id, start, stop,
    flu_sum, flu_sq, dep_sum, dep_sq, rel_sum, bal,
    record, events,
):
    mode3d = geo[G_MODE3D] > 0.5
    x_lo, x_hi, y_lo, y_hi, z_hi = geo[G_XLO], geo[G_XHI], geo[G_YLO], geo[G_YHI], geo[G_ZHI]
    e_min = geo[G_EMIN]
    e_max = geo[G_EMAX]
    step_len = geo[G_STEP]
    max_len = geo[G_MAXLEN]
    mu = geo[G_MU]
    rate_bound = geo[G_RATE]
    e_ref = geo[G_EREF]
    q_e = geo[G_QE]
    q_ne = geo[G_QNE]
    n_layers = starts.shape[0]

    dz = grid[R_DZ]
    nz = np.int64(grid[R_NZ])
    e_lo = grid[R_ELO]
    d_e = grid[R_DE]
    n_e = np.int64(grid[R_NE])
    n_c = np.int64(grid[R_NC])

    # S(E) = coef * max(E, e_screen)**expo per layer
    expo = 1.0 - p
    coef = 1.0 / (alpha * p)
    s_min = np.inf
    for k in range(n_layers):
        s = coef[k] * max(e_max, e_screen[k]) ** expo[k]
        if s < s_min:
            s_min = s

    h_flu = np.zeros(flu_sum.shape[0])
    t_flu = np.zeros(flu_sum.shape[0], dtype=np.int64)
    h_dep = np.zeros(nz)
    t_dep = np.zeros(nz, dtype=np.int64)
    h_rel = np.zeros(nz)
    st = np.zeros(STATE_SIZE, dtype=np.uint64)
    n_events = 0

    injected = deposited = released_tot = escaped = residual = truncated = 0.0
    ov_len = ov_seg = ov_dep = 0.0
    n_range_out = n_exit = n_maxlen = n_coll = n_elastic = n_seg = 0.0

    for particle in range(start, stop):
        stream_init(st, np.uint64(seed), np.uint64(stream_id), np.uint64(particle))
        nf = 0
        nd = 0
        cur_f = -1
        cur_d = -1
        acc_f = 0.0
        acc_d = 0.0

        # source: pick a beam, then its energy and entry point
        ub = uniform(st)
        beam = 0
        while beam < b_cum.shape[0] - 1 and ub > b_cum[beam]:
            beam += 1
        energy = b_mean[beam]
        if b_sigma[beam] > 0.0:
            while True:
                g1, g2 = normal_pair(st)
                energy = b_mean[beam] + b_sigma[beam] * g1
                if e_min < energy < e_max:
                    break
        x0 = b_pos[beam, 0]
        y0 = b_pos[beam, 1]
        z0 = b_pos[beam, 2]
        if mode3d and b_lat_sigma[beam] > 0.0:
            g1, g2 = normal_pair(st)
            x0 += b_lat_sigma[beam] * g1
            y0 += b_lat_sigma[beam] * g2
        u0 = b_dir[beam, 0]
        v0 = b_dir[beam, 1]
        w0 = b_dir[beam, 2]
        injected += energy

        # hard cap on loop iterations: the energy falls by at least s_min per unit length
        base_bound = int(min(max_len / step_len, (energy - e_min) / (s_min * step_len))) + 3
        ell = 0.0
        jump_left = exponential(st, rate_bound)
        extra = 0
        iters = 0
        while True:
            iters += 1
            if iters > base_bound + extra:
                raise RuntimeError("track exceeded its iteration bound")
            k = _layer(starts, z0, w0)
            h = step_len
            if max_len - ell < h:
                h = max_len - ell
            clipped = False
            if w0 > 0.0 and k + 1 < n_layers:
                d_if = (starts[k + 1] - z0) / w0
                if d_if < h:
                    h = d_if
                    clipped = True
            elif w0 < 0.0 and k > 0:
                d_if = (z0 - starts[k]) / (-w0)
                if d_if < h:
                    h = d_if
                    clipped = True
            jumped = False
            if jump_left <= h:
                h = jump_left
                jumped = True
                clipped = False

            e_eff = energy if energy > e_screen[k] else e_screen[k]
            e1 = energy - coef[k] * e_eff ** expo[k] * h
            x1 = x0 + u0 * h
            y1 = y0 + v0 * h
            z1 = z0 + w0 * h
            if clipped:
                z1 = starts[k + 1] if w0 > 0.0 else starts[k]
            u1, v1, w1 = u0, v0, w0
            if mode3d and mu > 0.0:
                sd = np.sqrt(h)
                n1, n2 = normal_pair(st)
                n3, _ = normal_pair(st)
                b0, b1, b2 = sd * n1, sd * n2, sd * n3
                # w - mu^2 w dl + mu (w x dB), then back onto the sphere
                damp = 1.0 - mu * mu * h
                a0 = damp * u0 + mu * (v0 * b2 - w0 * b1)
                a1 = damp * v0 + mu * (w0 * b0 - u0 * b2)
                a2 = damp * w0 + mu * (u0 * b1 - v0 * b0)
                nrm = np.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
                u1 = a0 / nrm
                v1 = a1 / nrm
                w1 = a2 / nrm

            # first crossing of the energy floor or a face along the segment
            frac = 1.0
            cause = CAUSE_NONE
            axis = -1
            side = 0
            if e1 <= e_min:
                cause = CAUSE_RANGE_OUT
                de = energy - e1
                frac = 1.0 if de <= 0.0 else (energy - e_min) / de
            frac, cause, axis, side = _face(z0, z1, 0.0, z_hi, 2, frac, cause, axis, side)
            if mode3d:
                frac, cause, axis, side = _face(x0, x1, x_lo, x_hi, 0, frac, cause, axis, side)
                frac, cause, axis, side = _face(y0, y1, y_lo, y_hi, 1, frac, cause, axis, side)
            if cause != CAUSE_NONE:
                h = h * frac
                x1 = x0 + frac * (x1 - x0)
                y1 = y0 + frac * (y1 - y0)
                z1 = z0 + frac * (z1 - z0)
                u1, v1, w1 = u0, v0, w0
                if cause == CAUSE_RANGE_OUT:
                    e1 = e_min
                else:
                    e1 = energy + frac * (e1 - energy)
                    if axis == 2:
                        z1 = z_hi if side > 0 else 0.0
                    elif axis == 0:
                        x1 = x_hi if side > 0 else x_lo
                    else:
                        y1 = y_hi if side > 0 else y_lo
                jumped = False
            ell += h
            if cause == CAUSE_NONE and not jumped and ell >= max_len * (1.0 - 1e-12):
                cause = CAUSE_MAXLEN

            # score the segment at its midpoint
            dep = energy - e1
            if h > 0.0:
                n_seg += 1.0
                iz = _bin(0.5 * (z0 + z1) / dz)
                ie = _bin((0.5 * (energy + e1) - e_lo) / d_e)
                ic = 0
                if n_c > 1:
                    ic = min(_bin((w0 + 1.0) * 0.5 * n_c), n_c - 1)
                if 0 <= iz < nz and 0 <= ie < n_e:
                    kf = (iz * n_e + ie) * n_c + ic
                    # consecutive segments mostly share a bin: coalesce them first
                    if kf != cur_f:
                        if cur_f >= 0:
                            nf = _score(h_flu, t_flu, nf, cur_f, acc_f)
                        cur_f = kf
                        acc_f = 0.0
                    acc_f += h
                else:
                    ov_len += h
                    ov_seg += 1.0
                if 0 <= iz < nz:
                    if dep > 0.0:
                        if iz != cur_d:
                            if cur_d >= 0:
                                nd = _score(h_dep, t_dep, nd, cur_d, acc_d)
                            cur_d = iz
                            acc_d = 0.0
                        acc_d += dep
                else:
                    ov_dep += dep
            deposited += dep

            if record:
                if n_events >= events.shape[0]:
                    return -1
                ev = events[n_events]
                ev[EV_X0], ev[EV_X0 + 1], ev[EV_X0 + 2] = x0, y0, z0
                ev[EV_DIR0], ev[EV_DIR0 + 1], ev[EV_DIR0 + 2] = u0, v0, w0
                ev[EV_X1], ev[EV_X1 + 1], ev[EV_X1 + 2] = x1, y1, z1
                ev[EV_DIR1], ev[EV_DIR1 + 1], ev[EV_DIR1 + 2] = u1, v1, w1
                ev[EV_E0] = energy
                ev[EV_E1] = e1
                ev[EV_LEN] = h
                ev[EV_DEP] = dep
                ev[EV_CAUSE] = cause
                ev[EV_PID] = particle
                n_events += 1

            energy = e1
            x0, y0, z0 = x1, y1, z1
            u0, v0, w0 = u1, v1, w1
            jump_left -= h

            if cause == CAUSE_RANGE_OUT:
                residual += energy
                n_range_out += 1.0
                break
            if cause == CAUSE_EXIT:
                escaped += energy
                n_exit += 1.0
                break
            if cause == CAUSE_MAXLEN:
                truncated += energy
                n_maxlen += 1.0
                break

            if clipped:
                extra += 1
            if jumped:
                extra += 1
                kk = _layer(starts, z0, w0)
                er = energy / e_ref
                se = sig_e[kk] * er**q_e
                sne = sig_ne[kk] * er**q_ne
                if uniform(st) * rate_bound < se + sne:
                    n_coll += 1.0
                    r1 = uniform(st)
                    r2 = uniform(st)
                    r3 = uniform(st)
                    r4 = uniform(st)
                    p_el = se / (se + sne)
                    if r1 < p_el:
                        n_elastic += 1.0
                    nu, nv, nw, e_new = transition(
                        u0, v0, w0, energy, p_el, kappa_e[kk], kappa_ne[kk], f_min[kk], f_max[kk],
                        r1, r2, r3, r4,
                    )
                    if mode3d:
                        u0, v0, w0 = nu, nv, nw
                    released = energy - e_new
                    if released > 0.0:
                        released_tot += released
                        izr = np.int64(np.floor(z0 / dz))
                        if 0 <= izr < nz:
                            h_rel[izr] += released
                    energy = e_new
                    if energy <= e_min:
                        residual += energy
                        n_range_out += 1.0
                        if record:
                            events[n_events - 1, EV_CAUSE] = CAUSE_RANGE_OUT
                        break
                jump_left = exponential(st, rate_bound)

        # fold this history into the chunk buffers
        if cur_f >= 0:
            nf = _score(h_flu, t_flu, nf, cur_f, acc_f)
        if cur_d >= 0:
            nd = _score(h_dep, t_dep, nd, cur_d, acc_d)
        for i in range(nf):
            kf = t_flu[i]
            v = h_flu[kf]
            flu_sum[kf] += v
            flu_sq[kf] += v * v
            h_flu[kf] = 0.0
        for i in range(nd):
            kd = t_dep[i]
            v = h_dep[kd]
            dep_sum[kd] += v
            dep_sq[kd] += v * v
            h_dep[kd] = 0.0
        if released_tot > 0.0:
            for i in range(nz):
                if h_rel[i] != 0.0:
                    rel_sum[i] += h_rel[i]
                    h_rel[i] = 0.0

    bal[B_INJECTED] += injected
    bal[B_DEPOSITED] += deposited
    bal[B_RELEASED] += released_tot
    bal[B_ESCAPED] += escaped
    bal[B_RESIDUAL] += residual
    bal[B_TRUNCATED] += truncated
    bal[B_OVERFLOW_LEN] += ov_len
    bal[B_OVERFLOW_SEG] += ov_seg
    bal[B_OVERFLOW_DEP] += ov_dep
    bal[B_N_RANGE_OUT] += n_range_out
    bal[B_N_EXIT] += n_exit
    bal[B_N_MAXLEN] += n_maxlen
    bal[B_N_COLLISIONS] += n_coll
    bal[B_N_ELASTIC] += n_elastic
    bal[B_N_SEGMENTS] += n_seg
    return n_events
