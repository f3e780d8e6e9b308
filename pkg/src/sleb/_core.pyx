# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled compute kernels.

Bit-for-bit twins of the pure-numpy kernels in ``sleb._engine_np`` — same
state updates, same operation order, same IEEE arithmetic (compiled with
-ffp-contract=off so no fused multiply-adds sneak in), and a word-for-word
identical Philox side stream for the excursion walk.  See that module's
docstring for the math; comments here only mark parity-sensitive spots.
Point status codes: 0 = active, 1 = swallowed, 2 = all thresholds crossed.
"""

import numpy as np

cimport cython
from libc.math cimport sqrt, fmax, log, sin, cos, pow
from libc.stdint cimport int64_t, int8_t, uint8_t, uint64_t

# Keep in lockstep with _engine_np / rng (values asserted equal in tests).
DEF WALK_ENTER = 4.0
DEF WALK_ESCAPE = 8.0
DEF WALK_STEP_FRAC = 0.02
DEF WALK_PINCH_FRAC = 0.03
DEF WALK_P_DEAD = 1e-14
DEF DRIVE_SUB_Z = 16.0
DEF DRIVE_SUB_M = 64
DEF DRIVER_PT = 4095  # rng.DRIVER_PT
DEF TWO_PI = 6.283185307179586


cdef extern from *:
    """
    #include <stdint.h>
    typedef unsigned __int128 sleb_u128;
    static const uint64_t SLEB_PHI_M0 = 0xD2E7470EE14C6C93ULL;
    static const uint64_t SLEB_PHI_M1 = 0xCA5A826395121157ULL;
    static const uint64_t SLEB_PHI_W0 = 0x9E3779B97F4A7C15ULL;
    static const uint64_t SLEB_PHI_W1 = 0xBB67AE8584CAA73BULL;
    /* Philox4x64-10: counter (c0..c3), key (k0,k1), four output words. */
    static void sleb_philox4_10(uint64_t c0, uint64_t c1, uint64_t c2,
                                uint64_t c3, uint64_t k0, uint64_t k1,
                                uint64_t out[4]) {
        int r;
        for (r = 0; r < 10; r++) {
            sleb_u128 p0 = (sleb_u128)SLEB_PHI_M0 * c0;
            sleb_u128 p1 = (sleb_u128)SLEB_PHI_M1 * c2;
            uint64_t hi0 = (uint64_t)(p0 >> 64), lo0 = (uint64_t)p0;
            uint64_t hi1 = (uint64_t)(p1 >> 64), lo1 = (uint64_t)p1;
            c0 = hi1 ^ c1 ^ k0;
            c1 = lo1;
            c2 = hi0 ^ c3 ^ k1;
            c3 = lo0;
            k0 += SLEB_PHI_W0;
            k1 += SLEB_PHI_W1;
        }
        out[0] = c0; out[1] = c1; out[2] = c2; out[3] = c3;
    }
    """
    void sleb_philox4_10(uint64_t c0, uint64_t c1, uint64_t c2, uint64_t c3,
                         uint64_t k0, uint64_t k1, uint64_t out[4]) nogil


cdef struct XStream:
    uint64_t k0
    uint64_t k1
    uint64_t blk
    int idx
    uint64_t words[4]
    double pending
    bint has_pending


cdef inline void xs_init(XStream* s, uint64_t k0, uint64_t k1) noexcept nogil:
    s.k0 = k0
    s.k1 = k1
    s.blk = 0
    s.idx = 4
    s.has_pending = False


cdef inline double xs_uniform(XStream* s) noexcept nogil:
    cdef uint64_t raw
    if s.idx == 4:
        sleb_philox4_10(s.blk, 0, 0, 0, s.k0, s.k1, s.words)
        s.blk += 1
        s.idx = 0
    raw = s.words[s.idx]
    s.idx += 1
    # (raw>>11)+1 <= 2^53 is exactly representable; result lies in (0, 1].
    return <double>((raw >> 11) + 1) * 1.1102230246251565e-16


cdef inline double xs_normal(XStream* s) noexcept nogil:
    cdef double out, r, th
    if s.has_pending:
        out = s.pending
        s.has_pending = False
        return out
    r = sqrt(-2.0 * log(xs_uniform(s)))
    th = TWO_PI * xs_uniform(s)
    s.pending = r * sin(th)
    s.has_pending = True
    return r * cos(th)


cdef inline double xs_gamma(XStream* s, double shape) noexcept nogil:
    # Marsaglia-Tsang; shapes below 1 boosted through shape + 1.
    cdef double boost = 1.0
    cdef double a = shape
    cdef double d, c, x, t, v, u, x2
    if a < 1.0:
        boost = pow(xs_uniform(s), 1.0 / a)
        a = a + 1.0
    d = a - 1.0 / 3.0
    c = 1.0 / sqrt(9.0 * d)
    while True:
        x = xs_normal(s)
        t = 1.0 + c * x
        if t <= 0.0:
            continue
        v = t * t * t
        u = xs_uniform(s)
        x2 = x * x
        if u < 1.0 - 0.0331 * x2 * x2:
            return boost * d * v
        if log(u) < 0.5 * x2 + d * (1.0 - v + log(v)):
            return boost * d * v


def philox_words(object k0, object k1, object blk):
    """Raw 4-word Philox block (parity hook for tests)."""
    cdef uint64_t out[4]
    cdef uint64_t c0 = <uint64_t> (int(blk) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t kk0 = <uint64_t> (int(k0) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t kk1 = <uint64_t> (int(k1) & 0xFFFFFFFFFFFFFFFF)
    sleb_philox4_10(c0, 0, 0, 0, kk0, kk1, out)
    return (out[0], out[1], out[2], out[3])


def stream_probe(object k0, object k1, double gshape, int n):
    """First n (gamma, normal) pairs of one window stream (parity hook)."""
    cdef XStream st
    xs_init(&st, <uint64_t> (int(k0) & 0xFFFFFFFFFFFFFFFF),
            <uint64_t> (int(k1) & 0xFFFFFFFFFFFFFFFF))
    out = np.empty((n, 2), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef int i
    for i in range(n):
        o[i, 0] = xs_gamma(&st, gshape)
        o[i, 1] = xs_normal(&st)
    return out


cdef double _substep_gap(XStream* st, double* z_io, double h, double kappa,
                         double gshape) noexcept nogil:
    # DRIVE_SUB_M exact micro-transitions across one dip-flagged step;
    # returns the accumulated dv and leaves z_io at the step end.
    cdef double hm = h / DRIVE_SUB_M
    cdef double fl = 0.5 * sqrt(kappa * hm)
    cdef double z = z_io[0]
    cdef double d = sqrt(kappa * z)
    cdef double dv = 0.0
    cdef double g, nm, t, dn
    cdef int m
    for m in range(DRIVE_SUB_M):
        g = xs_gamma(st, gshape)
        nm = xs_normal(st)
        t = nm + sqrt(z / hm)
        z = hm * (t * t + 2.0 * g)
        dn = sqrt(kappa * z)
        dv = dv + hm * (1.0 / (d if d > fl else fl) + 1.0 / (dn if dn > fl else fl))
        d = dn
    z_io[0] = z
    return dv


def drive_epoch(
    double[::1] z not None,
    double[::1] v not None,
    double[:, ::1] gam not None,
    double[:, ::1] nor not None,
    double h,
    double kappa,
    double f_floor,
    double[:, ::1] w_path not None,
    double[:, ::1] v_path not None,
    double gshape,
    object seed,
    int64_t[::1] rep_glob not None,
    int64_t step0,
):
    cdef Py_ssize_t B = z.shape[0]
    cdef Py_ssize_t L = gam.shape[1]
    cdef uint64_t key0 = <uint64_t> ((int(seed) ^ 0x9E3779B97F4A7C15)
                                     & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t key1
    cdef XStream st
    cdef Py_ssize_t i, j
    cdef double zz, vv, d0, d1, s, t, z2, r0, r1, dv
    cdef double z_flag = DRIVE_SUB_Z * h
    with nogil:
        for i in range(B):
            zz = z[i]
            vv = v[i]
            d0 = sqrt(kappa * zz)
            w_path[i, 0] = vv - d0
            v_path[i, 0] = vv
            for j in range(L):
                if zz <= z_flag:
                    key1 = (((<uint64_t> rep_glob[i]) & <uint64_t> 0xFFFFFFFF) << 32) \
                        | ((<uint64_t> DRIVER_PT) << 20) \
                        | ((<uint64_t> (step0 + j)) & <uint64_t> 0xFFFFF)
                    xs_init(&st, key0, key1)
                    dv = _substep_gap(&st, &zz, h, kappa, gshape)
                    d1 = sqrt(kappa * zz)
                else:
                    s = sqrt(zz / h)
                    t = nor[i, j] + s
                    z2 = h * (2.0 * gam[i, j] + t * t)
                    d1 = sqrt(kappa * z2)
                    r0 = 1.0 / fmax(d0, f_floor)
                    r1 = 1.0 / fmax(d1, f_floor)
                    dv = h * (r0 + r1)
                    zz = z2
                vv = vv + dv
                w_path[i, j + 1] = vv - d1
                v_path[i, j + 1] = vv
                d0 = d1
            z[i] = zz
            v[i] = vv


cdef inline int64_t _record_one(
    double uu, double gg, double pp, double t_end,
    double[::1] thr_flat, int64_t nxt, int64_t end,
    double[::1] cr_t, double[::1] cr_u, double[::1] cr_gp, double[::1] cr_p,
) noexcept nogil:
    # Same crossing rule as the vector loop: walk descending thresholds
    # while p <= thr * g', stamping the grid-end time.
    while nxt < end and pp <= thr_flat[nxt] * gg:
        cr_t[nxt] = t_end
        cr_u[nxt] = uu
        cr_gp[nxt] = gg
        cr_p[nxt] = pp
        nxt = nxt + 1
    return nxt


cdef int _walk_window(
    XStream* st, double* p_io, double* gp_io, double* d_io, double* t_ev,
    double h, double t_base, double kappa, double gshape,
    double[::1] thr_flat, int64_t* nxt_io, int64_t end,
    double[::1] cr_t, double[::1] cr_u, double[::1] cr_gp, double[::1] cr_p,
    int allow_escape,
) noexcept nogil:
    # Outcome 0 = still walking, 1 = died, 3 = crossed every threshold.
    cdef double p = p_io[0]
    cdef double gp = gp_io[0]
    cdef double d = d_io[0]
    cdef double t_loc = 0.0
    cdef double esc_u = WALK_ESCAPE * sqrt(kappa * h)
    cdef int64_t nxt = nxt_io[0]
    cdef double z, tmp, zref, hl, g, nrm, tt, zn, dn, fl, dv
    cdef double u0, pm, um, pn, a
    while t_loc < h and (allow_escape == 0 or p + d < esc_u):
        z = d * d / kappa
        tmp = WALK_PINCH_FRAC * p
        zref = tmp * tmp / kappa
        hl = WALK_STEP_FRAC * (z if z > zref else zref)
        if t_loc + hl > h:
            hl = h - t_loc
        if hl <= 1e-300:
            break
        g = xs_gamma(st, gshape)
        nrm = xs_normal(st)
        tt = nrm + sqrt(z / hl)
        zn = hl * (tt * tt + 2.0 * g)
        dn = sqrt(kappa * zn)
        fl = 0.5 * sqrt(kappa * hl)
        dv = hl * (1.0 / (d if d > fl else fl) + 1.0 / (dn if dn > fl else fl))
        u0 = p + d
        pm = p / (1.0 + 0.5 * dv / u0)
        um = pm + 0.5 * (d + dn)
        pn = p / (1.0 + dv / um)
        a = hl / (um * um)
        gp = gp * (1.0 - a) / (1.0 + a)
        p = pn
        d = dn
        t_loc = t_loc + hl
        while nxt < end and p <= thr_flat[nxt] * gp:
            cr_t[nxt] = t_base + t_loc
            cr_u[nxt] = p + d
            cr_gp[nxt] = gp
            cr_p[nxt] = p
            nxt = nxt + 1
        if nxt >= end:
            p_io[0] = p
            gp_io[0] = gp
            d_io[0] = d
            t_ev[0] = t_base + t_loc
            nxt_io[0] = nxt
            return 3
        if p <= WALK_P_DEAD:
            p_io[0] = p
            gp_io[0] = gp
            d_io[0] = d
            t_ev[0] = t_base + t_loc
            nxt_io[0] = nxt
            return 1
    p_io[0] = p
    gp_io[0] = gp
    d_io[0] = d
    t_ev[0] = t_base + t_loc
    nxt_io[0] = nxt
    return 0


def track_epoch_pd(
    double[::1] p not None,
    double[::1] gp not None,
    int64_t[::1] rep not None,
    double[:, ::1] w_path not None,
    double[:, ::1] v_path not None,
    double h,
    double t0,
    double[::1] thr_flat not None,
    int64_t[::1] thr_next not None,
    int64_t[::1] thr_end not None,
    double[::1] cr_t not None,
    double[::1] cr_u not None,
    double[::1] cr_gp not None,
    double[::1] cr_p not None,
    int8_t[::1] status not None,
    double[::1] swallow_t not None,
    double[::1] snap_u not None,
    double[::1] snap_gp not None,
    double[::1] snap_p not None,
    double kappa,
    double gshape,
    object seed,
    int64_t[::1] rep_glob not None,
    int64_t[::1] pt_idx not None,
    int64_t step0,
    object in_walk,
    double[::1] walk_d not None,
    int allow_escape,
):
    cdef Py_ssize_t n = p.shape[0]
    if n == 0:
        return
    # np.bool_ and uint8 share a buffer layout; the view writes through.
    cdef uint8_t[::1] iw = np.asarray(in_walk).view(np.uint8)
    cdef Py_ssize_t L = w_path.shape[1] - 1
    cdef double enter_u = WALK_ENTER * sqrt(kappa * h)
    cdef double esc_u = WALK_ESCAPE * sqrt(kappa * h)
    cdef uint64_t key0 = <uint64_t> ((int(seed) ^ 0x9E3779B97F4A7C15)
                                     & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t key1
    cdef XStream st
    cdef Py_ssize_t i, j
    cdef int64_t r, nxt, end
    cdef double pp, gg, wd, t_end, t_base, d0, d1, dv, u_sh
    cdef double u0, pm, um, pn, a, ue, dwk, t_ev
    cdef bint walking
    cdef int outcome
    with nogil:
        for i in range(n):
            if status[i] != 0:
                continue
            pp = p[i]
            gg = gp[i]
            r = rep[i]
            nxt = thr_next[i]
            end = thr_end[i]
            wd = walk_d[i]
            for j in range(L):
                t_end = t0 + (j + 1) * h
                d0 = v_path[r, j] - w_path[r, j]
                d1 = v_path[r, j + 1] - w_path[r, j + 1]
                dv = v_path[r, j + 1] - v_path[r, j]
                u_sh = pp + d0
                if allow_escape != 0 and iw[i] and u_sh >= esc_u and pp + wd >= esc_u:
                    iw[i] = 0
                walking = iw[i] or (u_sh <= enter_u)
                if not walking:
                    u0 = pp + d0
                    pm = pp / (1.0 + 0.5 * dv / u0)
                    um = pm + 0.5 * (d0 + d1)
                    pn = pp / (1.0 + dv / um)
                    a = h / (um * um)
                    gg = gg * (1.0 - a) / (1.0 + a)
                    pp = pn
                    ue = pp + d1
                    snap_u[i] = ue
                    snap_gp[i] = gg
                    snap_p[i] = pp
                    nxt = _record_one(ue, gg, pp, t_end, thr_flat, nxt, end,
                                      cr_t, cr_u, cr_gp, cr_p)
                    if nxt >= end:
                        status[i] = 2
                        break
                else:
                    dwk = wd if iw[i] else d0
                    key1 = (((<uint64_t> rep_glob[i]) & <uint64_t> 0xFFFFFFFF) << 32) \
                        | (((<uint64_t> pt_idx[i]) & <uint64_t> 0xFFF) << 20) \
                        | ((<uint64_t> (step0 + j)) & <uint64_t> 0xFFFFF)
                    xs_init(&st, key0, key1)
                    t_base = t0 + j * h
                    outcome = _walk_window(
                        &st, &pp, &gg, &dwk, &t_ev, h, t_base, kappa, gshape,
                        thr_flat, &nxt, end, cr_t, cr_u, cr_gp, cr_p,
                        allow_escape)
                    snap_u[i] = pp + dwk
                    snap_gp[i] = gg
                    snap_p[i] = pp
                    if outcome == 0:
                        iw[i] = 1
                        wd = dwk
                    else:
                        iw[i] = 0
                        if outcome == 1:
                            status[i] = 1
                            swallow_t[i] = t_ev
                            break
                        else:
                            status[i] = 2
                            break
            p[i] = pp
            gp[i] = gg
            thr_next[i] = nxt
            walk_d[i] = wd
