"""Compiled inner loops for window calibration.

The calibration of one window evaluates the profiled LPPLS cost a few
thousand times, and a full scan calibrates ~10^5 windows, so everything on
that path lives here in nopython mode:

* ``vlog``, ``vexp``, ``vsincos``: branch-free elementwise log/exp/sin/cos
  (fdlibm reductions and polynomials) that LLVM can vectorise.  numba's
  libm calls are scalar and ~3x slower.  Accuracy is ~1 ulp for log/exp and
  ~1e-14 absolute for sincos at the arguments seen here.
* ``lppls_cost``: least squares for (A, B, C1, C2) at fixed (tc, m, omega).
  The constant column is projected out by centring, then modified
  Gram-Schmidt runs on the augmented matrix [f g h | y].  The 1-norm
  condition number of the column-equilibrated triangular factor is returned
  alongside the residual sum of squares.
* ``cmaes_run``: one CMA-ES run on the unit cube with reflection at the
  faces.  Random draws are supplied by the caller so the run is a pure
  function of its inputs.
* ``lomb_scan``: normalised Lomb periodogram on an evenly spaced frequency
  grid, with cos/sin of each sample advanced by complex rotation instead of
  being recomputed per frequency.

``error_model="numpy"`` matters: with the default Python error model every
division carries a zero check and the loops do not vectorise.
"""
import math

import numba as nb
import numpy as np

_FM = {"reassoc", "contract", "nsz"}

LN2_HI = 6.93147180369123816490e-01
LN2_LO = 1.90821492927058770002e-10
INV_LN2 = 1.44269504088896338700e00
SQRT2 = 1.4142135623730951
_LG1 = 6.666666666666735130e-01
_LG2 = 3.999999999940941908e-01
_LG3 = 2.857142874366239149e-01
_LG4 = 2.222219843214978396e-01
_LG5 = 1.818357216161805012e-01
_LG6 = 1.531383769920937332e-01
_LG7 = 1.479819860511658591e-01
_P1 = 1.66666666666666019037e-01
_P2 = -2.77777777770155933842e-03
_P3 = 6.61375632143793436117e-05
_P4 = -1.65339022054652515390e-06
_P5 = 4.13813679705723846039e-08
PIO2_HI = 1.5707963267341256
PIO2_LO = 6.077100506506192e-11
PIO2_LO2 = 2.0222662487959506e-21
TWO_OVER_PI = 0.6366197723675814
_S1 = -1.66666666666666324348e-01
_S2 = 8.33333333332248946124e-03
_S3 = -1.98412698298579493134e-04
_S4 = 2.75573137070700676789e-06
_S5 = -2.50507602534068634195e-08
_S6 = 1.58969099521155010221e-10
_C1 = 4.16666666666666019037e-02
_C2 = -1.38888888888741095749e-03
_C3 = 2.48015872894767294178e-05
_C4 = -2.75573143513906633035e-07
_C5 = 2.08757232129817482790e-09
_C6 = -1.13596475577881948265e-11

# distance to the critical time never drops below this (days)
MIN_DT = 1e-9
N_WORK = 11


@nb.njit(error_model="numpy", cache=True)
def vlog(x, mant, ex, out):
    """out = ln(x) for positive normal x; mant, ex are scratch."""
    xb = x.view(np.int64)
    mb = mant.view(np.int64)
    for i in range(x.shape[0]):
        b = xb[i]
        ex[i] = ((b >> 52) & 0x7FF) - 1023
        mb[i] = (b & 0x000FFFFFFFFFFFFF) | 0x3FF0000000000000
    for i in range(x.shape[0]):
        mt = mant[i]
        big = 1.0 if mt > SQRT2 else 0.0
        mt = mt * (1.0 - 0.5 * big)
        k = ex[i] + big
        f = mt - 1.0
        s = f / (2.0 + f)
        z = s * s
        w = z * z
        r = z * (_LG1 + w * (_LG3 + w * (_LG5 + w * _LG7))) + w * (_LG2 + w * (_LG4 + w * _LG6))
        hfsq = 0.5 * f * f
        out[i] = k * LN2_HI - ((hfsq - (s * (hfsq + r) + k * LN2_LO)) - f)


@nb.njit(error_model="numpy", cache=True)
def vexp(x, kk, out):
    """out = exp(x) for |x| < 700; kk is int64 scratch."""
    ob = out.view(np.int64)
    for i in range(x.shape[0]):
        y = x[i]
        k = np.floor(y * INV_LN2 + 0.5)
        hi = y - k * LN2_HI
        lo = k * LN2_LO
        r = hi - lo
        t = r * r
        c = r - t * (_P1 + t * (_P2 + t * (_P3 + t * (_P4 + t * _P5))))
        out[i] = 1.0 - ((lo - (r * c) / (2.0 - c)) - hi)
        kk[i] = np.int64(k) << 52
    for i in range(x.shape[0]):
        ob[i] += kk[i]


@nb.njit(error_model="numpy", cache=True)
def vsincos(x, out_sin, out_cos):
    for i in range(x.shape[0]):
        xi = x[i]
        k = np.floor(xi * TWO_OVER_PI + 0.5)
        r = ((xi - k * PIO2_HI) - k * PIO2_LO) - k * PIO2_LO2
        z = r * r
        s = r + r * z * (_S1 + z * (_S2 + z * (_S3 + z * (_S4 + z * (_S5 + z * _S6)))))
        c = 1.0 - 0.5 * z + z * z * (_C1 + z * (_C2 + z * (_C3 + z * (_C4 + z * (_C5 + z * _C6)))))
        # quadrant selection without branches
        q = k - 4.0 * np.floor(k * 0.25)
        odd = q - 2.0 * np.floor(q * 0.5)
        hi = np.floor(q * 0.5)
        s1 = odd * c + (1.0 - odd) * s
        c1 = odd * s + (1.0 - odd) * c
        negc = hi * (1.0 - odd) + odd * (1.0 - hi)
        out_sin[i] = s1 * (1.0 - 2.0 * hi)
        out_cos[i] = c1 * (1.0 - 2.0 * negc)


@nb.njit(error_model="numpy", fastmath=_FM, cache=True)
def _solve_centered(y, f, g, h, r, coef):
    n = y.shape[0]
    sf = 0.0
    sg = 0.0
    sh = 0.0
    sy = 0.0
    for i in range(n):
        sf += f[i]
        sg += g[i]
        sh += h[i]
        sy += y[i]
    mf = sf / n
    mg = sg / n
    mh = sh / n
    my = sy / n
    ff = 0.0
    gg = 0.0
    hh = 0.0
    for i in range(n):
        a = f[i] - mf
        b = g[i] - mg
        c = h[i] - mh
        f[i] = a
        g[i] = b
        h[i] = c
        r[i] = y[i] - my
        ff += a * a
        gg += b * b
        hh += c * c
    if not (ff > 0.0):
        return np.inf, np.inf
    fg = 0.0
    fh = 0.0
    fy = 0.0
    for i in range(n):
        fg += f[i] * g[i]
        fh += f[i] * h[i]
        fy += f[i] * r[i]
    q1g = fg / ff
    q1h = fh / ff
    q1y = fy / ff
    g2 = 0.0
    gh = 0.0
    gy = 0.0
    for i in range(n):
        fi = f[i]
        b = g[i] - q1g * fi
        c = h[i] - q1h * fi
        d = r[i] - q1y * fi
        g[i] = b
        h[i] = c
        r[i] = d
        g2 += b * b
        gh += b * c
        gy += b * d
    if not (g2 > 0.0):
        return np.inf, np.inf
    q2h = gh / g2
    q2y = gy / g2
    h2 = 0.0
    hy = 0.0
    for i in range(n):
        gi = g[i]
        c = h[i] - q2h * gi
        d = r[i] - q2y * gi
        h[i] = c
        r[i] = d
        h2 += c * c
        hy += c * d
    if not (h2 > 0.0):
        return np.inf, np.inf
    q3y = hy / h2
    rss = 0.0
    for i in range(n):
        d = r[i] - q3y * h[i]
        r[i] = d
        rss += d * d

    # R of [1 f g h] with unit-norm columns; 1-norm condition number
    s0 = math.sqrt(n)
    s1 = math.sqrt(ff + n * mf * mf)
    s2 = math.sqrt(gg + n * mg * mg)
    s3 = math.sqrt(hh + n * mh * mh)
    r11 = math.sqrt(ff)
    r22 = math.sqrt(g2)
    R = np.zeros((4, 4))
    R[0, 0] = s0 / s0
    R[0, 1] = s0 * mf / s1
    R[0, 2] = s0 * mg / s2
    R[0, 3] = s0 * mh / s3
    R[1, 1] = r11 / s1
    R[1, 2] = fg / r11 / s2
    R[1, 3] = fh / r11 / s3
    R[2, 2] = r22 / s2
    R[2, 3] = gh / r22 / s3
    R[3, 3] = math.sqrt(h2) / s3
    Ri = np.zeros((4, 4))
    for k in range(3, -1, -1):
        Ri[k, k] = 1.0 / R[k, k]
        for j in range(k + 1, 4):
            s = 0.0
            for l in range(k + 1, j + 1):
                s += R[k, l] * Ri[l, j]
            Ri[k, j] = -s / R[k, k]
    n1 = 0.0
    n2 = 0.0
    for j in range(4):
        a = 0.0
        b = 0.0
        for k in range(j + 1):
            a += abs(R[k, j])
            b += abs(Ri[k, j])
        n1 = max(n1, a)
        n2 = max(n2, b)

    c2 = q3y
    c1 = q2y - q2h * c2
    bb = q1y - q1g * c1 - q1h * c2
    coef[0] = my - bb * mf - c1 * mg - c2 * mh
    coef[1] = bb
    coef[2] = c1
    coef[3] = c2
    return rss, n1 * n2


@nb.njit(error_model="numpy", cache=True)
def lppls_cost(y, tc, m, w, work, coef):
    """Profiled LPPLS cost on sample times 0..n-1.

    Returns (rss, cond1) and writes (A, B, C1, C2) into ``coef``.  ``work``
    is an (N_WORK, n) scratch array.  rss is inf when a basis column
    vanishes.
    """
    n = y.shape[0]
    d = work[0]
    lg = work[1]
    mant = work[2]
    ex = work[3]
    ml = work[4]
    wl = work[5]
    r = work[6]
    f = work[7]
    g = work[8]
    h = work[9]
    kk = work[10].view(np.int64)
    for i in range(n):
        di = tc - i
        d[i] = di if di > MIN_DT else MIN_DT
    vlog(d, mant, ex, lg)
    for i in range(n):
        ml[i] = m * lg[i]
        wl[i] = w * lg[i]
    vexp(ml, kk, f)
    vsincos(wl, h, g)
    for i in range(n):
        fi = f[i]
        g[i] *= fi
        h[i] *= fi
    return _solve_centered(y, f, g, h, r, coef)


@nb.njit(error_model="numpy", cache=True)
def damping_violation(m, w, b, c1, c2, damping_min):
    """Relative shortfall of m|B| / (omega sqrt(C1^2 + C2^2)) below damping_min."""
    num = m * abs(b)
    den = w * math.sqrt(c1 * c1 + c2 * c2)
    if den == 0.0:
        return 0.0 if num > 0.0 else 1.0
    ratio = num / den
    if ratio >= damping_min:
        return 0.0
    return (damping_min - ratio) / damping_min


@nb.njit(error_model="numpy", cache=True)
def _reflect(x):
    x = x - 2.0 * np.floor(x * 0.5)
    if x > 1.0:
        x = 2.0 - x
    return x


@nb.njit(error_model="numpy", cache=True)
def _evaluate(y, u, lo, span, damping_min, penalty_scale, cond_max, work, coef):
    tc = lo[0] + u[0] * span[0]
    m = lo[1] + u[1] * span[1]
    w = lo[2] + u[2] * span[2]
    rss, cond = lppls_cost(y, tc, m, w, work, coef)
    if not (rss < np.inf) or not (cond <= cond_max):
        return np.inf, np.inf, 1.0
    v = damping_violation(m, w, coef[1], coef[2], coef[3], damping_min)
    return rss + penalty_scale * v, rss, v


@nb.njit(error_model="numpy", cache=True)
def cmaes_run(y, lo, span, damping_min, penalty_scale, cond_max, z, sigma0,
              max_evals, tol_x, tol_fun, best_u, best_coef, trace):
    """One CMA-ES run minimising rss + penalty over the unit cube.

    ``z`` holds standard normals of shape (generations, lambda, 3).  The
    best feasible (zero-violation) candidate seen is written to ``best_u`` /
    ``best_coef``; ``trace[g]`` is the best feasible rss after generation g.
    Returns (best feasible rss or inf, evaluations used, generations run).
    """
    N = 3
    n = y.shape[0]
    lam = z.shape[1]
    mu = lam // 2
    weights = np.empty(mu)
    for i in range(mu):
        weights[i] = math.log((lam + 1) / 2.0) - math.log(i + 1.0)
    weights /= weights.sum()
    mueff = 1.0 / np.sum(weights * weights)
    cc = (4.0 + mueff / N) / (N + 4.0 + 2.0 * mueff / N)
    cs = (mueff + 2.0) / (N + mueff + 5.0)
    c1 = 2.0 / ((N + 1.3) ** 2 + mueff)
    cmu = min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((N + 2.0) ** 2 + mueff))
    damps = 1.0 + 2.0 * max(0.0, math.sqrt((mueff - 1.0) / (N + 1.0)) - 1.0) + cs
    chin = math.sqrt(N) * (1.0 - 1.0 / (4.0 * N) + 1.0 / (21.0 * N * N))

    work = np.empty((N_WORK, n))
    coef = np.empty(4)
    mean = np.full(N, 0.5)
    sigma = sigma0
    C = np.eye(N)
    B = np.eye(N)
    D = np.ones(N)
    pc = np.zeros(N)
    ps = np.zeros(N)
    X = np.empty((lam, N))
    fit = np.empty(lam)
    u = np.empty(N)
    hist = np.full(10, np.inf)
    best_rss = np.inf
    evals = 0
    gen = 0
    n_gen = z.shape[0]
    while gen < n_gen and evals + lam <= max_evals:
        for k in range(lam):
            bd = D * z[gen, k]
            for i in range(N):
                s = 0.0
                for j in range(N):
                    s += B[i, j] * bd[j]
                u[i] = _reflect(mean[i] + sigma * s)
                X[k, i] = u[i]
            f, rss, viol = _evaluate(y, u, lo, span, damping_min, penalty_scale,
                                     cond_max, work, coef)
            fit[k] = f
            evals += 1
            if viol == 0.0 and rss < np.inf:
                if rss < best_rss or (rss == best_rss and u[0] < best_u[0]):
                    best_rss = rss
                    best_u[:] = u
                    best_coef[:] = coef
        trace[gen] = best_rss

        order = np.argsort(fit, kind="mergesort")
        old = mean.copy()
        mean = np.zeros(N)
        for i in range(mu):
            mean += weights[i] * X[order[i]]
        yw = (mean - old) / sigma
        # C^{-1/2} yw = B D^{-1} B^T yw
        t = np.empty(N)
        for j in range(N):
            s = 0.0
            for i in range(N):
                s += B[i, j] * yw[i]
            t[j] = s / D[j]
        bt = np.zeros(N)
        for i in range(N):
            for j in range(N):
                bt[i] += B[i, j] * t[j]
        ps = (1.0 - cs) * ps + math.sqrt(cs * (2.0 - cs) * mueff) * bt
        nps = math.sqrt(np.sum(ps * ps))
        hs = 1.0 if nps / math.sqrt(1.0 - (1.0 - cs) ** (2.0 * (gen + 1))) < (1.4 + 2.0 / (N + 1.0)) * chin else 0.0
        pc = (1.0 - cc) * pc + hs * math.sqrt(cc * (2.0 - cc) * mueff) * yw
        rank_mu = np.zeros((N, N))
        for i in range(mu):
            yi = (X[order[i]] - old) / sigma
            rank_mu += weights[i] * np.outer(yi, yi)
        C = ((1.0 - c1 - cmu + (1.0 - hs) * c1 * cc * (2.0 - cc)) * C
             + c1 * np.outer(pc, pc) + cmu * rank_mu)
        sigma *= math.exp((cs / damps) * (nps / chin - 1.0))
        if sigma > 1.0:
            sigma = 1.0
        C = 0.5 * (C + C.T)
        ev, B = np.linalg.eigh(C)
        for i in range(N):
            D[i] = math.sqrt(ev[i]) if ev[i] > 1e-300 else 1e-150

        gen += 1
        # stopping rules: step size, and stagnation of the best fitness
        hist[gen % 10] = fit[order[0]]
        if sigma * D.max() < tol_x:
            break
        if gen >= 10:
            lo_f = min(hist.min(), fit.min())
            hi_f = max(hist.max(), fit[order[lam - 1]])
            if hi_f - lo_f <= tol_fun:
                break
    for g in range(gen, trace.shape[0]):
        trace[g] = best_rss
    return best_rss, evals, gen


@nb.njit(error_model="numpy", fastmath=_FM, cache=True)
def lomb_scan(x, y, f0, df, nf, power):
    """Normalised Lomb power at frequencies f0 + k df, k < nf (cycles per unit x).

    ``y`` must already be centred; powers are divided by its sample variance
    (ddof=1).  Writes ``power`` and returns the index of the largest value.
    """
    n = x.shape[0]
    var = 0.0
    for i in range(n):
        var += y[i] * y[i]
    var /= n - 1
    c = np.empty(n)
    s = np.empty(n)
    rc = np.empty(n)
    rs = np.empty(n)
    w0 = 2.0 * math.pi * f0
    dw = 2.0 * math.pi * df
    for i in range(n):
        c[i] = math.cos(w0 * x[i])
        s[i] = math.sin(w0 * x[i])
        rc[i] = math.cos(dw * x[i])
        rs[i] = math.sin(dw * x[i])
    best = 0
    for k in range(nf):
        if k > 0 and k % 64 == 0:
            # refresh to stop rounding drift in the rotation
            w = w0 + k * dw
            for i in range(n):
                c[i] = math.cos(w * x[i])
                s[i] = math.sin(w * x[i])
        s2 = 0.0
        c2 = 0.0
        for i in range(n):
            s2 += 2.0 * s[i] * c[i]
            c2 += (c[i] - s[i]) * (c[i] + s[i])
        wtau = 0.5 * math.atan2(s2, c2)
        ct = math.cos(wtau)
        st = math.sin(wtau)
        scc = 0.0
        sss = 0.0
        syc = 0.0
        sys_ = 0.0
        for i in range(n):
            cc = c[i] * ct + s[i] * st
            ss = s[i] * ct - c[i] * st
            scc += cc * cc
            sss += ss * ss
            syc += y[i] * cc
            sys_ += y[i] * ss
        pk = 0.0
        if scc > 0.0:
            pk += syc * syc / scc
        if sss > 0.0:
            pk += sys_ * sys_ / sss
        power[k] = 0.5 * pk / var
        if power[k] > power[best]:
            best = k
        for i in range(n):
            cn = c[i] * rc[i] - s[i] * rs[i]
            s[i] = s[i] * rc[i] + c[i] * rs[i]
            c[i] = cn
    return best
