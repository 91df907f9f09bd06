"""Compiled inner loops for the samplers.

Pyramid state is stored flat: level ``k`` occupies ``off[k]:off[k+1]`` of
``xs`` (pixel values) and ``codes`` (3x3 pattern code at every cell), with
``ns[k] x ms[k]`` cells in row-major order. Potentials are expanded to
512-entry tables per level (``vtab``) and data costs to one value per cell
(``dmap``), so every kernel is a plain table lookup.
"""
import numpy as np
from numba import njit

# spreads the 3 bits of a column slice to window bits 0, 3, 6
_SPREAD = np.array([0, 1, 8, 9, 64, 65, 72, 73], dtype=np.int64)

NEG_INF = -np.inf


@njit(cache=True, nogil=True)
def flip_pixel(i, j, xs, codes, off, ns, ms, vtab, dmap, vq, dmq, use_q):
    """Flip level-0 pixel (i, j), propagate through the pyramid.

    Returns the energy change under the target tables and, when ``use_q``,
    under the single-scale proposal tables (level 0 only).
    """
    K = ns.shape[0]
    dp = 0.0
    dq = 0.0
    k = 0
    while True:
        n = ns[k]
        m = ms[k]
        o = off[k]
        idx = o + i * m + j
        new = 1 - xs[idx]
        xs[idx] = new
        if new == 1:
            dp += dmap[idx]
            if use_q and k == 0:
                dq += dmq[i * m + j]
        else:
            dp -= dmap[idx]
            if use_q and k == 0:
                dq -= dmq[i * m + j]
        for dr in range(-1, 2):
            ci = i - dr
            if ci < 0 or ci >= n:
                continue
            for dc in range(-1, 2):
                cj = j - dc
                if cj < 0 or cj >= m:
                    continue
                cidx = o + ci * m + cj
                c_old = codes[cidx]
                c_new = c_old ^ (1 << (3 * (dr + 1) + (dc + 1)))
                codes[cidx] = c_new
                dp += vtab[k, c_new] - vtab[k, c_old]
                if use_q and k == 0:
                    dq += vq[c_new] - vq[c_old]
        if k + 1 == K:
            break
        pi = i // 2
        pj = j // 2
        v = 0
        for a in range(2):
            ii = 2 * pi + a
            if ii >= n:
                break
            for b in range(2):
                jj = 2 * pj + b
                if jj < m:
                    v |= xs[o + ii * m + jj]
        if v == xs[off[k + 1] + pi * ms[k + 1] + pj]:
            break
        i = pi
        j = pj
        k += 1
    return dp, dq


@njit(cache=True, nogil=True)
def fill_codes(xs, codes, off, ns, ms):
    K = ns.shape[0]
    for k in range(K):
        n = ns[k]
        m = ms[k]
        o = off[k]
        for i in range(n):
            for j in range(m):
                c = 0
                for dr in range(-1, 2):
                    r = i + dr
                    if r < 0 or r >= n:
                        continue
                    for dc in range(-1, 2):
                        s = j + dc
                        if s < 0 or s >= m:
                            continue
                        if xs[o + r * m + s]:
                            c |= 1 << (3 * (dr + 1) + (dc + 1))
                codes[o + i * m + j] = c


@njit(cache=True, nogil=True)
def total_energy(xs, codes, off, ns, ms, vtab, dmap):
    e = 0.0
    for k in range(ns.shape[0]):
        for idx in range(off[k], off[k + 1]):
            e += vtab[k, codes[idx]]
            if xs[idx]:
                e += dmap[idx]
    return e


# --- band sampler -------------------------------------------------------------
#
# Orientation is handled by the caller: ``xb``/``db`` are 2-D views in which
# the band is horizontal (rows r0..r0+h-1) and ``vb`` is the proposal table
# re-indexed for that orientation.  Column j of the band has extended state
#   ext_j = ctx[j] | (z_j << 2)
# whose bit t holds row r0 - 2 + t, t = 0..h+3.  Windows centred on rows
# r0-1..r0+h (t = 1..h+2) touch the band; each is assigned to the factor
# of its centre column.


@njit(cache=True, nogil=True)
def band_context(xb, r0, h):
    n, m = xb.shape
    ctx = np.zeros(m, dtype=np.int64)
    for j in range(m):
        c = 0
        for t in range(h + 4):
            if 2 <= t < h + 2:
                continue
            r = r0 - 2 + t
            if 0 <= r < n and xb[r, j]:
                c |= 1 << t
        ctx[j] = c
    return ctx


@njit(cache=True, nogil=True)
def band_column_costs(db, r0, h):
    """Data cost of every column state: ``dcol[j, z]``."""
    n, m = db.shape
    S = 1 << h
    dcol = np.zeros((m, S))
    for j in range(m):
        for z in range(S):
            s = 0.0
            for r in range(h):
                if (z >> r) & 1:
                    s += db[r0 + r, j]
            dcol[j, z] = s
    return dcol


@njit(cache=True, nogil=True)
def _psi_entry(j, a, b, c, ctx, dcol, vb, t_lo, t_hi, m):
    """Log factor of column j for column states (z_{j-1}, z_j, z_{j+1}) = (a, b, c)."""
    A = (ctx[j - 1] | (a << 2)) if j > 0 else 0
    B = ctx[j] | (b << 2)
    C = (ctx[j + 1] | (c << 2)) if j < m - 1 else 0
    s = -dcol[j, b]
    for t in range(t_lo, t_hi):
        code = (_SPREAD[(A >> (t - 1)) & 7] | (_SPREAD[(B >> (t - 1)) & 7] << 1)
                | (_SPREAD[(C >> (t - 1)) & 7] << 2))
        s -= vb[code]
    return s


@njit(cache=True, nogil=True)
def _psi_column(j, ctx, dcol, vb, t_lo, t_hi, m, S, psi):
    """Fill ``psi[a, b, c]`` for column j; impossible boundary states get -inf."""
    a_hi = S if j > 0 else 1
    c_hi = S if j < m - 1 else 1
    nt = t_hi - t_lo
    pab = np.empty(nt, dtype=np.int64)
    for a in range(S):
        for b in range(S):
            for c in range(S):
                psi[a, b, c] = NEG_INF
    for a in range(a_hi):
        A = (ctx[j - 1] | (a << 2)) if j > 0 else 0
        for b in range(S):
            B = ctx[j] | (b << 2)
            for q in range(nt):
                t = t_lo + q
                pab[q] = _SPREAD[(A >> (t - 1)) & 7] | (_SPREAD[(B >> (t - 1)) & 7] << 1)
            base = -dcol[j, b]
            for c in range(c_hi):
                C = (ctx[j + 1] | (c << 2)) if j < m - 1 else 0
                s = base
                for q in range(nt):
                    t = t_lo + q
                    s -= vb[pab[q] | (_SPREAD[(C >> (t - 1)) & 7] << 2)]
                psi[a, b, c] = s


@njit(cache=True, nogil=True)
def _psi_column_exp(j, ctx, ed, ev, t_lo, t_hi, m, S, out):
    """Fill ``out[a, b, c]`` with exp(psi) up to a per-column constant, as a product of factors."""
    a_hi = S if j > 0 else 1
    c_hi = S if j < m - 1 else 1
    nt = t_hi - t_lo
    pab = np.empty(nt, dtype=np.int64)
    sc = np.empty((S, nt), dtype=np.int64)
    for c in range(S):
        C = (ctx[j + 1] | (c << 2)) if j < m - 1 else 0
        for q in range(nt):
            sc[c, q] = _SPREAD[(C >> (t_lo + q - 1)) & 7] << 2
    for a in range(S):
        for b in range(S):
            for c in range(S):
                out[a, b, c] = 0.0
    for a in range(a_hi):
        A = (ctx[j - 1] | (a << 2)) if j > 0 else 0
        for b in range(S):
            B = ctx[j] | (b << 2)
            for q in range(nt):
                t = t_lo + q
                pab[q] = _SPREAD[(A >> (t - 1)) & 7] | (_SPREAD[(B >> (t - 1)) & 7] << 1)
            base = ed[b]
            for c in range(c_hi):
                s = base
                for q in range(nt):
                    s *= ev[pab[q] | sc[c, q]]
                out[a, b, c] = s


# products of up to nt table factors stay above exp(-_SAFE_RANGE)
_SAFE_RANGE = 700.0


@njit(cache=True, nogil=True)
def band_forward(xb, db, vb, r0, h, alpha):
    """Forward pass over column-state pairs; returns (log normaliser, ctx, dcol).

    ``alpha[j, a, b]`` is the log-weight of (z_{j-1}, z_j) = (a, b) summed
    over z_0..z_{j-2} and all factors of columns < j. Each step runs in the
    linear domain after subtracting the column maximum.
    """
    n, m = xb.shape
    S = 1 << h
    ctx = band_context(xb, r0, h)
    dcol = band_column_costs(db, r0, h)
    t_lo = max(1, 2 - r0)
    t_hi = min(h + 3, n - r0 + 2)
    nt = t_hi - t_lo
    vmin = vb.min()
    vrange = vb.max() - vmin
    ev = np.exp(-(vb - vmin))
    ed = np.empty(S)
    psi = np.empty((S, S, S))
    A = np.empty((S, S))
    for a in range(S):
        for b in range(S):
            alpha[0, a, b] = 0.0 if a == 0 else NEG_INF
    for j in range(m):
        dmin = dcol[j].min()
        if vrange * nt + (dcol[j].max() - dmin) < _SAFE_RANGE:
            for b in range(S):
                ed[b] = np.exp(-(dcol[j, b] - dmin))
            _psi_column_exp(j, ctx, ed, ev, t_lo, t_hi, m, S, psi)
            pshift = -dmin - nt * vmin
        else:
            _psi_column(j, ctx, dcol, vb, t_lo, t_hi, m, S, psi)
            pshift = NEG_INF
            for a in range(S):
                for b in range(S):
                    for c in range(S):
                        if psi[a, b, c] > pshift:
                            pshift = psi[a, b, c]
            for a in range(S):
                for b in range(S):
                    for c in range(S):
                        psi[a, b, c] = np.exp(psi[a, b, c] - pshift)
        amax = NEG_INF
        for a in range(S):
            for b in range(S):
                if alpha[j, a, b] > amax:
                    amax = alpha[j, a, b]
        for a in range(S):
            for b in range(S):
                A[a, b] = np.exp(alpha[j, a, b] - amax)
        shift = amax + pshift
        if j == m - 1:
            acc = 0.0
            for a in range(S):
                for b in range(S):
                    acc += A[a, b] * psi[a, b, 0]
            return np.log(acc) + shift, ctx, dcol
        for b in range(S):
            for c in range(S):
                acc = 0.0
                for a in range(S):
                    acc += A[a, b] * psi[a, b, c]
                alpha[j + 1, b, c] = np.log(acc) + shift if acc > 0.0 else NEG_INF
    return NEG_INF, ctx, dcol


@njit(cache=True, nogil=True)
def _draw(logw, u):
    """Index drawn from unnormalised log-weights using one uniform ``u``."""
    mx = NEG_INF
    for i in range(logw.shape[0]):
        if logw[i] > mx:
            mx = logw[i]
    tot = 0.0
    for i in range(logw.shape[0]):
        tot += np.exp(logw[i] - mx)
    target = u * tot
    acc = 0.0
    last = 0
    for i in range(logw.shape[0]):
        if logw[i] == NEG_INF:
            continue
        acc += np.exp(logw[i] - mx)
        last = i
        if target < acc:
            return i
    return last


@njit(cache=True, nogil=True)
def band_backward(alpha, ctx, dcol, vb, r0, h, n, u, z):
    """Backward sample of column states into ``z`` using uniforms ``u[0:m]``."""
    m = alpha.shape[0]
    S = 1 << h
    t_lo = max(1, 2 - r0)
    t_hi = min(h + 3, n - r0 + 2)
    pair = np.empty(S * S)
    for a in range(S):
        for b in range(S):
            al = alpha[m - 1, a, b]
            if al == NEG_INF:
                pair[a * S + b] = NEG_INF
            else:
                pair[a * S + b] = al + _psi_entry(m - 1, a, b, 0, ctx, dcol, vb, t_lo, t_hi, m)
    k = _draw(pair, u[0])
    z[m - 1] = k % S
    if m == 1:
        return
    z[m - 2] = k // S
    single = np.empty(S)
    for j in range(m - 2, 0, -1):
        b = z[j]
        c = z[j + 1]
        for a in range(S):
            al = alpha[j, a, b]
            if al == NEG_INF:
                single[a] = NEG_INF
            else:
                single[a] = al + _psi_entry(j, a, b, c, ctx, dcol, vb, t_lo, t_hi, m)
        z[j - 1] = _draw(single, u[m - 1 - j])


@njit(cache=True, nogil=True)
def band_log_weight(z, ctx, dcol, vb, r0, h, n):
    """Unnormalised log-probability of a band configuration (sum of factors)."""
    m = z.shape[0]
    t_lo = max(1, 2 - r0)
    t_hi = min(h + 3, n - r0 + 2)
    s = 0.0
    for j in range(m):
        a = z[j - 1] if j > 0 else 0
        c = z[j + 1] if j < m - 1 else 0
        s += _psi_entry(j, a, z[j], c, ctx, dcol, vb, t_lo, t_hi, m)
    return s


@njit(cache=True, nogil=True)
def mh_band(xs, codes, off, ns, ms, vtab, dmap, vq, dmq,
            alpha, ctx, dcol, vb, r0, h, transposed, uniforms, accum):
    """Run Metropolis-Hastings proposals from a prepared band table.

    ``uniforms`` has shape (P, m + 1): m draws for the backward pass and one
    for the accept test. Pixel coordinates are mapped back to the stored
    orientation when ``transposed``. If ``accum`` is nonempty the level-0
    image is added to it after every proposal.

    Returns (accepted count, energy change under the target).
    """
    P = uniforms.shape[0]
    m = alpha.shape[0]
    n0 = ns[0]
    m0 = ms[0]
    nb = m0 if transposed else n0  # band-oriented row count
    z = np.empty(m, dtype=np.int64)
    fr = np.empty(m * h, dtype=np.int64)
    fc = np.empty(m * h, dtype=np.int64)
    accepted = 0
    de_total = 0.0
    track = accum.shape[0] > 0
    for p in range(P):
        band_backward(alpha, ctx, dcol, vb, r0, h, nb, uniforms[p, :m], z)
        nf = 0
        dp = 0.0
        dq = 0.0
        for j in range(m):
            for r in range(h):
                if transposed:
                    pi = j
                    pj = r0 + r
                else:
                    pi = r0 + r
                    pj = j
                cur = xs[pi * m0 + pj]
                if cur != ((z[j] >> r) & 1):
                    a, b = flip_pixel(pi, pj, xs, codes, off, ns, ms, vtab, dmap, vq, dmq, True)
                    dp += a
                    dq += b
                    fr[nf] = pi
                    fc[nf] = pj
                    nf += 1
        log_ratio = dq - dp
        if log_ratio >= 0.0 or uniforms[p, m] < np.exp(log_ratio):
            accepted += 1
            de_total += dp
        else:
            for f in range(nf - 1, -1, -1):
                flip_pixel(fr[f], fc[f], xs, codes, off, ns, ms, vtab, dmap, vq, dmq, False)
        if track:
            for idx in range(n0 * m0):
                accum[idx] += xs[idx]
    return accepted, de_total


@njit(cache=True, nogil=True)
def gibbs_block(rows, cols, u, xs, codes, off, ns, ms, vtab, dmap):
    """Exact resample of a pixel block by Gray-code enumeration.

    Returns (chosen XOR mask, energy change, log-weights of all masks).
    """
    b = rows.shape[0]
    N = 1 << b
    logw = np.empty(N)
    dummy_v = np.zeros(1)
    logw[0] = 0.0
    e = 0.0
    g_prev = 0
    for t in range(1, N):
        g = t ^ (t >> 1)
        bit = 0
        d = g ^ g_prev
        while (d >> bit) & 1 == 0:
            bit += 1
        dp, _ = flip_pixel(rows[bit], cols[bit], xs, codes, off, ns, ms, vtab, dmap,
                           dummy_v, dummy_v, False)
        e += dp
        logw[g] = -e
        g_prev = g
    s = _draw(logw, u)
    d = g_prev ^ s
    for bit in range(b):
        if (d >> bit) & 1:
            flip_pixel(rows[bit], cols[bit], xs, codes, off, ns, ms, vtab, dmap,
                       dummy_v, dummy_v, False)
    return s, -logw[s], logw
