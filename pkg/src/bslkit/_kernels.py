"""Hot simulation kernels with numba and pure-numpy implementations.

The numba versions are used when numba imports cleanly, unless the
environment variable ``BSLKIT_NO_NUMBA`` is set to a non-empty value other
than ``0``. Both paths take the same pre-drawn random inputs, so they agree
to floating-point rounding for a given random stream.

Toad summary status codes: 0 ok, 1 no non-return displacements at some lag,
2 a non-positive gap between adjacent deciles.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("BSLKIT_NO_NUMBA", "")
USE_NUMBA = HAVE_NUMBA and _flag in ("", "0")
BACKEND = "numba" if USE_NUMBA else "numpy"

_QUANTILE_PROBS = np.linspace(0.0, 1.0, 11)


# --- MA(2) autocovariances -------------------------------------------------

def ma2_autocov_numpy(innov, theta1, theta2, n_lags):
    """Sample autocovariances (divisor n) of MA(2) series built from ``innov``.

    ``innov`` has shape (m, n + 2); column 0 is z_{-1}, column 1 is z_0.
    """
    y = innov[:, 2:] + theta1 * innov[:, 1:-1] + theta2 * innov[:, :-2]
    n = y.shape[1]
    yc = y - y.mean(axis=1, keepdims=True)
    out = np.empty((y.shape[0], n_lags))
    for k in range(n_lags):
        out[:, k] = np.einsum("ij,ij->i", yc[:, k:], yc[:, : n - k]) / n
    return out


def _ma2_autocov_loops(innov, theta1, theta2, n_lags):
    m, n2 = innov.shape
    n = n2 - 2
    out = np.empty((m, n_lags))
    y = np.empty(n)
    for r in range(m):
        s = 0.0
        for t in range(n):
            v = innov[r, t + 2] + theta1 * innov[r, t + 1] + theta2 * innov[r, t]
            y[t] = v
            s += v
        mu = s / n
        for t in range(n):
            y[t] -= mu
        for k in range(n_lags):
            acc = 0.0
            for t in range(k, n):
                acc += y[t] * y[t - k]
            out[r, k] = acc / n
    return out


# --- toad movement model ---------------------------------------------------

def stable_transform(phi, w, alpha, delta):
    """Chambers-Mallows-Stuck map for symmetric stable draws.

    ``phi`` is uniform on (-pi/2, pi/2) and ``w`` standard exponential.
    """
    return delta * (
        np.sin(alpha * phi)
        / np.cos(phi) ** (1.0 / alpha)
        * (np.cos((1.0 - alpha) * phi) / w) ** ((1.0 - alpha) / alpha)
    )


def toad_paths_numpy(phi, w, u_return, u_day, alpha, delta, p0):
    """Refuge locations for a batch of toad simulations.

    All random inputs have shape (m, nd - 1, nt). On night ``i`` a toad with
    ``u_return < p0`` goes back to the refuge of a uniformly chosen earlier
    day; otherwise it settles at its previous refuge plus a stable step built
    from ``(phi, w)``. Returns an array of shape (m, nd, nt).
    """
    m, nights, nt = phi.shape
    steps = stable_transform(phi, w, alpha, delta)
    Y = np.zeros((m, nights + 1, nt))
    ii = np.arange(m)[:, None]
    jj = np.arange(nt)[None, :]
    for i in range(1, nights + 1):
        moved = Y[:, i - 1, :] + steps[:, i - 1, :]
        day = (u_day[:, i - 1, :] * i).astype(np.int64)
        back = Y[ii, day, jj]
        Y[:, i, :] = np.where(u_return[:, i - 1, :] < p0, back, moved)
    return Y


def _toad_paths_loops(phi, w, u_return, u_day, alpha, delta, p0):
    # the stable step is only evaluated on nights the toad does not return
    m, nights, nt = phi.shape
    Y = np.zeros((m, nights + 1, nt))
    inv_a = 1.0 / alpha
    expo = (1.0 - alpha) / alpha
    for r in range(m):
        for i in range(1, nights + 1):
            for j in range(nt):
                if u_return[r, i - 1, j] < p0:
                    Y[r, i, j] = Y[r, int(u_day[r, i - 1, j] * i), j]
                else:
                    f = phi[r, i - 1, j]
                    step = delta * (
                        np.sin(alpha * f)
                        / np.cos(f) ** inv_a
                        * (np.cos((1.0 - alpha) * f) / w[r, i - 1, j]) ** expo
                    )
                    Y[r, i, j] = Y[r, i - 1, j] + step
    return Y


def toad_summaries_numpy(Y, lags, threshold):
    """Return-count and displacement-quantile summaries, 12 per lag.

    Returns ``(summaries, status)`` with shapes (m, 12 * len(lags)) and (m,).
    """
    m = Y.shape[0]
    n_lags = len(lags)
    out = np.full((m, 12 * n_lags), np.nan)
    status = np.zeros(m, dtype=np.int64)
    for r in range(m):
        for a, lag in enumerate(lags):
            disp = np.abs(Y[r, lag:, :] - Y[r, :-lag, :]).ravel()
            ret = disp < threshold
            far = disp[~ret]
            base = 12 * a
            out[r, base] = ret.sum()
            if far.size == 0:
                status[r] = 1
                break
            q = np.quantile(far, _QUANTILE_PROBS)
            gaps = np.diff(q)
            if np.any(gaps <= 0.0):
                status[r] = 2
                break
            out[r, base + 1 : base + 11] = np.log(gaps)
            out[r, base + 11] = q[5]
    return out, status


def _bucket_select(a, kth, out):
    """Write the ``kth`` order statistics of non-negative ``a`` into ``out``.

    Non-negative doubles sort like their bit patterns, so a counting sort on
    the top 20 bits splits ``a`` into narrow buckets; only buckets holding a
    requested rank are then sorted. ``kth`` must be ascending.
    """
    k = a.shape[0]
    keys = a.view(np.int64) >> 44
    kmin = keys.min()
    nb = keys.max() - kmin + 1
    if nb > 65536:
        srt = np.sort(a)
        for t in range(kth.shape[0]):
            out[t] = srt[kth[t]]
        return
    start = np.zeros(nb + 1, np.int64)
    for i in range(k):
        start[keys[i] - kmin + 1] += 1
    for b in range(nb):
        start[b + 1] += start[b]
    fill = start[:-1].copy()
    seg = np.empty(k)
    for i in range(k):
        b = keys[i] - kmin
        seg[fill[b]] = a[i]
        fill[b] += 1
    last = -1
    b = 0
    for t in range(kth.shape[0]):
        pos = kth[t]
        while start[b + 1] <= pos:
            b += 1
        if b != last:
            lo = start[b]
            hi = start[b + 1]
            if hi - lo > 1:
                seg[lo:hi] = np.sort(seg[lo:hi])
            last = b
        out[t] = seg[pos]


def _toad_summaries_loops(Y, lags, threshold):
    m, nd, nt = Y.shape
    n_lags = lags.shape[0]
    out = np.full((m, 12 * n_lags), np.nan)
    status = np.zeros(m, dtype=np.int64)
    buf = np.empty(nd * nt)
    q = np.empty(11)
    pos = np.empty(11, np.int64)
    frac = np.empty(11)
    kth = np.empty(22, np.int64)
    vals = np.empty(22)
    probs = np.linspace(0.0, 1.0, 11)
    for r in range(m):
        for a in range(n_lags):
            lag = lags[a]
            k = 0
            n_ret = 0
            for i in range(nd - lag):
                for j in range(nt):
                    d = abs(Y[r, i + lag, j] - Y[r, i, j])
                    if d < threshold:
                        n_ret += 1
                    else:
                        buf[k] = d
                        k += 1
            base = 12 * a
            out[r, base] = n_ret
            if k == 0:
                status[r] = 1
                break
            nk = 0
            for p in range(11):
                h = (k - 1) * probs[p]
                lo = int(np.floor(h))
                if lo >= k - 1:
                    lo = k - 1
                pos[p] = lo
                frac[p] = h - lo
                for c in (lo, min(lo + 1, k - 1)):
                    if nk == 0 or kth[nk - 1] != c:
                        kth[nk] = c
                        nk += 1
            _bucket_select(buf[:k], kth[:nk], vals)
            t = 0
            for p in range(11):
                lo = pos[p]
                while kth[t] != lo:
                    t += 1
                if lo >= k - 1:
                    q[p] = vals[t]
                else:
                    # same interpolation as numpy's "linear" quantile method
                    gap = vals[t + 1] - vals[t]
                    if frac[p] >= 0.5:
                        q[p] = vals[t + 1] - gap * (1.0 - frac[p])
                    else:
                        q[p] = vals[t] + gap * frac[p]
            bad = False
            for p in range(10):
                g = q[p + 1] - q[p]
                if g <= 0.0:
                    bad = True
                    break
                out[r, base + 1 + p] = np.log(g)
            if bad:
                status[r] = 2
                break
            out[r, base + 11] = q[5]
    return out, status


if USE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)
    # reassociating the lag sums lets the reduction vectorize; inputs are finite
    ma2_autocov_numba = numba.njit(cache=True, nogil=True, fastmath=True)(_ma2_autocov_loops)
    toad_paths_numba = _jit(_toad_paths_loops)
    _bucket_select = _jit(_bucket_select)
    _toad_summaries_jit = _jit(_toad_summaries_loops)

    def toad_summaries_numba(Y, lags, threshold):
        return _toad_summaries_jit(Y, np.asarray(lags, dtype=np.int64), float(threshold))

    ma2_autocov = ma2_autocov_numba
    toad_paths = toad_paths_numba
    toad_summaries = toad_summaries_numba
else:
    ma2_autocov_numba = toad_paths_numba = toad_summaries_numba = None
    ma2_autocov = ma2_autocov_numpy
    toad_paths = toad_paths_numpy
    toad_summaries = toad_summaries_numpy
