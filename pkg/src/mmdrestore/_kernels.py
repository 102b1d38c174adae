"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The public names at the bottom dispatch on :data:`mmdrestore._jit.USE_NUMBA`.
Both flavours stay importable (``*_numba`` / ``*_numpy``) so tests and the
benchmark can compare them directly.

Mixture conventions: a pixel level ``l`` in 0..255 sits at
``x = l / 127.5 - 1`` with half-width ``BIN_HALF_WIDTH = 1/255``; level 0 and
255 own the open tails. ``dist`` is 0 for Gaussian components, 1 for logistic.
"""

import math

import numpy as np
from scipy import special

from ._jit import HAVE_NUMBA, USE_NUMBA, numba, numba_default

N_LEVELS = 256
BIN_HALF_WIDTH = 1.0 / 255.0
MIN_LOG_SCALE = -7.0
GAUSSIAN = 0
LOGISTIC = 1

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)
_LN2 = math.log(2.0)
# Above this the erfc path underflows; switch to the asymptotic tail series.
_TAIL_SWITCH = 35.0


# --------------------------------------------------------------------------
# pure numpy
# --------------------------------------------------------------------------


def _softplus_np(z):
    return np.logaddexp(0.0, z)


def _log_sf_np(z, dist):
    z = np.asarray(z, dtype=np.float64)
    if dist == LOGISTIC:
        return -_softplus_np(z)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        direct = np.log(0.5 * special.erfc(np.minimum(z, _TAIL_SWITCH) / _SQRT2))
        zt = np.maximum(z, _TAIL_SWITCH)
        zz = zt * zt
        tail = -0.5 * zz - np.log(zt) - _LOG_SQRT_2PI + np.log1p(-1.0 / zz + 3.0 / zz**2 - 15.0 / zz**3)
    return np.where(z < _TAIL_SWITCH, direct, tail)


def _log_pdf_np(z, dist):
    if dist == LOGISTIC:
        return -_softplus_np(z) - _softplus_np(-z)
    return -0.5 * z * z - _LOG_SQRT_2PI


def _log1mexp_np(t):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.where(t > -_LN2, np.log(-np.expm1(t)), np.log1p(-np.exp(t)))


def _bin_logp_np(level, x, mu, logs, dist):
    """Log mass of each bin plus d/dmu and d/dlogs, vectorised over arrays."""
    s_inv = np.exp(-logs)
    a = (x - BIN_HALF_WIDTH - mu) * s_inv
    b = (x + BIN_HALF_WIDTH - mu) * s_inv
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        lsa, lsb = _log_sf_np(a, dist), _log_sf_np(b, dist)
        lsna, lsnb = _log_sf_np(-a, dist), _log_sf_np(-b, dist)
        upper = lsa + _log1mexp_np(lsb - lsa)
        lower = lsnb + _log1mexp_np(lsna - lsnb)
        if dist == GAUSSIAN:
            middle = np.log(0.5 * (special.erf(b / _SQRT2) - special.erf(a / _SQRT2)))
        else:
            middle = np.log(special.expit(b) - special.expit(a))
        interior = np.where(a >= 0.0, upper, np.where(b <= 0.0, lower, middle))
        lp = np.where(level == 0, lsnb, np.where(level == N_LEVELS - 1, lsa, interior))

        lpa, lpb = _log_pdf_np(a, dist), _log_pdf_np(b, dist)
        da = np.where(level == 0, 0.0, -np.exp(lpa - lp))
        db = np.where(level == N_LEVELS - 1, 0.0, np.exp(lpb - lp))
        dmu = -(da + db) * s_inv
        dlogs = -(np.where(level == 0, 0.0, da * a) + np.where(level == N_LEVELS - 1, 0.0, db * b))

        # Bins too thin to resolve: density times width.
        c = (x - mu) * s_inv
        fallback = _log_pdf_np(c, dist) + np.log(2.0 * BIN_HALF_WIDTH * s_inv)
        dpdf = -c if dist == GAUSSIAN else -np.tanh(0.5 * c)
        bad = ~np.isfinite(lp)
        lp = np.where(bad, fallback, lp)
        dmu = np.where(bad, -dpdf * s_inv, dmu)
        dlogs = np.where(bad, -dpdf * c - 1.0, dlogs)
    return lp, dmu, dlogs


def mixture_nll_grad_numpy(levels, logits, means, raw_log_scales, dist=GAUSSIAN):
    """Per-element NLL (nats) and gradients w.r.t. logits, means, raw log-scales.

    ``levels`` has shape [N]; the parameter arrays have shape [N, M].
    """
    levels = np.asarray(levels, dtype=np.int64)
    logits = np.asarray(logits, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    raw = np.asarray(raw_log_scales, dtype=np.float64)
    lv = levels[:, None]
    x = lv / 127.5 - 1.0
    logs = np.maximum(raw, MIN_LOG_SCALE)
    lp, dmu, dls = _bin_logp_np(lv, x, means, logs, dist)
    log_pi = logits - special.logsumexp(logits, axis=1, keepdims=True)
    t = log_pi + lp
    logp = special.logsumexp(t, axis=1, keepdims=True)
    r = np.exp(t - logp)
    d_logits = np.exp(log_pi) - r
    d_means = -r * dmu
    d_raw = np.where(raw >= MIN_LOG_SCALE, -r * dls, 0.0)
    return -logp[:, 0], d_logits, d_means, d_raw


def mixture_log_pmf_numpy(logits, means, raw_log_scales, dist=GAUSSIAN):
    """Log PMF over all 256 levels, shape [N, 256]."""
    logits = np.asarray(logits, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)[:, None, :]
    logs = np.maximum(np.asarray(raw_log_scales, dtype=np.float64), MIN_LOG_SCALE)[:, None, :]
    lv = np.arange(N_LEVELS)[None, :, None]
    lp, _, _ = _bin_logp_np(lv, lv / 127.5 - 1.0, means, logs, dist)
    log_pi = logits - special.logsumexp(logits, axis=1, keepdims=True)
    return special.logsumexp(log_pi[:, None, :] + lp, axis=2)


def sample_levels_numpy(log_pmf, u):
    """Inverse-CDF draw of one level per row given uniforms ``u`` in [0, 1)."""
    pmf = np.exp(np.asarray(log_pmf, dtype=np.float64))
    cdf = np.cumsum(pmf, axis=1)
    target = np.asarray(u, dtype=np.float64) * cdf[:, -1]
    idx = (cdf < target[:, None]).sum(axis=1)
    return np.minimum(idx, N_LEVELS - 1).astype(np.int64)


def pairwise_distances_numpy(x, y, chunk=256):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.empty((x.shape[0], y.shape[0]))
    for start in range(0, x.shape[0], chunk):
        diff = x[start : start + chunk, None, :] - y[None, :, :]
        out[start : start + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def kernel_grad_sum_numpy(x, y, gamma, squared=False):
    """Row i: sum_j dK(x_i, y_j)/dx_i for K = exp(-||x-y|| / gamma).

    With ``squared`` the exponent uses ||x-y||^2. Coincident pairs
    (distance < 1e-12) contribute zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = x[:, None, :] - y[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if squared:
        coef = -2.0 * np.exp(-(dist**2) / gamma) / gamma
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(dist < 1e-12, 0.0, -np.exp(-dist / gamma) / (gamma * dist))
    return np.einsum("ij,ijk->ik", coef, diff)


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(**numba_default)
    def _softplus(z):
        if z > 0.0:
            return z + math.log1p(math.exp(-z))
        return math.log1p(math.exp(z))

    @numba.njit(**numba_default)
    def _log_sf(z, dist):
        if dist == LOGISTIC:
            return -_softplus(z)
        if z < _TAIL_SWITCH:
            return math.log(0.5 * math.erfc(z / _SQRT2))
        zz = z * z
        return -0.5 * zz - math.log(z) - _LOG_SQRT_2PI + math.log1p(-1.0 / zz + 3.0 / (zz * zz) - 15.0 / (zz * zz * zz))

    @numba.njit(**numba_default)
    def _log_pdf(z, dist):
        if dist == LOGISTIC:
            return -_softplus(z) - _softplus(-z)
        return -0.5 * z * z - _LOG_SQRT_2PI

    @numba.njit(**numba_default)
    def _log1mexp(t):
        if t > -_LN2:
            return math.log(-math.expm1(t))
        return math.log1p(-math.exp(t))

    @numba.njit(**numba_default)
    def _bin_logp(level, mu, logs, dist):
        x = level / 127.5 - 1.0
        s_inv = math.exp(-logs)
        a = (x - BIN_HALF_WIDTH - mu) * s_inv
        b = (x + BIN_HALF_WIDTH - mu) * s_inv
        da = 0.0
        db = 0.0
        if level == 0:
            lp = _log_sf(-b, dist)
        elif level == N_LEVELS - 1:
            lp = _log_sf(a, dist)
        elif a >= 0.0:
            la = _log_sf(a, dist)
            lp = la + _log1mexp(_log_sf(b, dist) - la)
        elif b <= 0.0:
            lb = _log_sf(-b, dist)
            lp = lb + _log1mexp(_log_sf(-a, dist) - lb)
        elif dist == GAUSSIAN:
            lp = math.log(0.5 * (math.erf(b / _SQRT2) - math.erf(a / _SQRT2)))
        else:
            lp = math.log(1.0 / (1.0 + math.exp(-b)) - 1.0 / (1.0 + math.exp(-a)))
        if math.isfinite(lp):
            if level != 0:
                da = -math.exp(_log_pdf(a, dist) - lp)
            if level != N_LEVELS - 1:
                db = math.exp(_log_pdf(b, dist) - lp)
            return lp, -(da + db) * s_inv, -(da * a + db * b)
        c = (x - mu) * s_inv
        lp = _log_pdf(c, dist) + math.log(2.0 * BIN_HALF_WIDTH * s_inv)
        if dist == GAUSSIAN:
            dpdf = -c
        else:
            dpdf = -math.tanh(0.5 * c)
        return lp, -dpdf * s_inv, -dpdf * c - 1.0

    @numba.njit(**numba_default)
    def _mixture_nll_grad_jit(levels, logits, means, raw, dist):
        n, m = logits.shape
        nll = np.empty(n)
        d_logits = np.empty((n, m))
        d_means = np.empty((n, m))
        d_raw = np.empty((n, m))
        t = np.empty(m)
        dmu = np.empty(m)
        dls = np.empty(m)
        for i in range(n):
            top = logits[i, 0]
            for k in range(1, m):
                top = max(top, logits[i, k])
            acc = 0.0
            for k in range(m):
                acc += math.exp(logits[i, k] - top)
            lse_logits = top + math.log(acc)
            for k in range(m):
                logs = max(raw[i, k], MIN_LOG_SCALE)
                lp, dmu[k], dls[k] = _bin_logp(levels[i], means[i, k], logs, dist)
                t[k] = logits[i, k] - lse_logits + lp
            top = t[0]
            for k in range(1, m):
                top = max(top, t[k])
            acc = 0.0
            for k in range(m):
                acc += math.exp(t[k] - top)
            logp = top + math.log(acc)
            nll[i] = -logp
            for k in range(m):
                r = math.exp(t[k] - logp)
                d_logits[i, k] = math.exp(logits[i, k] - lse_logits) - r
                d_means[i, k] = -r * dmu[k]
                d_raw[i, k] = -r * dls[k] if raw[i, k] >= MIN_LOG_SCALE else 0.0
        return nll, d_logits, d_means, d_raw

    @numba.njit(**numba_default)
    def _mixture_log_pmf_jit(logits, means, raw, dist):
        n, m = logits.shape
        out = np.empty((n, N_LEVELS))
        t = np.empty(m)
        for i in range(n):
            top = logits[i, 0]
            for k in range(1, m):
                top = max(top, logits[i, k])
            acc = 0.0
            for k in range(m):
                acc += math.exp(logits[i, k] - top)
            lse_logits = top + math.log(acc)
            for level in range(N_LEVELS):
                for k in range(m):
                    lp, _, _ = _bin_logp(level, means[i, k], max(raw[i, k], MIN_LOG_SCALE), dist)
                    t[k] = logits[i, k] - lse_logits + lp
                top = t[0]
                for k in range(1, m):
                    top = max(top, t[k])
                acc = 0.0
                for k in range(m):
                    acc += math.exp(t[k] - top)
                out[i, level] = top + math.log(acc)
        return out

    @numba.njit(**numba_default)
    def _sample_levels_jit(log_pmf, u):
        n = log_pmf.shape[0]
        out = np.empty(n, dtype=np.int64)
        cdf = np.empty(N_LEVELS)
        for i in range(n):
            acc = 0.0
            for level in range(N_LEVELS):
                acc += math.exp(log_pmf[i, level])
                cdf[level] = acc
            target = u[i] * acc
            idx = 0
            while idx < N_LEVELS - 1 and cdf[idx] < target:
                idx += 1
            out[i] = idx
        return out

    @numba.njit(**numba_default)
    def _pairwise_distances_jit(x, y):
        n, d = x.shape
        m = y.shape[0]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = x[i, k] - y[j, k]
                    acc += diff * diff
                out[i, j] = math.sqrt(acc)
        return out

    @numba.njit(**numba_default)
    def _kernel_grad_sum_jit(x, y, gamma, squared):
        n, d = x.shape
        m = y.shape[0]
        out = np.zeros((n, d))
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = x[i, k] - y[j, k]
                    acc += diff * diff
                dist = math.sqrt(acc)
                if squared:
                    coef = -2.0 * math.exp(-acc / gamma) / gamma
                elif dist < 1e-12:
                    continue
                else:
                    coef = -math.exp(-dist / gamma) / (gamma * dist)
                for k in range(d):
                    out[i, k] += coef * (x[i, k] - y[j, k])
        return out

    def mixture_nll_grad_numba(levels, logits, means, raw_log_scales, dist=GAUSSIAN):
        return _mixture_nll_grad_jit(
            np.ascontiguousarray(levels, dtype=np.int64),
            np.ascontiguousarray(logits, dtype=np.float64),
            np.ascontiguousarray(means, dtype=np.float64),
            np.ascontiguousarray(raw_log_scales, dtype=np.float64),
            int(dist),
        )

    def mixture_log_pmf_numba(logits, means, raw_log_scales, dist=GAUSSIAN):
        return _mixture_log_pmf_jit(
            np.ascontiguousarray(logits, dtype=np.float64),
            np.ascontiguousarray(means, dtype=np.float64),
            np.ascontiguousarray(raw_log_scales, dtype=np.float64),
            int(dist),
        )

    def sample_levels_numba(log_pmf, u):
        return _sample_levels_jit(np.ascontiguousarray(log_pmf, dtype=np.float64), np.ascontiguousarray(u, dtype=np.float64))

    def pairwise_distances_numba(x, y):
        return _pairwise_distances_jit(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(y, dtype=np.float64))

    def kernel_grad_sum_numba(x, y, gamma, squared=False):
        return _kernel_grad_sum_jit(
            np.ascontiguousarray(x, dtype=np.float64),
            np.ascontiguousarray(y, dtype=np.float64),
            float(gamma),
            bool(squared),
        )

else:  # pragma: no cover
    mixture_nll_grad_numba = None
    mixture_log_pmf_numba = None
    sample_levels_numba = None
    pairwise_distances_numba = None
    kernel_grad_sum_numba = None


if USE_NUMBA:
    mixture_nll_grad = mixture_nll_grad_numba
    mixture_log_pmf = mixture_log_pmf_numba
    sample_levels = sample_levels_numba
    pairwise_distances = pairwise_distances_numba
    kernel_grad_sum = kernel_grad_sum_numba
else:
    mixture_nll_grad = mixture_nll_grad_numpy
    mixture_log_pmf = mixture_log_pmf_numpy
    sample_levels = sample_levels_numpy
    pairwise_distances = pairwise_distances_numpy
    kernel_grad_sum = kernel_grad_sum_numpy
