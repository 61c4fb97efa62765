"""Compiled per-lane kernels for the render-time guiding hot path.

The object-level mixture code stays in plain numpy; these kernels implement
the same formulas lane-by-lane for the renderer, where thousands of small
per-query mixtures make array-at-a-time evaluation overhead- and
bandwidth-bound.  Covariance factors are passed in packed symmetric form:
``chol = (l00, l10, l11)``, ``inv = (i00, i01, i11)``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LOG_TWO_PI = 1.8378770664093453
EMPTY_LOG_FLOOR = -690.77552789821368  # log(1e-300)
PI = np.pi
ANTIPODAL_Z = -1.0 + 1e-12


@njit(cache=True, inline="always")
def _sinc(x):
    if abs(x) < 1e-4:
        return 1.0 - x * x / 6.0
    return np.sin(x) / x


@njit(cache=True, inline="always")
def _to_pole(ax, ay, az, wx, wy, wz):
    """Rotate w by the shortest-arc rotation taking the anchor to +z."""
    if az < -1.0 + 1e-6:
        return wx, -wy, -wz
    vx = ay
    vy = -ax
    ux = vy * wz
    uy = -vx * wz
    uz = vx * wy - vy * wx
    f = 1.0 / (1.0 + az)
    return (
        wx + ux + f * vy * uz,
        wy + uy - f * vx * uz,
        wz + uz + f * (vx * uy - vy * ux),
    )


@njit(cache=True, inline="always")
def _from_pole(ax, ay, az, ux, uy, uz):
    """Inverse of :func:`_to_pole`."""
    if az < -1.0 + 1e-6:
        return ux, -uy, -uz
    vx = ay
    vy = -ax
    tx = vy * uz
    ty = -vx * uz
    tz = vx * uy - vy * ux
    f = 1.0 / (1.0 + az)
    return (
        ux - tx + f * vy * tz,
        uy - ty - f * vx * tz,
        uz - tz + f * (vx * ty - vy * tx),
    )


@njit(cache=True)
def condition_group(x, means, ixx, gain, log_w, logdet, out_lw, out_off, out_valid):
    """Spatially condition one leaf's mixture at each query position."""
    n = x.shape[0]
    K = means.shape[0]
    for i in range(n):
        top = -np.inf
        for k in range(K):
            dx = x[i, 0] - means[k, 0]
            dy = x[i, 1] - means[k, 1]
            dz = x[i, 2] - means[k, 2]
            quad = (
                ixx[k, 0] * dx * dx + ixx[k, 1] * dy * dy + ixx[k, 2] * dz * dz
                + 2.0 * (ixx[k, 3] * dx * dy + ixx[k, 4] * dx * dz + ixx[k, 5] * dy * dz)
            )
            lw = log_w[k] - 0.5 * (3.0 * LOG_TWO_PI + logdet[k] + quad)
            out_lw[i, k] = lw
            out_off[i, k, 0] = gain[k, 0] * dx + gain[k, 1] * dy + gain[k, 2] * dz
            out_off[i, k, 1] = gain[k, 3] * dx + gain[k, 4] * dy + gain[k, 5] * dz
            if lw > top:
                top = lw
        if top >= EMPTY_LOG_FLOOR:
            s = 0.0
            for k in range(K):
                s += np.exp(out_lw[i, k] - top)
            norm = top + np.log(s)
            for k in range(K):
                out_lw[i, k] -= norm
            out_valid[i] = True
        else:
            out_valid[i] = False


@njit(cache=True)
def sample_group(log_w, offsets, anchors, chol, u, z0, z1, out_dirs, out_ok):
    """Draw one direction per lane from a shared-anchor mixture.

    ``anchors``/``chol`` are leaf-constant (K, 3); ``log_w``/``offsets`` are
    per-lane conditionals.  Entries falling outside the radius-pi chart set
    ``out_ok`` False.
    """
    n = log_w.shape[0]
    K = log_w.shape[1]
    for i in range(n):
        # categorical draw via inverse CDF over normalized weights
        total = 0.0
        for k in range(K):
            total += np.exp(log_w[i, k])
        pick = K - 1
        acc = 0.0
        target = u[i] * total
        for k in range(K):
            acc += np.exp(log_w[i, k])
            if target < acc:
                pick = k
                break
        n0 = offsets[i, pick, 0] + chol[pick, 0] * z0[i]
        n1 = offsets[i, pick, 1] + chol[pick, 1] * z0[i] + chol[pick, 2] * z1[i]
        r = np.hypot(n0, n1)
        if r >= PI:
            out_ok[i] = False
            out_dirs[i, 0] = 0.0
            out_dirs[i, 1] = 0.0
            out_dirs[i, 2] = 1.0
            continue
        s = _sinc(r)
        wx, wy, wz = _from_pole(
            anchors[pick, 0], anchors[pick, 1], anchors[pick, 2],
            n0 * s, n1 * s, np.cos(r),
        )
        out_dirs[i, 0] = wx
        out_dirs[i, 1] = wy
        out_dirs[i, 2] = wz
        out_ok[i] = True


@njit(cache=True)
def pdf_group(log_w, offsets, anchors, inv, logdet, dirs, out_pdf):
    """Solid-angle density of shared-anchor per-lane mixtures."""
    n = log_w.shape[0]
    K = log_w.shape[1]
    for i in range(n):
        m = -np.inf
        s = 0.0
        for k in range(K):
            lw = log_w[i, k]
            if not np.isfinite(lw):
                continue
            qx, qy, qz = _to_pole(
                anchors[k, 0], anchors[k, 1], anchors[k, 2],
                dirs[i, 0], dirs[i, 1], dirs[i, 2],
            )
            if qz > 1.0:
                qz = 1.0
            if qz <= ANTIPODAL_Z:
                continue
            r = np.arccos(qz)
            sc = _sinc(r)
            d0 = qx / sc - offsets[i, k, 0]
            d1 = qy / sc - offsets[i, k, 1]
            quad = inv[k, 0] * d0 * d0 + 2.0 * inv[k, 1] * d0 * d1 + inv[k, 2] * d1 * d1
            comp = lw - LOG_TWO_PI - 0.5 * (logdet[k] + quad) - np.log(sc)
            if comp > m:
                s = s * np.exp(m - comp) + 1.0
                m = comp
            else:
                s += np.exp(comp - m)
        out_pdf[i] = np.exp(m) * s if np.isfinite(m) else 0.0


@njit(cache=True)
def sample_any(log_w, offsets, anchors, chol, u, z0, z1, out_dirs, out_ok):
    """Like :func:`sample_group` with per-lane anchors/factors (n, K, ...)."""
    n = log_w.shape[0]
    K = log_w.shape[1]
    for i in range(n):
        total = 0.0
        for k in range(K):
            total += np.exp(log_w[i, k])
        pick = K - 1
        acc = 0.0
        target = u[i] * total
        for k in range(K):
            acc += np.exp(log_w[i, k])
            if target < acc:
                pick = k
                break
        n0 = offsets[i, pick, 0] + chol[i, pick, 0] * z0[i]
        n1 = offsets[i, pick, 1] + chol[i, pick, 1] * z0[i] + chol[i, pick, 2] * z1[i]
        r = np.hypot(n0, n1)
        if r >= PI:
            out_ok[i] = False
            out_dirs[i, 0] = 0.0
            out_dirs[i, 1] = 0.0
            out_dirs[i, 2] = 1.0
            continue
        s = _sinc(r)
        wx, wy, wz = _from_pole(
            anchors[i, pick, 0], anchors[i, pick, 1], anchors[i, pick, 2],
            n0 * s, n1 * s, np.cos(r),
        )
        out_dirs[i, 0] = wx
        out_dirs[i, 1] = wy
        out_dirs[i, 2] = wz
        out_ok[i] = True


@njit(cache=True)
def pdf_any(log_w, offsets, anchors, inv, logdet, dirs, out_pdf):
    """Like :func:`pdf_group` with per-lane anchors/factors (n, K, ...)."""
    n = log_w.shape[0]
    K = log_w.shape[1]
    for i in range(n):
        m = -np.inf
        s = 0.0
        for k in range(K):
            lw = log_w[i, k]
            if not np.isfinite(lw):
                continue
            qx, qy, qz = _to_pole(
                anchors[i, k, 0], anchors[i, k, 1], anchors[i, k, 2],
                dirs[i, 0], dirs[i, 1], dirs[i, 2],
            )
            if qz > 1.0:
                qz = 1.0
            if qz <= ANTIPODAL_Z:
                continue
            r = np.arccos(qz)
            sc = _sinc(r)
            d0 = qx / sc - offsets[i, k, 0]
            d1 = qy / sc - offsets[i, k, 1]
            quad = inv[i, k, 0] * d0 * d0 + 2.0 * inv[i, k, 1] * d0 * d1 + inv[i, k, 2] * d1 * d1
            comp = lw - LOG_TWO_PI - 0.5 * (logdet[i, k] + quad) - np.log(sc)
            if comp > m:
                s = s * np.exp(m - comp) + 1.0
                m = comp
            else:
                s += np.exp(comp - m)
        out_pdf[i] = np.exp(m) * s if np.isfinite(m) else 0.0
