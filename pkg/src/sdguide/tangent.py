"""Charts on the unit sphere: log/exp maps, their Jacobians, and chart transport.

Every chart is the azimuthal equidistant projection centered at a unit vector
``mu``: geodesic distance from ``mu`` is preserved as the Euclidean norm of the
2D chart coordinate.  All functions broadcast over leading batch dimensions and
operate in float64.
"""

from __future__ import annotations

import numpy as np

CHART_RADIUS = np.pi
ANTIPODAL_EPS = 1e-12  # mu.w <= -1 + eps counts as degenerate

_SMALL = 1e-4


class DegenerateInputError(ValueError):
    """Raised when a direction is (numerically) antipodal to the chart center."""


class OutOfChartError(ValueError):
    """Raised when chart coordinates lie at or beyond the radius-pi boundary."""


def sinc(x):
    """Unnormalized sin(x)/x with a Taylor branch near zero."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < _SMALL
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x * x / 6.0, np.sin(safe) / safe)


def normalize(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def rotation_to_pole(mu):
    """Shortest-arc rotation taking ``mu`` to (0, 0, 1).

    Uses an explicit branch (rotation about x by pi) when ``mu`` is within
    1e-6 of the -z pole, where the shortest-arc formula loses precision.
    Broadcasts: (..., 3) -> (..., 3, 3).
    """
    mu = np.asarray(mu, dtype=np.float64)
    c = mu[..., 2]
    vx = mu[..., 1]
    vy = -mu[..., 0]
    # R = I + [v]_x + [v]_x^2 / (1 + c) with v = mu x e_z (v_z = 0)
    denom = np.where(c < -1.0 + 1e-6, 1.0, 1.0 + c)
    f = 1.0 / denom
    R = np.empty(mu.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - f * vy * vy
    R[..., 0, 1] = f * vx * vy
    R[..., 0, 2] = vy
    R[..., 1, 0] = f * vx * vy
    R[..., 1, 1] = 1.0 - f * vx * vx
    R[..., 1, 2] = -vx
    R[..., 2, 0] = -vy
    R[..., 2, 1] = vx
    R[..., 2, 2] = 1.0 - f * (vx * vx + vy * vy)
    flip = c < -1.0 + 1e-6
    if np.any(flip):
        R_flip = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
        R = np.where(flip[..., None, None], R_flip, R)
    return R


def rotate_to_pole_apply(mu, w):
    """Apply ``rotation_to_pole(mu)`` to vectors without materializing the
    3x3 matrices: R w = w + v x w + v x (v x w) / (1 + mu_z), v = mu x e_z."""
    mu = np.asarray(mu, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c = mu[..., 2]
    flip = c < -1.0 + 1e-6
    vx = mu[..., 1]
    vy = -mu[..., 0]
    ux = vy * w[..., 2]
    uy = -vx * w[..., 2]
    uz = vx * w[..., 1] - vy * w[..., 0]
    f = 1.0 / np.where(flip, 1.0, 1.0 + c)
    qx = w[..., 0] + ux + f * vy * uz
    qy = w[..., 1] + uy - f * vx * uz
    qz = w[..., 2] + uz + f * (vx * uy - vy * ux)
    qx = np.where(flip, w[..., 0], qx)
    qy = np.where(flip, -w[..., 1], qy)
    qz = np.where(flip, -w[..., 2], qz)
    return np.stack([qx, qy, qz], axis=-1)


def rotate_from_pole_apply(mu, u):
    """Apply the inverse of ``rotation_to_pole(mu)``:
    R^T u = u - v x u + v x (v x u) / (1 + mu_z)."""
    mu = np.asarray(mu, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    c = mu[..., 2]
    flip = c < -1.0 + 1e-6
    vx = mu[..., 1]
    vy = -mu[..., 0]
    tx = vy * u[..., 2]
    ty = -vx * u[..., 2]
    tz = vx * u[..., 1] - vy * u[..., 0]
    f = 1.0 / np.where(flip, 1.0, 1.0 + c)
    qx = u[..., 0] - tx + f * vy * tz
    qy = u[..., 1] - ty - f * vx * tz
    qz = u[..., 2] - tz + f * (vx * ty - vy * tx)
    qx = np.where(flip, u[..., 0], qx)
    qy = np.where(flip, -u[..., 1], qy)
    qz = np.where(flip, -u[..., 2], qz)
    return np.stack([qx, qy, qz], axis=-1)


def log_map_masked(mu, omega):
    """Chart coordinates of ``omega`` in the ``mu``-centered chart.

    Returns ``(nu, radius, in_chart)`` where ``in_chart`` is False for
    (numerically) antipodal pairs; their coordinates are zeroed instead of
    raising so batch callers can mask them out.
    """
    q = rotate_to_pole_apply(mu, omega)
    z = np.clip(q[..., 2], -1.0, 1.0)
    in_chart = z > -1.0 + ANTIPODAL_EPS
    r = np.arccos(z)
    s = sinc(r)
    s = np.where(in_chart, s, 1.0)
    nu = q[..., :2] / s[..., None]
    nu = np.where(in_chart[..., None], nu, 0.0)
    r = np.where(in_chart, r, 0.0)
    return nu, r, in_chart


def log_map(mu, omega):
    """Map a direction into the ``mu``-centered chart; raises if antipodal."""
    nu, _, ok = log_map_masked(mu, omega)
    if not np.all(ok):
        raise DegenerateInputError("direction is antipodal to the chart center")
    return nu


def exp_map(mu, nu):
    """Map chart coordinates back to the sphere; requires ``|nu| < pi``."""
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    r = np.linalg.norm(nu, axis=-1)
    if np.any(r >= CHART_RADIUS):
        raise OutOfChartError("chart coordinates at or beyond radius pi")
    return exp_map_unchecked(mu, nu)


def exp_map_unchecked(mu, nu):
    nu = np.asarray(nu, dtype=np.float64)
    r = np.linalg.norm(nu, axis=-1)
    s = sinc(r)
    local = np.stack([nu[..., 0] * s, nu[..., 1] * s, np.cos(r)], axis=-1)
    return rotate_from_pole_apply(mu, local)


def jacobian_exp(mu, nu):
    """3x2 Jacobian of the exp map at ``nu``. Broadcasts to (..., 3, 2)."""
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    r = np.linalg.norm(nu, axis=-1)
    s = sinc(r)
    small = r < _SMALL
    safe = np.where(small, 1.0, r)
    g = np.where(small, -1.0 / 3.0 + r * r / 30.0, (np.cos(r) - s) / (safe * safe))
    u = nu[..., 0]
    v = nu[..., 1]
    M = np.empty(np.broadcast_shapes(mu.shape[:-1], nu.shape[:-1]) + (3, 2), dtype=np.float64)
    M[..., 0, 0] = s + u * u * g
    M[..., 0, 1] = u * v * g
    M[..., 1, 0] = u * v * g
    M[..., 1, 1] = s + v * v * g
    M[..., 2, 0] = -u * s
    M[..., 2, 1] = -v * s
    R = rotation_to_pole(mu)
    return np.einsum("...ji,...jk->...ik", R, M)


def jacobian_log(mu, omega):
    """2x3 Jacobian of the log map at ``omega``.

    The matrix acts on perturbations tangent to the sphere at ``omega``.
    Raises for antipodal inputs.
    """
    mu = np.asarray(mu, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    R = rotation_to_pole(mu)
    q = np.einsum("...ij,...j->...i", R, omega)
    z = np.clip(q[..., 2], -1.0, 1.0)
    if np.any(z <= -1.0 + ANTIPODAL_EPS):
        raise DegenerateInputError("direction is antipodal to the chart center")
    r = np.arccos(z)
    s = sinc(r)
    small = r < _SMALL
    denom = np.where(small, 1.0, (1.0 - z * z) * s)
    k = np.where(small, -1.0 / 3.0 - 2.0 * r * r / 15.0, (z - s) / denom)
    M = np.zeros(q.shape[:-1] + (2, 3), dtype=np.float64)
    M[..., 0, 0] = 1.0 / s
    M[..., 1, 1] = 1.0 / s
    M[..., 0, 2] = q[..., 0] * k
    M[..., 1, 2] = q[..., 1] * k
    return np.einsum("...ij,...jk->...ik", M, R)


def solid_angle_factor(radius):
    """Factor converting tangent-space density to solid-angle density.

    The exp map's metric tensor G = J^T J has det G = sinc^2(r), so a chart
    density p converts as p_solid = p / sinc(r); this choice makes the
    solid-angle density integrate to exactly the chart mass.
    """
    return 1.0 / sinc(radius)


def metric_correction(mu, nu):
    """Density conversion factor at chart coordinates ``nu`` (mu is unused
    beyond defining the chart; the factor depends only on ``|nu|``)."""
    del mu
    nu = np.asarray(nu, dtype=np.float64)
    return solid_angle_factor(np.linalg.norm(nu, axis=-1))


def transport_jacobian(mu_to, mu_from):
    """First-order map of chart coordinates at ``mu_from`` into the
    ``mu_to`` chart, linearized at the origin of the source chart."""
    mu_to = np.asarray(mu_to, dtype=np.float64)
    mu_from = np.asarray(mu_from, dtype=np.float64)
    J_log = jacobian_log(mu_to, mu_from)
    zeros = np.zeros(mu_from.shape[:-1] + (2,), dtype=np.float64)
    J_exp = jacobian_exp(mu_from, zeros)
    return np.einsum("...ij,...jk->...ik", J_log, J_exp)


def transport_jacobian_at(mu_to, mu_from, nu_from):
    """Like :func:`transport_jacobian` but linearized at ``nu_from`` in the
    source chart (used when the transported mass is centered off-origin)."""
    point = exp_map_unchecked(mu_from, nu_from)
    J_log = jacobian_log(mu_to, point)
    J_exp = jacobian_exp(mu_from, nu_from)
    return np.einsum("...ij,...jk->...ik", J_log, J_exp)


def azimuthal_block(anchor, rotation):
    """2x2 tangent-basis change induced by rotating a chart anchor.

    For ``anchor2 = rotation @ anchor``, the full matrix
    ``rotation_to_pole(anchor2) @ rotation @ rotation_to_pole(anchor)^T``
    fixes the pole, so its upper-left 2x2 block is orthonormal and maps chart
    coordinates at ``anchor`` to chart coordinates at ``anchor2`` exactly.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    anchor2 = np.einsum("...ij,...j->...i", rotation, anchor)
    M = np.einsum(
        "...ij,...jk,...lk->...il", rotation_to_pole(anchor2), rotation, rotation_to_pole(anchor)
    )
    return anchor2, M[..., :2, :2]


def orthonormal_frame(normal):
    """Right-handed (s, t, n) frame rows for unit ``normal`` (branchless)."""
    n = np.asarray(normal, dtype=np.float64)
    sign = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    s = np.stack(
        [1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1
    )
    t = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return np.stack([s, t, n], axis=-2)
