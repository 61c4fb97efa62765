"""Tangent-space Gaussian mixtures over sphere and Euclidean blocks.

Two mixture flavors:

* :class:`TangentMixture` — a joint mixture over one or more sphere blocks
  (2 tangent dims each, component means anchored at the chart origins) plus
  trailing Euclidean dims.  Used for training and storage.
* :class:`DirectionalMixture` — a purely directional mixture produced by
  conditioning; components keep their original chart anchors but may carry a
  nonzero tangent-space mean offset, which keeps Gaussian conditioning and
  products exact within each chart.

The module-level ``_gauss2_*`` / ``directional_*`` helpers operate on arrays
with arbitrary leading batch shape so the renderer can evaluate many
per-query mixtures at once through the exact same code paths.
"""

from __future__ import annotations

import struct

import numpy as np

from . import tangent

LOG_TWO_PI = np.log(2.0 * np.pi)
MIN_EIGENVALUE = 1e-12
PRODUCT_PRUNE_RATIO = 1e-12
EMPTY_WEIGHT_FLOOR = 1e-300

MIXTURE_MAGIC = b"TGMX"
MIXTURE_VERSION = 1


class MixtureError(ValueError):
    pass


class EmptyConditionalError(MixtureError):
    """All conditional component weights underflowed; caller should fall back."""


class EmptyProductError(MixtureError):
    """Every pairwise product term vanished; caller should fall back."""


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)


# ---------------------------------------------------------------------------
# closed-form 2x2 symmetric matrix helpers (batched)

def _gauss2_prepare(cov):
    """Cholesky factor, inverse and log-determinant of SPD 2x2 matrices."""
    a = cov[..., 0, 0]
    b = cov[..., 0, 1]
    c = cov[..., 1, 1]
    det = a * c - b * b
    if np.any(det <= 0.0) or np.any(a <= 0.0):
        raise MixtureError("covariance block is not positive definite")
    sa = np.sqrt(a)
    chol = np.zeros(cov.shape, dtype=np.float64)
    chol[..., 0, 0] = sa
    chol[..., 1, 0] = b / sa
    chol[..., 1, 1] = np.sqrt(det) / sa
    inv = np.empty_like(chol)
    inv[..., 0, 0] = c / det
    inv[..., 0, 1] = -b / det
    inv[..., 1, 0] = -b / det
    inv[..., 1, 1] = a / det
    return chol, inv, np.log(det)


def clamp_spd_2x2(cov, floor=MIN_EIGENVALUE):
    """Push eigenvalues of symmetric 2x2 matrices up to ``floor``."""
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    tr = cov[..., 0, 0] + cov[..., 1, 1]
    det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]
    disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
    lo = 0.5 * (tr - disc)
    bump = np.maximum(floor - lo, 0.0)
    eye = np.eye(2)
    return cov + bump[..., None, None] * eye


def _inv2(m):
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    out[..., 1, 1] = m[..., 0, 0]
    return out / det[..., None, None]


# ---------------------------------------------------------------------------
# batched directional-mixture kernels
#
# Component arrays carry shape (*B, K, ...) and directions (*B, 3); the object
# layer uses B = () and the renderer B = (n_queries,).

def directional_log_pdf(log_w, anchors, offsets, cov_inv, cov_logdet, dirs):
    """Log solid-angle density of batched directional mixtures.

    ``log_w`` must already be normalized (logsumexp = 0 per batch entry);
    components may carry -inf weights and are skipped.
    """
    nu, radius, in_chart = tangent.log_map_masked(anchors, dirs[..., None, :])
    d0 = nu[..., 0] - offsets[..., 0]
    d1 = nu[..., 1] - offsets[..., 1]
    quad = (
        cov_inv[..., 0, 0] * d0 * d0
        + 2.0 * cov_inv[..., 0, 1] * d0 * d1
        + cov_inv[..., 1, 1] * d1 * d1
    )
    log_metric = -np.log(tangent.sinc(radius))
    comp = log_w - LOG_TWO_PI - 0.5 * (cov_logdet + quad) + log_metric
    comp = np.where(in_chart & np.isfinite(log_w), comp, -np.inf)
    return _logsumexp(comp, axis=-1)


def directional_sample(log_w, anchors, offsets, cov_chol, u, z):
    """Draw one direction per batch entry.

    ``u`` selects the component (uniform in [0,1)); ``z`` is a pair of
    standard normals.  Component arrays carry shape (N, K, ...).  Returns
    ``(dirs, accepted)`` where rejected entries fell outside the radius-pi
    chart and must be discarded by the caller.  Entries with no finite
    weight yield arbitrary directions that the caller is expected to mask.
    """
    norm = _logsumexp(log_w, axis=-1)[..., None]
    w = np.exp(log_w - np.where(np.isfinite(norm), norm, 0.0))
    cdf = np.cumsum(w, axis=-1)
    n, K = log_w.shape
    idx = np.minimum(np.sum(u[..., None] > cdf, axis=-1), K - 1)
    lane = np.arange(n)
    anchor = np.broadcast_to(anchors, (n, K, 3))[lane, idx]
    offset = np.broadcast_to(offsets, (n, K, 2))[lane, idx]
    chol = np.broadcast_to(cov_chol, (n, K, 2, 2))[lane, idx]
    nu0 = offset[..., 0] + chol[..., 0, 0] * z[..., 0]
    nu1 = offset[..., 1] + chol[..., 1, 0] * z[..., 0] + chol[..., 1, 1] * z[..., 1]
    nu = np.stack([nu0, nu1], axis=-1)
    radius = np.hypot(nu0, nu1)
    accepted = radius < tangent.CHART_RADIUS
    safe_nu = np.where(accepted[..., None], nu, 0.0)
    dirs = tangent.exp_map_unchecked(anchor, safe_nu)
    return dirs, accepted


def directional_rotate(weights, anchors, offsets, cov, rotation):
    """Rotate a directional mixture rigidly; densities are preserved exactly."""
    new_anchors, block = tangent.azimuthal_block(anchors, rotation[..., None, :, :])
    new_offsets = np.einsum("...ij,...j->...i", block, offsets)
    new_cov = np.einsum("...ij,...jk,...lk->...il", block, cov, block)
    return weights, new_anchors, new_offsets, new_cov


def directional_product(
    log_w_a, anchors_a, offsets_a, cov_a,
    log_w_b, anchors_b, offsets_b, cov_b,
):
    """Pairwise Gaussian product of two directional mixtures.

    The second mixture's components are transported into the first mixture's
    per-component charts via the first-order chart-change Jacobian evaluated
    at each component's mass center.  Shapes: a carries (*B, Ka, ...), b
    carries (*B, Kb, ...); the result carries (*B, Ka*Kb, ...) with
    un-normalized log weights (-inf for dropped pairs).
    """
    Ka = log_w_a.shape[-1]
    Kb = log_w_b.shape[-1]
    batch = np.broadcast_shapes(log_w_a.shape[:-1], log_w_b.shape[:-1])

    centers_b = tangent.exp_map_unchecked(anchors_b, offsets_b)  # (*B, Kb, 3)
    # pair grid: index a with [..., :, None], b with [..., None, :]
    anchor_a = np.broadcast_to(anchors_a[..., :, None, :], batch + (Ka, Kb, 3))
    center_b = np.broadcast_to(centers_b[..., None, :, :], batch + (Ka, Kb, 3))
    t, radius, in_chart = tangent.log_map_masked(anchor_a, center_b)

    J_log = _jac_log_masked(anchor_a, center_b, in_chart)
    J_exp = tangent.jacobian_exp(anchors_b, offsets_b)  # (*B, Kb, 3, 2)
    J = np.einsum("...ij,...jk->...ik", J_log, J_exp[..., None, :, :, :])

    cb = np.einsum(
        "...ij,...jk,...lk->...il", J, cov_b[..., None, :, :, :], J
    )
    cb = clamp_spd_2x2(cb)
    ca = cov_a[..., :, None, :, :]
    off_a = offsets_a[..., :, None, :]
    s = ca + cb
    s_inv = _inv2(s)
    diff = t - off_a
    quad = np.einsum("...i,...ij,...j->...", diff, s_inv, diff)
    s_det = s[..., 0, 0] * s[..., 1, 1] - s[..., 0, 1] * s[..., 1, 0]
    log_mass = -LOG_TWO_PI - 0.5 * np.log(s_det) - 0.5 * quad

    gain = np.einsum("...ij,...jk->...ik", ca, s_inv)
    off_p = off_a + np.einsum("...ij,...j->...i", gain, diff)
    cov_p = clamp_spd_2x2(np.einsum("...ij,...jk->...ik", gain, cb))

    log_w = log_w_a[..., :, None] + log_w_b[..., None, :] + log_mass
    log_w = np.where(in_chart, log_w, -np.inf)

    flat = batch + (Ka * Kb,)
    log_w = log_w.reshape(flat)
    best = np.max(log_w, axis=-1, keepdims=True)
    keep = log_w >= best + np.log(PRODUCT_PRUNE_RATIO)
    log_w = np.where(keep, log_w, -np.inf)
    anchors = anchor_a.reshape(flat + (3,))
    offsets = off_p.reshape(flat + (2,))
    cov = cov_p.reshape(flat + (2, 2))
    return log_w, anchors, offsets, cov


def _jac_log_masked(mu, omega, in_chart):
    """Log-map Jacobian that returns zeros (instead of raising) off-chart."""
    safe_omega = np.where(in_chart[..., None], omega, mu)
    return tangent.jacobian_log(mu, safe_omega)


def prune_top_k(log_w, k):
    """Indices of the ``k`` largest weights; ties keep the lower index."""
    K = log_w.shape[-1]
    k = min(k, K)
    order = np.argsort(-log_w, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


# ---------------------------------------------------------------------------


class TangentMixture:
    """Joint Gaussian mixture over sphere blocks and Euclidean dims.

    Parameters
    ----------
    weights : (K,) nonnegative, summing to 1.
    anchors : (K, S, 3) unit direction means, one per sphere block.
    euclid_means : (K, E) Euclidean means (E may be 0).
    cov : (K, D, D) SPD covariance in tangent coordinates, D = 2*S + E,
        sphere blocks first.
    """

    def __init__(self, weights, anchors, euclid_means, cov, check=True):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.anchors = np.asarray(anchors, dtype=np.float64)
        self.euclid_means = np.asarray(euclid_means, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        if self.anchors.ndim != 3 or self.anchors.shape[2] != 3:
            raise MixtureError("anchors must have shape (K, S, 3)")
        if self.euclid_means.ndim != 2:
            raise MixtureError("euclid_means must have shape (K, E)")
        self._refresh(check=check)

    # -- structure ---------------------------------------------------------

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def n_spheres(self):
        return self.anchors.shape[1]

    @property
    def n_euclid(self):
        return self.euclid_means.shape[1]

    @property
    def dim(self):
        return 2 * self.n_spheres + self.n_euclid

    def _refresh(self, check=True):
        """Re-validate parameters and rebuild the cached factorization."""
        K, D = self.n_components, self.dim
        if self.cov.shape != (K, D, D):
            raise MixtureError(f"covariance must have shape ({K}, {D}, {D})")
        if check:
            if np.any(self.weights < -1e-12):
                raise MixtureError("negative component weight")
            if abs(self.weights.sum() - 1.0) > 1e-9:
                raise MixtureError("weights must sum to 1")
            norms = np.linalg.norm(self.anchors, axis=-1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise MixtureError("anchor directions must be unit length")
            if np.max(np.abs(self.cov - np.swapaxes(self.cov, -1, -2))) > 1e-9:
                raise MixtureError("covariance must be symmetric")
        self.cov = 0.5 * (self.cov + np.swapaxes(self.cov, -1, -2))
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise MixtureError("covariance is not positive definite") from exc
        self.cov_inv = np.linalg.inv(self.cov)
        self.cov_logdet = 2.0 * np.sum(np.log(np.diagonal(self.chol, axis1=-2, axis2=-1)), axis=-1)
        self.log_weights = np.log(np.maximum(self.weights, 1e-320))

    def copy(self):
        return TangentMixture(
            self.weights.copy(), self.anchors.copy(), self.euclid_means.copy(),
            self.cov.copy(), check=False,
        )

    # -- evaluation --------------------------------------------------------

    def tangent_coords(self, dirs, euclid):
        """Per-component chart coordinates of a sample batch.

        Returns ``(coords (N, K, D), in_chart (N, K), radii (N, K, S))``;
        out-of-chart coordinates are zeroed.
        """
        K, S, E = self.n_components, self.n_spheres, self.n_euclid
        if S:
            dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, S, 3)
            N = dirs.shape[0]
        else:
            euclid = np.asarray(euclid, dtype=np.float64).reshape(-1, E)
            N = euclid.shape[0]
        coords = np.zeros((N, K, self.dim), dtype=np.float64)
        in_chart = np.ones((N, K), dtype=bool)
        radii = np.zeros((N, K, S), dtype=np.float64)
        for s in range(S):
            nu, r, ok = tangent.log_map_masked(
                self.anchors[None, :, s, :], dirs[:, None, s, :]
            )
            coords[:, :, 2 * s : 2 * s + 2] = nu
            radii[:, :, s] = r
            in_chart &= ok
        if E:
            euclid = np.asarray(euclid, dtype=np.float64).reshape(-1, E)
            coords[:, :, 2 * S :] = euclid[:, None, :] - self.euclid_means[None, :, :]
        return coords, in_chart, radii

    def log_component_tangent(self, coords, in_chart):
        """Log tangent-space Gaussian density per component, (N, K)."""
        quad = np.einsum("nki,kij,nkj->nk", coords, self.cov_inv, coords)
        log_norm = -0.5 * (self.dim * LOG_TWO_PI + self.cov_logdet)
        out = log_norm[None, :] - 0.5 * quad
        return np.where(in_chart, out, -np.inf)

    def density(self, dirs=None, euclid=None):
        """Joint density: solid-angle measure on sphere blocks, Lebesgue on
        the Euclidean block. Components whose chart excludes a direction
        contribute zero."""
        coords, in_chart, radii = self.tangent_coords(dirs, euclid)
        lt = self.log_component_tangent(coords, in_chart)
        metric = np.sum(np.log(tangent.solid_angle_factor(radii)), axis=-1)
        comp = self.log_weights[None, :] + lt + np.where(in_chart, metric, 0.0)
        return np.exp(_logsumexp(comp, axis=-1))

    # -- sampling ----------------------------------------------------------

    def sample(self, n, rng):
        """Draw ``n`` samples. Returns ``(dirs (n,S,3), euclid (n,E), keep)``
        where ``keep`` is False for samples falling outside any chart."""
        K, S, E = self.n_components, self.n_spheres, self.n_euclid
        idx = rng.choice(K, size=n, p=self.weights / self.weights.sum())
        z = rng.standard_normal((n, self.dim))
        coords = np.einsum("nij,nj->ni", self.chol[idx], z)
        keep = np.ones(n, dtype=bool)
        dirs = np.zeros((n, S, 3), dtype=np.float64)
        for s in range(S):
            nu = coords[:, 2 * s : 2 * s + 2]
            r = np.linalg.norm(nu, axis=-1)
            ok = r < tangent.CHART_RADIUS
            keep &= ok
            dirs[:, s, :] = tangent.exp_map_unchecked(
                self.anchors[idx, s, :], np.where(ok[:, None], nu, 0.0)
            )
        euclid = self.euclid_means[idx] + coords[:, 2 * S :]
        return dirs, euclid, keep

    # -- conditioning ------------------------------------------------------

    def condition(self, dirs=None, euclid=None):
        """Condition on all blocks except the first sphere block.

        ``dirs`` supplies directions for sphere blocks 1..S-1 (shape
        (S-1, 3)); ``euclid`` the Euclidean value (shape (E,)).  Returns a
        :class:`DirectionalMixture` over the first sphere block.
        """
        K, S, E = self.n_components, self.n_spheres, self.n_euclid
        Db = self.dim - 2
        if Db == 0:
            return DirectionalMixture(
                self.weights.copy(), self.anchors[:, 0, :].copy(),
                np.zeros((K, 2)), self.cov.copy(), marginal=1.0,
            )
        nu_b = np.zeros((K, Db), dtype=np.float64)
        ok = np.ones(K, dtype=bool)
        log_metric_b = np.zeros(K, dtype=np.float64)
        if S > 1:
            dirs = np.asarray(dirs, dtype=np.float64).reshape(S - 1, 3)
            for s in range(1, S):
                nu, r, in_chart = tangent.log_map_masked(
                    self.anchors[:, s, :], dirs[None, s - 1, :]
                )
                nu_b[:, 2 * (s - 1) : 2 * s] = nu
                ok &= in_chart
                log_metric_b += np.log(tangent.solid_angle_factor(r))
        if E:
            euclid = np.asarray(euclid, dtype=np.float64).reshape(E)
            nu_b[:, 2 * (S - 1) :] = euclid[None, :] - self.euclid_means

        caa = self.cov[:, :2, :2]
        cab = self.cov[:, :2, 2:]
        cbb = self.cov[:, 2:, 2:]
        cbb_inv = np.linalg.inv(cbb)
        gain = np.einsum("kij,kjl->kil", cab, cbb_inv)
        offsets = np.einsum("kij,kj->ki", gain, nu_b)
        cond_cov = caa - np.einsum("kij,klj->kil", gain, cab)
        cond_cov = clamp_spd_2x2(cond_cov)

        sign, logdet_b = np.linalg.slogdet(cbb)
        quad = np.einsum("ki,kij,kj->k", nu_b, cbb_inv, nu_b)
        log_like = -0.5 * (Db * LOG_TWO_PI + logdet_b + quad) + log_metric_b
        lw = np.where(ok, self.log_weights + log_like, -np.inf)
        top = np.max(lw)
        if not np.isfinite(top) or top < np.log(EMPTY_WEIGHT_FLOOR):
            raise EmptyConditionalError("conditioning point has no support")
        marginal = float(np.exp(_logsumexp(lw)))
        weights = np.exp(lw - _logsumexp(lw))
        return DirectionalMixture(
            weights, self.anchors[:, 0, :].copy(), offsets, cond_cov,
            marginal=marginal,
        )

    # -- maintenance -------------------------------------------------------

    def check(self, tol=1e-9):
        """Raise unless all structural invariants hold (test helper)."""
        if abs(self.weights.sum() - 1.0) > tol:
            raise MixtureError("weights do not sum to 1")
        if np.any(self.weights < -tol):
            raise MixtureError("negative weight")
        if np.any(np.abs(np.linalg.norm(self.anchors, axis=-1) - 1.0) > tol):
            raise MixtureError("non-unit anchor")
        if np.max(np.abs(self.cov - np.swapaxes(self.cov, -1, -2))) > tol:
            raise MixtureError("asymmetric covariance")
        if np.any(np.linalg.eigvalsh(self.cov) <= 0.0):
            raise MixtureError("non-SPD covariance")
        return True

    # -- serialization -----------------------------------------------------

    def serialize(self) -> bytes:
        """Versioned little-endian blob; layout documented in the README."""
        K, S, E = self.n_components, self.n_spheres, self.n_euclid
        head = MIXTURE_MAGIC + struct.pack("<IIII", MIXTURE_VERSION, K, S, E)
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (self.weights, self.anchors, self.euclid_means, self.cov)
        )
        return head + body

    @classmethod
    def deserialize(cls, blob: bytes) -> "TangentMixture":
        if blob[:4] != MIXTURE_MAGIC:
            raise MixtureError("not a mixture blob")
        version, K, S, E = struct.unpack_from("<IIII", blob, 4)
        if version != MIXTURE_VERSION:
            raise MixtureError(f"unsupported mixture blob version {version}")
        D = 2 * S + E
        off = 20
        def take(shape):
            nonlocal off
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            return arr.astype(np.float64)
        weights = take((K,))
        anchors = take((K, S, 3))
        euclid = take((K, E))
        cov = take((K, D, D))
        return cls(weights, anchors, euclid, cov, check=False)

    def serialized_size(self) -> int:
        K, S, E = self.n_components, self.n_spheres, self.n_euclid
        D = 2 * S + E
        return 20 + 8 * (K + K * S * 3 + K * E + K * D * D)


class DirectionalMixture:
    """Directional mixture over the sphere with per-component chart anchors.

    ``marginal`` records the likelihood mass of the conditioning point that
    produced this mixture (1.0 for mixtures built directly).
    """

    def __init__(self, weights, anchors, offsets, cov, marginal=1.0, check=True):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.anchors = np.asarray(anchors, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        if check:
            if abs(self.weights.sum() - 1.0) > 1e-9:
                raise MixtureError("weights must sum to 1")
            tr = cov[..., 0, 0] + cov[..., 1, 1]
            det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]
            lo = 0.5 * (tr - np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0)))
            if np.any(lo < -1e-9):
                raise MixtureError("covariance block is not positive definite")
        # roundoff-degenerate blocks (e.g. collapsed conditionals) are floored
        self.cov = clamp_spd_2x2(cov)
        self.marginal = float(marginal)
        self.chol, self.cov_inv, self.cov_logdet = _gauss2_prepare(self.cov)
        self.log_weights = np.log(np.maximum(self.weights, 1e-320))

    @property
    def n_components(self):
        return self.weights.shape[0]

    def density(self, dirs):
        """Solid-angle density at unit directions (N, 3) -> (N,)."""
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        lp = directional_log_pdf(
            self.log_weights[None, :], self.anchors[None, :, :],
            self.offsets[None, :, :], self.cov_inv[None], self.cov_logdet[None],
            dirs,
        )
        return np.exp(lp)

    def sample(self, n, rng):
        """Draw ``n`` directions; returns ``(dirs, accepted)`` where rejected
        draws fell outside their chart and count as discards."""
        u = rng.random(n)
        z = rng.standard_normal((n, 2))
        dirs, ok = directional_sample(
            np.broadcast_to(self.log_weights, (n, self.n_components)),
            np.broadcast_to(self.anchors, (n, self.n_components, 3)),
            np.broadcast_to(self.offsets, (n, self.n_components, 2)),
            np.broadcast_to(self.chol, (n, self.n_components, 2, 2)),
            u, z,
        )
        return dirs, ok

    def rotate(self, rotation):
        """Apply a world rotation; the returned mixture satisfies
        ``rotated.density(R @ w) == self.density(w)``."""
        rotation = np.asarray(rotation, dtype=np.float64)
        w, a, o, c = directional_rotate(
            self.weights, self.anchors, self.offsets, self.cov, rotation
        )
        return DirectionalMixture(w, a, o, c, marginal=self.marginal, check=False)

    def product(self, other):
        """Approximate normalized product of two directional mixtures.

        ``self`` keeps its charts; ``other`` (conventionally the smaller
        mixture) is transported into them.
        """
        lw, anchors, offsets, cov = directional_product(
            self.log_weights[None], self.anchors[None], self.offsets[None],
            self.cov[None],
            other.log_weights[None], other.anchors[None], other.offsets[None],
            other.cov[None],
        )
        lw = lw[0]
        keep = np.isfinite(lw)
        if not np.any(keep):
            raise EmptyProductError("all product pair weights vanished")
        total = _logsumexp(lw[keep])
        weights = np.zeros(lw.shape)
        weights[keep] = np.exp(lw[keep] - total)
        mass = float(np.exp(total))
        return DirectionalMixture(
            weights[keep], anchors[0][keep], offsets[0][keep], cov[0][keep],
            marginal=self.marginal * other.marginal * mass, check=False,
        )

    def prune_top2(self):
        """Keep the two largest-weight components, renormalized."""
        idx = prune_top_k(self.log_weights, 2)
        w = self.weights[idx]
        return DirectionalMixture(
            w / w.sum(), self.anchors[idx], self.offsets[idx], self.cov[idx],
            marginal=self.marginal, check=False,
        )

    def condition(self, _value=None):
        """No conditioning dims remain; conditioning again is the identity."""
        return self

    def discard_mass(self, n=200_000, rng=None):
        """Monte Carlo estimate of the out-of-chart sampling mass."""
        rng = rng or np.random.default_rng(0)
        _, ok = self.sample(n, rng)
        return 1.0 - ok.mean()

    def check(self, tol=1e-9):
        if abs(self.weights.sum() - 1.0) > tol:
            raise MixtureError("weights do not sum to 1")
        if np.any(np.abs(np.linalg.norm(self.anchors, axis=-1) - 1.0) > tol):
            raise MixtureError("non-unit anchor")
        if np.any(np.linalg.eigvalsh(self.cov) <= 0.0):
            raise MixtureError("non-SPD covariance")
        return True
