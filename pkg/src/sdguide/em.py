"""Mini-batch MAP-EM for tangent-space mixtures.

Each training step processes one batch of weighted samples: an expectation
step produces per-component sufficient statistics (weight-normalized sums),
the statistics are blended across batches with a Robbins-Monro schedule
(second moments are transported between tangent charts first), and the
maximization step applies Dirichlet/inverse-Wishart priors whose strength
decays with the batch counter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tangent
from .mixture import TangentMixture, _logsumexp

S0_FLOOR = 1e-12


class EmError(RuntimeError):
    pass


@dataclass
class EmConfig:
    """Optimizer constants.

    ``dirichlet_scale / K`` and ``wishart_strength / K`` give the prior
    parameters; the Wishart scale matrix is diagonal with
    ``wishart_strength / K * directional_scale`` on tangent dims and
    ``wishart_strength / K * euclid_scale`` on Euclidean dims.
    """

    alpha: float = 0.5
    beta: float = 0.1
    dirichlet_scale: float = 1.0
    wishart_strength: float = 5.0
    directional_scale: float = 0.1e-4
    euclid_scale: float = 1.0e-4
    min_batch: int = 16

    def __post_init__(self):
        if not (self.alpha == 0.5 or 0.5 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0.5, 1]")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")

    def learning_rate(self, j: int) -> float:
        """Robbins-Monro averaging weight for batch ``j`` (1-based)."""
        return float((self.beta * j + 1.0) ** (-self.alpha))

    def wishart_matrix(self, n_spheres: int, n_euclid: int) -> np.ndarray:
        diag = [self.directional_scale] * (2 * n_spheres) + [self.euclid_scale] * n_euclid
        return np.diag(diag)


def prior_decay(j: int) -> float:
    """Prior strength for batch ``j``: 1 at the first batch, decaying to 0.

    The j^-1.5 rate keeps the priors dominant over the first few noisy
    batches while making their residual covariance shrinkage negligible
    within a few dozen batches (a plain 1/j leaves a ~10% bias at 50).
    """
    if j < 1:
        raise ValueError("batch index starts at 1")
    return float(j) ** -1.5


@dataclass
class BatchStats:
    """Sufficient statistics of one batch, normalized by its total weight."""

    s0: np.ndarray          # (K,)
    s1: np.ndarray          # (K, D) in the current per-component charts
    s2: np.ndarray          # (K, D, D) raw (uncentered) second moment
    batch_weight: float     # sum of sample weights
    n_samples: int


@dataclass
class SufficientStats:
    """Running Robbins-Monro averages plus the normalization factor.

    ``s2`` is kept centered about the current component means, expressed in
    their charts. ``weight_norm`` is the running average of per-batch total
    sample weight.
    """

    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    weight_norm: float = 0.0
    batches: int = 0
    proposed_anchors: np.ndarray | None = field(default=None, repr=False)
    proposed_euclid: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def zeros(cls, n_components: int, dim: int) -> "SufficientStats":
        return cls(
            s0=np.zeros(n_components),
            s1=np.zeros((n_components, dim)),
            s2=np.zeros((n_components, dim, dim)),
        )

    def copy(self) -> "SufficientStats":
        return SufficientStats(
            self.s0.copy(), self.s1.copy(), self.s2.copy(),
            self.weight_norm, self.batches,
            None if self.proposed_anchors is None else self.proposed_anchors.copy(),
            None if self.proposed_euclid is None else self.proposed_euclid.copy(),
        )


def responsibilities(mixture: TangentMixture, dirs, euclid):
    """Posterior component probabilities per sample, (N, K).

    Computed from tangent-space densities in log space; samples outside a
    component's chart get zero responsibility for it, and samples with no
    support anywhere get an all-zero row.
    """
    coords, in_chart, _ = mixture.tangent_coords(dirs, euclid)
    log_comp = mixture.log_weights[None, :] + mixture.log_component_tangent(coords, in_chart)
    norm = _logsumexp(log_comp, axis=-1)
    ok = np.isfinite(norm)
    resp = np.exp(log_comp - np.where(ok, norm, 0.0)[:, None])
    resp[~ok] = 0.0
    return resp, coords


def e_step(mixture: TangentMixture, dirs, euclid, weights, cfg: EmConfig) -> BatchStats:
    """Sufficient statistics of one weighted batch."""
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    if n < cfg.min_batch:
        raise EmError(f"batch of {n} samples is below the minimum of {cfg.min_batch}")
    resp, coords = responsibilities(mixture, dirs, euclid)
    K, D = mixture.n_components, mixture.dim
    peak = float(weights.max(initial=0.0))
    if peak <= 0.0:
        return BatchStats(np.zeros(K), np.zeros((K, D)), np.zeros((K, D, D)), 0.0, n)
    # the statistics are weight-normalized, so pre-scaling by the peak weight
    # is exact and keeps the sums finite for extreme Monte Carlo weights
    scaled = weights / peak
    total = float(scaled.sum())
    wr = scaled[:, None] * resp
    s0 = wr.sum(axis=0) / total
    s1 = np.einsum("nk,nkd->kd", wr, coords) / total
    s2 = np.einsum("nk,nkd,nke->kde", wr, coords, coords) / total
    return BatchStats(s0, s1, s2, total * peak, n)


def rm_average(stats: SufficientStats, batch: BatchStats, mixture: TangentMixture,
               cfg: EmConfig) -> SufficientStats:
    """Blend a batch into the running averages.

    The batch's second moment is first re-centered about the blended mean and
    both it and the previous running second moment are transported into the
    chart of the proposed new anchors via the first-order chart-change
    Jacobian. The proposed means are stashed on the returned stats for the
    maximization step.
    """
    j = stats.batches + 1
    eta = cfg.learning_rate(j)
    K, D = mixture.n_components, mixture.dim
    S, E = mixture.n_spheres, mixture.n_euclid

    s0 = (1.0 - eta) * stats.s0 + eta * batch.s0
    s1 = (1.0 - eta) * stats.s1 + eta * batch.s1
    weight_norm = (1.0 - eta) * stats.weight_norm + eta * batch.batch_weight

    live = s0 > S0_FLOOR
    denom = np.where(live, s0, 1.0)
    nu_bar = np.where(live[:, None], s1 / denom[:, None], 0.0)
    nu_bar = np.where(np.isfinite(nu_bar), nu_bar, 0.0)

    # proposed means: exp-map per sphere block, translation on Euclid dims.
    # Mean motion per step is trust-regioned to a quarter turn: beyond that
    # the first-order chart transport is meaningless and a starved component
    # would jump erratically.
    max_step = 0.5 * tangent.CHART_RADIUS
    anchors = mixture.anchors.copy()
    transport = np.tile(np.eye(D), (K, 1, 1))
    for s in range(S):
        block = nu_bar[:, 2 * s : 2 * s + 2]
        r = np.linalg.norm(block, axis=-1)
        scale = np.where(r > max_step, max_step / np.maximum(r, 1e-300), 1.0)
        block = block * scale[:, None]
        new_anchor = tangent.exp_map_unchecked(mixture.anchors[:, s, :], block)
        anchors[:, s, :] = new_anchor
        transport[:, 2 * s : 2 * s + 2, 2 * s : 2 * s + 2] = tangent.transport_jacobian(
            new_anchor, mixture.anchors[:, s, :]
        )
    euclid = mixture.euclid_means + nu_bar[:, 2 * S :]

    # center the batch moment about the blended mean, in the old charts
    outer = nu_bar[:, :, None] * batch.s1[:, None, :]
    s2_centered = (
        batch.s2 - outer - np.swapaxes(outer, -1, -2)
        + batch.s0[:, None, None] * nu_bar[:, :, None] * nu_bar[:, None, :]
    )
    blended = (1.0 - eta) * stats.s2 + eta * s2_centered
    s2 = np.einsum("kij,kjl,kml->kim", transport, blended, transport)
    s2 = 0.5 * (s2 + np.swapaxes(s2, -1, -2))

    return SufficientStats(
        s0, s1, s2, weight_norm, j,
        proposed_anchors=anchors, proposed_euclid=euclid,
    )


def m_step(mixture: TangentMixture, stats: SufficientStats, cfg: EmConfig) -> TangentMixture:
    """MAP parameter update from averaged statistics.

    Components with (numerically) zero accumulated weight keep their previous
    mean and covariance; weights always follow the Dirichlet-regularized
    update and stay normalized.
    """
    if stats.batches < 1:
        raise EmError("m_step before any batch was averaged")
    if stats.proposed_anchors is None:
        raise EmError("stats must come from rm_average")
    K = mixture.n_components
    S, E = mixture.n_spheres, mixture.n_euclid
    q = cfg.dirichlet_scale / K
    a = cfg.wishart_strength / K
    B = a * cfg.wishart_matrix(S, E)
    bj = prior_decay(stats.batches)

    weights = (bj * q + stats.s0) / (K * bj * q + stats.s0.sum())
    live = stats.s0 > S0_FLOOR
    with np.errstate(over="ignore", invalid="ignore"):  # dead rows masked below
        cov = (bj * B[None] + stats.s2) / (bj * a + stats.s0)[:, None, None]
    cov = np.where(live[:, None, None], cov, np.eye(cov.shape[-1]))
    # numerical floor: once the prior has decayed, a component whose mass
    # collapses onto very few samples can go rank-deficient
    vals, vecs = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    vals = np.maximum(vals, 1e-10)
    cov = np.einsum("kij,kj,klj->kil", vecs, vals, vecs)

    anchors = np.where(live[:, None, None], stats.proposed_anchors, mixture.anchors)
    euclid = (
        np.where(live[:, None], stats.proposed_euclid, mixture.euclid_means)
        if E else mixture.euclid_means
    )
    cov = np.where(live[:, None, None], cov, mixture.cov)
    if not (np.all(np.isfinite(cov)) and np.all(np.isfinite(anchors))
            and np.all(np.isfinite(euclid)) and np.all(np.isfinite(weights))):
        raise EmError("update produced non-finite parameters")
    return TangentMixture(weights / weights.sum(), anchors, euclid, cov, check=False)


def mini_batch_step(mixture: TangentMixture, stats: SufficientStats, dirs, euclid,
                    weights, cfg: EmConfig):
    """One full training step; returns ``(mixture', stats')``."""
    batch = e_step(mixture, dirs, euclid, weights, cfg)
    if batch.batch_weight <= 0.0:
        return mixture, stats  # all-black batch: no-op
    new_stats = rm_average(stats, batch, mixture, cfg)
    new_mixture = m_step(mixture, new_stats, cfg)
    return new_mixture, new_stats
