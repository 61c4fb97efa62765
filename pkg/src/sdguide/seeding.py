"""Robust initialization of a leaf's 16-component mixture from its first
batch of path vertices: weight-clamped k-means++ style seeding of two spatial
positions and structured covariance construction around them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tangent
from .mixture import TangentMixture


def chi2_quantile_3dof(p: float, tol: float = 1e-12) -> float:
    """Inverse CDF of the chi-square distribution with 3 dof, by bisection.

    The 3-dof CDF has the closed form erf(sqrt(x/2)) - sqrt(2/pi) sqrt(x) e^{-x/2}.
    """
    def cdf(x):
        return math.erf(math.sqrt(x / 2.0)) - math.sqrt(2.0 / math.pi) * math.sqrt(x) * math.exp(-x / 2.0)

    lo, hi = 0.0, 100.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


CHI2_3_90 = chi2_quantile_3dof(0.9)

# vertices of a cube inscribed in the sphere: even, deterministic coverage
CANONICAL_DIRECTIONS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
) / math.sqrt(3.0)

DIRECTIONAL_VARIANCE = 2.0 * math.pi / 8.0


@dataclass
class InitConfig:
    spatial_radius: float = 1.6e-3     # poisson-disk radius on positions
    normal_angle_radius: float = 0.2   # poisson-disk radius on normal angles, radians
    weight_floor: float = 0.1
    weight_ceiling: float = 3.0
    normal_thickness: float = 3e-2     # covariance radius along the surface normal
    spatial_seeds: int = 2
    directional_seeds: int = 8


def _seed_distance(positions, normals, ref_position, ref_normal, cfg):
    """Squared seeding distance to a reference point, zeroed inside the
    poisson-disk region (both spatial distance and normal angle small)."""
    d_sq = np.sum((positions - ref_position) ** 2, axis=-1)
    cos_n = np.clip(normals @ ref_normal, -1.0, 1.0)
    angle = np.arccos(cos_n)
    dist = np.sqrt((angle / np.pi) ** 2 + d_sq)
    inside = (np.sqrt(d_sq) <= cfg.spatial_radius) & (angle <= cfg.normal_angle_radius)
    return np.where(inside, 0.0, dist)


def seed_positions(positions, normals, weights, cfg: InitConfig, rng) -> np.ndarray:
    """Select ``cfg.spatial_seeds`` indices into the input point set.

    The first seed is drawn proportionally to the clamped Monte Carlo weight;
    each further seed proportionally to clamped weight times the minimum
    seeding distance to the already chosen seeds. Degenerate inputs (all
    points inside one poisson disk) may repeat a seed.
    """
    positions = np.asarray(positions, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = positions.shape[0]
    clamped = np.clip(weights, cfg.weight_floor, cfg.weight_ceiling)

    chosen = [int(rng.choice(n, p=clamped / clamped.sum()))]
    min_dist = None
    while len(chosen) < cfg.spatial_seeds:
        d = _seed_distance(positions, normals, positions[chosen[-1]], normals[chosen[-1]], cfg)
        min_dist = d if min_dist is None else np.minimum(min_dist, d)
        p = clamped * min_dist
        total = p.sum()
        if total <= 0.0:
            chosen.append(chosen[-1])
        else:
            chosen.append(int(rng.choice(n, p=p / total)))
    return np.array(chosen, dtype=np.int64)


def init_covariance(normal, leaf_extent: float, cfg: InitConfig) -> np.ndarray:
    """5x5 covariance for one component: isotropic in the surface tangent
    plane (radius = leaf extent), thin along the normal, isotropic in the
    directional tangent space; radii hold ~90% of the Gaussian mass."""
    frame = tangent.orthonormal_frame(np.asarray(normal, dtype=np.float64))
    s, t, n = frame[0], frame[1], frame[2]
    r_st = float(leaf_extent)  # 2 * (extent / 2): two spatial seeds per leaf
    spatial = (
        r_st**2 * (np.outer(s, s) + np.outer(t, t))
        + cfg.normal_thickness**2 * np.outer(n, n)
    ) / CHI2_3_90
    cov = np.zeros((5, 5))
    cov[:2, :2] = DIRECTIONAL_VARIANCE * np.eye(2)
    cov[2:, 2:] = spatial
    return cov


def init_leaf_mixture(positions, normals, weights, leaf_extent: float,
                      cfg: InitConfig, rng) -> TangentMixture:
    """Build the 16-component mixture for a freshly activated leaf."""
    idx = seed_positions(positions, normals, weights, cfg, rng)
    K = cfg.spatial_seeds * cfg.directional_seeds
    anchors = np.zeros((K, 1, 3))
    euclid = np.zeros((K, 3))
    cov = np.zeros((K, 5, 5))
    k = 0
    for i in idx:
        comp_cov = init_covariance(normals[i], leaf_extent, cfg)
        for d in range(cfg.directional_seeds):
            anchors[k, 0] = CANONICAL_DIRECTIONS[d]
            euclid[k] = positions[i]
            cov[k] = comp_cov
            k += 1
    mix_weights = np.full(K, 1.0 / K)
    return TangentMixture(mix_weights, anchors, euclid, cov)
