"""Offline fitting of parametric BSDFs as joint tangent-space mixtures.

A model for a BSDF family with P parameters is a mixture over
(incident direction, outgoing direction, parameters): two sphere blocks plus
P Euclidean dims, trained in the local shading frame.  Training samples come
from the family's own importance sampler; weights divide out the full input
sampling density (the incident sampler's pdf and the outgoing
uniform-spherical-coordinate density), so the fitted joint is proportional
to BSDF times cosine over all of its arguments.  At render time the model is
conditioned on (outgoing direction, parameters), yielding a 2D directional
mixture over incident directions.

Two regularizations keep the conditionals useful for sampling: the outgoing
block's covariance eigenvalues are floored so components stay wide in the
conditioning variable (maximum likelihood otherwise over-partitions it at
the expense of the conditional's shape), and the stochastic fit is finished
with a few near-maximum-likelihood steps on large fresh batches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import em
from .em import EmConfig, SufficientStats
from .materials import BSDF_KINDS, BsdfKind
from .mixture import DirectionalMixture, TangentMixture, clamp_spd_2x2

MODEL_MAGIC = b"BSDM"
MODEL_VERSION = 1

DEFAULT_COMPONENTS = 32
DEFAULT_BATCHES = 256
DEFAULT_BATCH_SIZE = 4096
POLISH_STEPS = 6
POLISH_BATCH = 150_000
OUTGOING_VARIANCE_FLOOR = 0.3
INIT_INCIDENT_VARIANCE = 2.0 * np.pi / 8.0
INIT_OUTGOING_VARIANCE = 0.8


class BsdfFitError(RuntimeError):
    pass


@dataclass
class BsdfModel:
    """Fitted mixture for one BSDF kind, shading-frame parameterized."""

    kind: BsdfKind
    mixture: TangentMixture

    @property
    def param_lo(self):
        return np.asarray(self.kind.param_lo, dtype=np.float64)

    @property
    def param_hi(self):
        return np.asarray(self.kind.param_hi, dtype=np.float64)

    def condition(self, wo, params=None) -> DirectionalMixture:
        """Directional mixture over incident directions in the shading frame."""
        wo = np.asarray(wo, dtype=np.float64).reshape(1, 3)
        if self.kind.n_params:
            params = np.asarray(params, dtype=np.float64).reshape(-1)
            if params.shape[0] != self.kind.n_params:
                raise ValueError("parameter count mismatch")
            lo, hi = self.param_lo, self.param_hi
            if np.any(params < lo - 1e-9) or np.any(params > hi + 1e-9):
                raise ValueError("parameters outside the trained ranges")
        else:
            params = None
        return self.mixture.condition(dirs=wo, euclid=params)

    # -- serialization ------------------------------------------------------

    def serialize(self) -> bytes:
        name = self.kind.name.encode()
        head = MODEL_MAGIC + struct.pack("<IH", MODEL_VERSION, len(name)) + name
        head += struct.pack("<I", self.kind.n_params)
        head += self.param_lo.astype("<f8").tobytes()
        head += self.param_hi.astype("<f8").tobytes()
        return head + self.mixture.serialize()

    @classmethod
    def deserialize(cls, blob: bytes) -> "BsdfModel":
        if blob[:4] != MODEL_MAGIC:
            raise ValueError("not a BSDF model blob")
        version, name_len = struct.unpack_from("<IH", blob, 4)
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported BSDF model version {version}")
        off = 10
        name = blob[off:off + name_len].decode()
        off += name_len
        (n_params,) = struct.unpack_from("<I", blob, off)
        off += 4 + 16 * n_params  # ranges re-read from the registry below
        if name not in BSDF_KINDS:
            raise ValueError(f"unknown BSDF kind {name!r}")
        kind = BSDF_KINDS[name]
        if kind.n_params != n_params:
            raise ValueError("parameter count mismatch against registry")
        return cls(kind, TangentMixture.deserialize(blob[off:]))

    @classmethod
    def load(cls, path) -> "BsdfModel":
        with open(path, "rb") as fh:
            return cls.deserialize(fh.read())

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.serialize())


def _sample_training_batch(kind: BsdfKind, n: int, rng):
    """Inputs for one fitting batch.

    Outgoing directions are uniform in spherical coordinates over the upper
    hemisphere, parameters uniform in their ranges, incident directions from
    the built-in importance sampler.  Weights are f * cos divided by the
    incident sampler's pdf and (up to a constant) by the outgoing sampling
    density, whose solid-angle form carries a 1/sin(theta) factor.
    """
    theta = rng.random(n) * (0.5 * np.pi)
    phi = rng.random(n) * (2.0 * np.pi)
    st = np.sin(theta)
    wo = np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
    if kind.n_params:
        lo = np.asarray(kind.param_lo)
        hi = np.asarray(kind.param_hi)
        params = lo + rng.random((n, kind.n_params)) * (hi - lo)
    else:
        params = np.zeros((n, 0))
    u = rng.random((n, 3))
    wi, pdf = kind.sample_many(wo, params, u)
    f = kind.eval_many(wi, wo, params)
    w = np.where(pdf > 0.0, f * np.maximum(wi[..., 2], 0.0) / np.maximum(pdf, 1e-300), 0.0)
    return wi, wo, params, w * np.maximum(st, 1e-9)


def _fibonacci_hemisphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0)) * 2.0
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def _initial_model(kind: BsdfKind, wi, wo, params, w, rng,
                   n_components=DEFAULT_COMPONENTS) -> TangentMixture:
    """Seed outgoing anchors on a deterministic hemisphere covering set and
    pair each with the incident direction of the nearest first-batch sample."""
    del rng, w
    K = n_components
    cano = _fibonacci_hemisphere(K)
    idx = np.argmax(wo @ cano.T, axis=0)
    anchors = np.stack([wi[idx], cano], axis=1)
    euclid = params[idx]
    D = 4 + kind.n_params
    cov = np.zeros((K, D, D))
    cov[:, :2, :2] = INIT_INCIDENT_VARIANCE * np.eye(2)
    cov[:, 2:4, 2:4] = INIT_OUTGOING_VARIANCE * np.eye(2)
    if kind.n_params:
        span = (np.asarray(kind.param_hi) - np.asarray(kind.param_lo)) / 4.0
        cov[:, 4:, 4:] = np.diag(np.maximum(span, 1e-2) ** 2)
    return TangentMixture(np.full(K, 1.0 / K), anchors, euclid, cov)


def _floor_outgoing_block(mixture: TangentMixture,
                          floor=OUTGOING_VARIANCE_FLOOR) -> TangentMixture:
    cov = mixture.cov.copy()
    cov[:, 2:4, 2:4] = clamp_spd_2x2(cov[:, 2:4, 2:4], floor=floor)
    return TangentMixture(
        mixture.weights, mixture.anchors, mixture.euclid_means, cov, check=False
    )


def fit_bsdf(kind_name: str, seed: int = 0, batches: int = DEFAULT_BATCHES,
             batch_size: int = DEFAULT_BATCH_SIZE, cfg: EmConfig | None = None,
             n_components: int = DEFAULT_COMPONENTS,
             polish_steps: int = POLISH_STEPS, progress=None) -> BsdfModel:
    """Fit a mixture to a registered BSDF kind.

    Mini-batch training with the running-average schedule is followed by
    ``polish_steps`` near-maximum-likelihood steps on large fresh batches
    (priors off, full replacement), which the stationary offline setting
    permits.  Raises :class:`BsdfFitError` on numeric failure; offline
    fitting has no silent fallback.
    """
    if kind_name not in BSDF_KINDS:
        raise BsdfFitError(
            f"unknown BSDF kind {kind_name!r}; known: {sorted(BSDF_KINDS)}"
        )
    kind = BSDF_KINDS[kind_name]
    cfg = cfg or EmConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB5DF]))
    wi, wo, params, w = _sample_training_batch(kind, batch_size, rng)
    mixture = _initial_model(kind, wi, wo, params, w, rng, n_components)
    stats = SufficientStats.zeros(mixture.n_components, mixture.dim)
    total = batches + polish_steps
    try:
        for b in range(batches):
            if b > 0:
                wi, wo, params, w = _sample_training_batch(kind, batch_size, rng)
            dirs = np.stack([wi, wo], axis=1)
            mixture, stats = em.mini_batch_step(mixture, stats, dirs, params, w, cfg)
            mixture = _floor_outgoing_block(mixture)
            if progress is not None:
                progress(b + 1, total)
        polish_cfg = EmConfig(dirichlet_scale=1e-9, wishart_strength=1e-9,
                              min_batch=cfg.min_batch)
        for p in range(polish_steps):
            wi, wo, params, w = _sample_training_batch(kind, POLISH_BATCH, rng)
            dirs = np.stack([wi, wo], axis=1)
            fresh = SufficientStats.zeros(mixture.n_components, mixture.dim)
            mixture, _ = em.mini_batch_step(mixture, fresh, dirs, params, w, polish_cfg)
            mixture = _floor_outgoing_block(mixture)
            if progress is not None:
                progress(batches + p + 1, total)
    except Exception as exc:
        raise BsdfFitError(f"EM failed while fitting {kind_name}: {exc}") from exc
    if not np.all(np.isfinite(mixture.cov)):
        raise BsdfFitError(f"fit of {kind_name} produced non-finite parameters")
    return BsdfModel(kind, mixture)


def prune_top2(conditional: DirectionalMixture) -> DirectionalMixture:
    """Keep the two largest-magnitude components of a conditioned mixture."""
    return conditional.prune_top2()
