"""Isotropic BSDF models for the toy renderer.

All functions work in the local shading frame (normal at +z) and are
vectorized over leading batch dimensions.  Three kinds are built in:

* ``lambertian`` — no parameters,
* ``rough_conductor`` — one parameter (roughness), a normalized reflection
  lobe around the mirror direction,
* ``glossy_plastic`` — two parameters (roughness, specular weight), a convex
  mix of the diffuse and reflection lobes.

``eval_many``/``sample_many``/``pdf_many`` take per-sample parameter arrays
and are what the mixture fitting uses; scene materials bind fixed parameters
plus an RGB albedo.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INV_PI = 1.0 / np.pi
MIN_EXPONENT = 0.0
MAX_EXPONENT = 1.0e4


def _phong_exponent(roughness):
    r = np.clip(np.asarray(roughness, dtype=np.float64), 1e-3, 1.0)
    return np.clip(2.0 / (r * r) - 2.0, MIN_EXPONENT, MAX_EXPONENT)


def _mirror(wo):
    m = np.array(wo, dtype=np.float64, copy=True)
    m[..., 0] *= -1.0
    m[..., 1] *= -1.0
    return m


def _lobe_frame(axis):
    """Orthonormal basis columns (t1, t2, axis) around a unit axis."""
    a = np.asarray(axis, dtype=np.float64)
    helper = np.zeros_like(a)
    use_x = np.abs(a[..., 2]) > 0.9
    helper[..., 0] = np.where(use_x, 1.0, 0.0)
    helper[..., 2] = np.where(use_x, 0.0, 1.0)
    t1 = np.cross(helper, a)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(a, t1)
    return t1, t2


def _sample_power_cosine(axis, exponent, u1, u2):
    """Direction with pdf (n+1)/(2pi) cos^n around ``axis`` (full sphere lobe)."""
    cos_a = u1 ** (1.0 / (exponent + 1.0))
    sin_a = np.sqrt(np.maximum(1.0 - cos_a * cos_a, 0.0))
    phi = 2.0 * np.pi * u2
    t1, t2 = _lobe_frame(axis)
    return (
        sin_a[..., None] * np.cos(phi)[..., None] * t1
        + sin_a[..., None] * np.sin(phi)[..., None] * t2
        + cos_a[..., None] * axis
    )


def _power_cosine_pdf(axis, exponent, wi):
    cos_a = np.clip(np.sum(axis * wi, axis=-1), 0.0, 1.0)
    return (exponent + 1.0) / (2.0 * np.pi) * cos_a**exponent


def _cosine_hemisphere(u1, u2):
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    z = np.sqrt(np.maximum(1.0 - u1, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


@dataclass(frozen=True)
class BsdfKind:
    """Shape functions of one isotropic BSDF family, parameterized by phi."""

    name: str
    n_params: int
    param_lo: tuple = ()
    param_hi: tuple = ()

    def eval_many(self, wi, wo, params):
        """Scalar BSDF shape value (albedo excluded); zero below the horizon."""
        raise NotImplementedError

    def sample_many(self, wo, params, u):
        """Draw wi from the built-in importance sampler.

        ``u`` holds three uniforms per sample (lobe choice + 2D).  Returns
        ``(wi, pdf)``; the pdf is a solid-angle density over the full sphere
        support of the sampler.
        """
        raise NotImplementedError

    def pdf_many(self, wi, wo, params):
        raise NotImplementedError


class _Lambertian(BsdfKind):
    def __init__(self):
        super().__init__(name="lambertian", n_params=0)

    def eval_many(self, wi, wo, params):
        up = (wi[..., 2] > 0.0) & (wo[..., 2] > 0.0)
        return np.where(up, INV_PI, 0.0)

    def sample_many(self, wo, params, u):
        wi = _cosine_hemisphere(u[..., 1], u[..., 2])
        return wi, self.pdf_many(wi, wo, params)

    def pdf_many(self, wi, wo, params):
        return np.maximum(wi[..., 2], 0.0) * INV_PI


class _RoughConductor(BsdfKind):
    def __init__(self):
        super().__init__(
            name="rough_conductor", n_params=1, param_lo=(0.05,), param_hi=(1.0,)
        )

    def eval_many(self, wi, wo, params):
        n = _phong_exponent(params[..., 0])
        m = _mirror(wo)
        cos_a = np.clip(np.sum(m * wi, axis=-1), 0.0, 1.0)
        up = (wi[..., 2] > 0.0) & (wo[..., 2] > 0.0)
        return np.where(up, (n + 2.0) / (2.0 * np.pi) * cos_a**n, 0.0)

    def sample_many(self, wo, params, u):
        n = _phong_exponent(params[..., 0])
        wi = _sample_power_cosine(_mirror(wo), n, u[..., 1], u[..., 2])
        return wi, self.pdf_many(wi, wo, params)

    def pdf_many(self, wi, wo, params):
        n = _phong_exponent(params[..., 0])
        return _power_cosine_pdf(_mirror(wo), n, wi)


class _GlossyPlastic(BsdfKind):
    def __init__(self):
        super().__init__(
            name="glossy_plastic", n_params=2,
            param_lo=(0.05, 0.1), param_hi=(1.0, 0.9),
        )

    def eval_many(self, wi, wo, params):
        ks = params[..., 1]
        n = _phong_exponent(params[..., 0])
        m = _mirror(wo)
        cos_a = np.clip(np.sum(m * wi, axis=-1), 0.0, 1.0)
        spec = (n + 2.0) / (2.0 * np.pi) * cos_a**n
        up = (wi[..., 2] > 0.0) & (wo[..., 2] > 0.0)
        return np.where(up, (1.0 - ks) * INV_PI + ks * spec, 0.0)

    def sample_many(self, wo, params, u):
        ks = params[..., 1]
        n = _phong_exponent(params[..., 0])
        pick_spec = u[..., 0] < ks
        wi_diff = _cosine_hemisphere(u[..., 1], u[..., 2])
        wi_spec = _sample_power_cosine(_mirror(wo), n, u[..., 1], u[..., 2])
        wi = np.where(pick_spec[..., None], wi_spec, wi_diff)
        return wi, self.pdf_many(wi, wo, params)

    def pdf_many(self, wi, wo, params):
        ks = params[..., 1]
        n = _phong_exponent(params[..., 0])
        diff = np.maximum(wi[..., 2], 0.0) * INV_PI
        spec = _power_cosine_pdf(_mirror(wo), n, wi)
        return (1.0 - ks) * diff + ks * spec


BSDF_KINDS: dict[str, BsdfKind] = {
    k.name: k for k in (_Lambertian(), _RoughConductor(), _GlossyPlastic())
}


@dataclass
class Material:
    """A BSDF kind bound to fixed parameters and an RGB albedo."""

    kind: BsdfKind
    albedo: np.ndarray
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.shape[0] != self.kind.n_params:
            raise ValueError(
                f"{self.kind.name} expects {self.kind.n_params} parameters, "
                f"got {self.params.shape[0]}"
            )

    def _params_for(self, shape):
        return np.broadcast_to(self.params, shape + (self.kind.n_params,))

    def eval(self, wi, wo):
        """RGB BSDF value f(wi, wo), local frame."""
        shape = np.broadcast_shapes(wi.shape[:-1], wo.shape[:-1])
        s = self.kind.eval_many(wi, wo, self._params_for(shape))
        return s[..., None] * self.albedo

    def sample(self, wo, u):
        wi, pdf = self.kind.sample_many(wo, self._params_for(wo.shape[:-1]), u)
        return wi, pdf

    def pdf(self, wi, wo):
        shape = np.broadcast_shapes(wi.shape[:-1], wo.shape[:-1])
        return self.kind.pdf_many(wi, wo, self._params_for(shape))
