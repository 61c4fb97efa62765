"""Scene description: a small hand-authorable YAML schema, analytic
primitives (spheres, axis-aligned quads and boxes), a pinhole camera, and
vectorized ray intersection.

The schema is strict: unknown keys are rejected and every validation failure
raises :class:`SceneError` with a single actionable line.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .materials import BSDF_KINDS, Material

RAY_EPS = 1e-6
HUGE = 1e30


class SceneError(ValueError):
    pass


def _require(cond, path, message):
    if not cond:
        raise SceneError(f"{path}: {message}")


def _check_keys(d, path, required, optional=()):
    _require(isinstance(d, dict), path, "expected a mapping")
    for key in d:
        _require(key in required or key in optional, path, f"unknown key {key!r}")
    for key in required:
        _require(key in d, path, f"missing required key {key!r}")


def _vec3(value, path):
    _require(
        isinstance(value, (list, tuple)) and len(value) == 3
        and all(isinstance(v, (int, float)) for v in value),
        path, "expected a list of 3 numbers",
    )
    return np.asarray(value, dtype=np.float64)


def _number(value, path, positive=False):
    _require(isinstance(value, (int, float)), path, "expected a number")
    if positive:
        _require(value > 0, path, "must be positive")
    return float(value)


_MATERIAL_PARAM_KEYS = {
    "lambertian": (),
    "rough_conductor": ("roughness",),
    "glossy_plastic": ("roughness", "specular_weight"),
}


def _parse_material(d, path):
    _check_keys(d, path, required=("kind", "albedo"),
                optional=("roughness", "specular_weight"))
    kind_name = d["kind"]
    _require(kind_name in BSDF_KINDS, f"{path}.kind",
             f"unknown BSDF kind {kind_name!r}; known: {sorted(BSDF_KINDS)}")
    kind = BSDF_KINDS[kind_name]
    param_keys = _MATERIAL_PARAM_KEYS[kind_name]
    for key in d:
        if key in ("kind", "albedo"):
            continue
        _require(key in param_keys, path, f"key {key!r} not valid for {kind_name}")
    params = []
    for i, key in enumerate(param_keys):
        _require(key in d, path, f"{kind_name} requires key {key!r}")
        v = _number(d[key], f"{path}.{key}")
        lo, hi = kind.param_lo[i], kind.param_hi[i]
        _require(lo <= v <= hi, f"{path}.{key}", f"must lie in [{lo}, {hi}]")
        params.append(v)
    albedo = _vec3(d["albedo"], f"{path}.albedo")
    _require(np.all(albedo >= 0) and np.all(albedo <= 1.0), f"{path}.albedo",
             "components must lie in [0, 1]")
    return Material(kind, albedo, np.array(params))


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        forward = self.look_at - self.position
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise SceneError("camera: position and look_at coincide")
        self.forward = forward / norm
        right = np.cross(self.forward, self.up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise SceneError("camera: up vector is parallel to the view direction")
        self.right = right / rn
        self.true_up = np.cross(self.right, self.forward)

    def primary_rays(self, jitter, row0=0):
        """Rays for each (pixel, sample): ``jitter`` has shape (R, W, S, 2)
        in [0,1) covering image rows ``row0 .. row0+R``. Returns origins
        (N,3) and directions (N,3), N = R*W*S, ordered row-major by
        (row, col, sample); image row 0 is the top."""
        R, W, S, _ = jitter.shape
        H = self.height
        tan_half = np.tan(np.deg2rad(self.fov_deg) / 2.0)
        aspect = self.width / H
        ys, xs = np.meshgrid(np.arange(row0, row0 + R), np.arange(W), indexing="ij")
        px = (xs[..., None] + jitter[..., 0]) / self.width * 2.0 - 1.0
        py = 1.0 - (ys[..., None] + jitter[..., 1]) / H * 2.0
        d = (
            self.forward[None, None, None]
            + px[..., None] * tan_half * aspect * self.right
            + py[..., None] * tan_half * self.true_up
        ).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d


@dataclass
class Primitive:
    material: Material
    emission: np.ndarray

    @property
    def emissive(self):
        return bool(np.any(self.emission > 0.0))

    def bounds(self):
        raise NotImplementedError

    def intersect(self, o, d):
        """Return (t, normal) with t = HUGE where missed."""
        raise NotImplementedError


@dataclass
class Sphere(Primitive):
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0

    def bounds(self):
        return self.center - self.radius, self.center + self.radius

    def intersect(self, o, d):
        oc = o - self.center
        b = np.einsum("ni,ni->n", oc, d)
        c = np.einsum("ni,ni->n", oc, oc) - self.radius**2
        disc = b * b - c
        ok = disc > 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > RAY_EPS, t0, np.where(t1 > RAY_EPS, t1, HUGE))
        t = np.where(ok, t, HUGE)
        p = o + t[:, None] * d
        n = (p - self.center) / self.radius
        return t, n


_AXIS = {"x": 0, "y": 1, "z": 2}


@dataclass
class Quad(Primitive):
    """Axis-aligned rectangle: ``axis`` is the normal axis, ``level`` its
    coordinate; ``lo``/``hi`` bound the remaining axes in ascending order."""

    axis: int = 1
    level: float = 0.0
    lo: np.ndarray = field(default_factory=lambda: np.zeros(2))
    hi: np.ndarray = field(default_factory=lambda: np.ones(2))
    facing: float = 1.0

    def bounds(self):
        other = [a for a in range(3) if a != self.axis]
        lo = np.empty(3); hi = np.empty(3)
        lo[self.axis] = hi[self.axis] = self.level
        lo[other] = self.lo
        hi[other] = self.hi
        return lo, hi

    def intersect(self, o, d):
        other = [a for a in range(3) if a != self.axis]
        da = d[:, self.axis]
        safe = np.where(np.abs(da) < 1e-15, 1e-15, da)
        t = (self.level - o[:, self.axis]) / safe
        p = o + t[:, None] * d
        inside = (
            (t > RAY_EPS)
            & (np.abs(da) >= 1e-15)
            & (p[:, other[0]] >= self.lo[0]) & (p[:, other[0]] <= self.hi[0])
            & (p[:, other[1]] >= self.lo[1]) & (p[:, other[1]] <= self.hi[1])
        )
        t = np.where(inside, t, HUGE)
        n = np.zeros_like(o)
        n[:, self.axis] = self.facing
        return t, n


@dataclass
class Box(Primitive):
    lo: np.ndarray = field(default_factory=lambda: np.zeros(3))
    hi: np.ndarray = field(default_factory=lambda: np.ones(3))

    def bounds(self):
        return self.lo.copy(), self.hi.copy()

    def intersect(self, o, d):
        safe = np.where(np.abs(d) < 1e-15, 1e-15, d)
        inv = 1.0 / safe
        t_lo = (self.lo[None] - o) * inv
        t_hi = (self.hi[None] - o) * inv
        t_near = np.minimum(t_lo, t_hi)
        t_far = np.maximum(t_lo, t_hi)
        t_enter = t_near.max(axis=1)
        t_exit = t_far.min(axis=1)
        hit = (t_enter <= t_exit) & (t_exit > RAY_EPS)
        t = np.where(t_enter > RAY_EPS, t_enter, t_exit)
        t = np.where(hit, t, HUGE)
        p = o + t[:, None] * d
        # face normal: the axis whose slab bound is (nearly) met
        center = 0.5 * (self.lo + self.hi)
        half = np.maximum(0.5 * (self.hi - self.lo), 1e-12)
        rel = (p - center[None]) / half[None]
        axis = np.argmax(np.abs(rel), axis=1)
        n = np.zeros_like(o)
        n[np.arange(o.shape[0]), axis] = np.sign(rel[np.arange(o.shape[0]), axis])
        return t, n


class Scene:
    """Camera, primitives, optional constant environment emission."""

    def __init__(self, camera: Camera, primitives: list[Primitive],
                 environment: np.ndarray | None = None, integrator: dict | None = None):
        if not primitives:
            raise SceneError("primitives: scene needs at least one primitive")
        self.camera = camera
        self.primitives = primitives
        self.environment = environment
        self.integrator = integrator or {}
        los, his = zip(*[p.bounds() for p in primitives])
        self.bbox_lo = np.min(np.stack(los), axis=0)
        self.bbox_hi = np.max(np.stack(his), axis=0)
        self.bbox_span = np.maximum(self.bbox_hi - self.bbox_lo, 1e-9)

    def to_unit(self, points):
        """Normalize world positions into the unit cube."""
        return np.clip((points - self.bbox_lo) / self.bbox_span, 0.0, 1.0)

    def material_table(self):
        """Unique materials and the per-primitive index into them."""
        mats = []
        index = []
        for prim in self.primitives:
            for i, m in enumerate(mats):
                if m is prim.material:
                    index.append(i)
                    break
            else:
                index.append(len(mats))
                mats.append(prim.material)
        return mats, np.array(index, dtype=np.int32)

    def intersect(self, o, d):
        """Closest-hit query for a ray batch.

        Returns ``(t, prim_idx, position, normal)``; ``prim_idx`` is -1 for
        rays escaping to the environment and ``normal`` is the geometric
        normal of the hit primitive (not flipped).
        """
        n_rays = o.shape[0]
        best_t = np.full(n_rays, HUGE)
        best_idx = np.full(n_rays, -1, dtype=np.int32)
        best_n = np.zeros((n_rays, 3))
        for i, prim in enumerate(self.primitives):
            t, n = prim.intersect(o, d)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_idx = np.where(closer, i, best_idx)
            best_n = np.where(closer[:, None], n, best_n)
        pos = o + best_t[:, None] * d
        return best_t, best_idx, pos, best_n


def parse_scene(doc: dict) -> Scene:
    """Validate and construct a scene from a parsed YAML document."""
    _check_keys(doc, "scene", required=("camera", "primitives"),
                optional=("environment", "integrator"))
    cam = doc["camera"]
    _check_keys(cam, "camera", required=("position", "look_at", "fov", "resolution"),
                optional=("up",))
    resolution = cam["resolution"]
    _require(
        isinstance(resolution, (list, tuple)) and len(resolution) == 2
        and all(isinstance(v, int) and v > 0 for v in resolution),
        "camera.resolution", "expected [width, height] positive integers",
    )
    fov = _number(cam["fov"], "camera.fov", positive=True)
    _require(fov < 180.0, "camera.fov", "must be below 180 degrees")
    camera = Camera(
        position=_vec3(cam["position"], "camera.position"),
        look_at=_vec3(cam["look_at"], "camera.look_at"),
        up=_vec3(cam.get("up", [0.0, 1.0, 0.0]), "camera.up"),
        fov_deg=fov,
        width=int(resolution[0]),
        height=int(resolution[1]),
    )

    prims_doc = doc["primitives"]
    _require(isinstance(prims_doc, list) and prims_doc, "primitives",
             "expected a non-empty list")
    primitives = []
    for i, pd in enumerate(prims_doc):
        path = f"primitives[{i}]"
        _require(isinstance(pd, dict) and "type" in pd, path,
                 "expected a mapping with a 'type' key")
        kind = pd["type"]
        common_opt = ("emission",)
        if kind == "sphere":
            _check_keys(pd, path, required=("type", "center", "radius", "material"),
                        optional=common_opt)
            prim = Sphere(
                material=_parse_material(pd["material"], f"{path}.material"),
                emission=_vec3(pd.get("emission", [0, 0, 0]), f"{path}.emission"),
                center=_vec3(pd["center"], f"{path}.center"),
                radius=_number(pd["radius"], f"{path}.radius", positive=True),
            )
        elif kind == "quad":
            _check_keys(pd, path,
                        required=("type", "axis", "level", "min", "max", "material"),
                        optional=common_opt + ("facing",))
            _require(pd["axis"] in _AXIS, f"{path}.axis", "must be one of x, y, z")
            lo = pd["min"]; hi = pd["max"]
            for nm, v in (("min", lo), ("max", hi)):
                _require(
                    isinstance(v, (list, tuple)) and len(v) == 2
                    and all(isinstance(x, (int, float)) for x in v),
                    f"{path}.{nm}", "expected a list of 2 numbers",
                )
            _require(lo[0] < hi[0] and lo[1] < hi[1], f"{path}.min",
                     "min must be below max on both axes")
            facing = pd.get("facing", 1)
            _require(facing in (-1, 1), f"{path}.facing", "must be -1 or 1")
            prim = Quad(
                material=_parse_material(pd["material"], f"{path}.material"),
                emission=_vec3(pd.get("emission", [0, 0, 0]), f"{path}.emission"),
                axis=_AXIS[pd["axis"]],
                level=_number(pd["level"], f"{path}.level"),
                lo=np.asarray(lo, dtype=np.float64),
                hi=np.asarray(hi, dtype=np.float64),
                facing=float(facing),
            )
        elif kind == "box":
            _check_keys(pd, path, required=("type", "min", "max", "material"),
                        optional=common_opt)
            lo = _vec3(pd["min"], f"{path}.min")
            hi = _vec3(pd["max"], f"{path}.max")
            _require(np.all(lo < hi), f"{path}.min", "min must be below max on all axes")
            prim = Box(
                material=_parse_material(pd["material"], f"{path}.material"),
                emission=_vec3(pd.get("emission", [0, 0, 0]), f"{path}.emission"),
                lo=lo, hi=hi,
            )
        else:
            raise SceneError(f"{path}.type: unknown primitive type {kind!r}")
        primitives.append(prim)

    environment = None
    if "environment" in doc:
        env = doc["environment"]
        _check_keys(env, "environment", required=("radiance",))
        environment = _vec3(env["radiance"], "environment.radiance")

    integrator = {}
    if "integrator" in doc:
        integ = doc["integrator"]
        _check_keys(integ, "integrator", required=(),
                    optional=("spp", "mode", "seed", "bsdf_fraction", "max_vertices"))
        if "spp" in integ:
            _require(isinstance(integ["spp"], int) and integ["spp"] > 0
                     and integ["spp"] % 4 == 0,
                     "integrator.spp", "must be a positive multiple of 4")
        if "mode" in integ:
            _require(integ["mode"] in ("off", "radiance", "product"),
                     "integrator.mode", "must be one of off, radiance, product")
        if "seed" in integ:
            _require(isinstance(integ["seed"], int), "integrator.seed",
                     "must be an integer")
        if "bsdf_fraction" in integ:
            f = _number(integ["bsdf_fraction"], "integrator.bsdf_fraction")
            _require(0.0 < f < 1.0, "integrator.bsdf_fraction", "must lie in (0, 1)")
        if "max_vertices" in integ:
            _require(isinstance(integ["max_vertices"], int) and integ["max_vertices"] > 0,
                     "integrator.max_vertices", "must be a positive integer")
        integrator = dict(integ)

    return Scene(camera, primitives, environment, integrator)


def load_scene(path) -> Scene:
    """Load and validate a scene file."""
    try:
        with open(path, "r") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise SceneError(f"cannot read scene file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise SceneError(f"scene file is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise SceneError("scene: top level must be a mapping")
    return parse_scene(doc)
