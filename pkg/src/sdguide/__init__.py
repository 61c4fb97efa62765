"""Spatio-directional mixture models for guided Monte Carlo path tracing."""

from importlib import resources

from .mixture import DirectionalMixture, TangentMixture
from .render import RenderConfig, RenderResult, render_scene
from .scene import Scene, load_scene
from .spatial import SpatialTree

__version__ = "0.1.0"


def builtin_scene_path(name: str):
    """Filesystem path of a bundled example scene (cornell, furnace,
    flipped_light)."""
    ref = resources.files("sdguide").joinpath("scenes", f"{name}.yaml")
    if not ref.is_file():
        raise FileNotFoundError(f"no bundled scene named {name!r}")
    return ref


def load_builtin_scene(name: str) -> Scene:
    return load_scene(builtin_scene_path(name))


__all__ = [
    "DirectionalMixture",
    "TangentMixture",
    "RenderConfig",
    "RenderResult",
    "render_scene",
    "Scene",
    "load_scene",
    "SpatialTree",
    "builtin_scene_path",
    "load_builtin_scene",
]
